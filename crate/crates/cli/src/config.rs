//! Run configuration: one TOML file, every table optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lacvis_core::attention::AttentionConfig;
use lacvis_core::covvol::{EnsembleConfig, SEVERITY_GRID};
use lacvis_core::encoder::EncoderConfig;
use lacvis_core::training::{ProbeConfig, SceneConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LacConfig {
    pub epsilon: f64,
}

impl Default for LacConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5 }
    }
}

/// Index ranges drawn from the scene generator. Ranges must not overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub lac_start: u64,
    pub probe_start: u64,
    pub probe_images: usize,
    pub test_start: u64,
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            lac_start: 0,
            probe_start: 1000,
            probe_images: 512,
            test_start: 5000,
            test_images: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    pub duality_trials: usize,
    pub ensemble: EnsembleConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 3,
            duality_trials: 20,
            ensemble: EnsembleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub target_class: usize,
    pub random_orderings: usize,
    /// Indices into the severity grid.
    pub severities: Vec<usize>,
    /// Pair every corrupted image with its mirror `2X − X̃`.
    pub antithetic: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            target_class: 0,
            random_orderings: 50,
            severities: (0..SEVERITY_GRID.len()).collect(),
            antithetic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttendConfig {
    /// Train the attention head as part of `train`.
    pub enabled: bool,
    pub head: AttentionConfig,
    pub images: usize,
}

impl Default for AttendConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            head: AttentionConfig::default(),
            images: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub adjoint_cases: usize,
    pub vjp_cases: usize,
    pub support_cases: usize,
    pub containment_images: usize,
    pub nested_min_pass: usize,
    pub strip_vectors: usize,
    pub gradient_images: usize,
    pub spd_matrices: usize,
    pub bound_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            adjoint_cases: 100,
            vjp_cases: 20,
            support_cases: 50,
            containment_images: 20,
            nested_min_pass: 18,
            strip_vectors: 200,
            gradient_images: 5,
            spd_matrices: 20,
            bound_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub scenes: SceneConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub lac: LacConfig,
    pub data: DataConfig,
    pub selection: SelectionConfig,
    pub analysis: AnalysisConfig,
    pub attention: AttendConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            encoder: EncoderConfig::default(),
            scenes: SceneConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            lac: LacConfig::default(),
            data: DataConfig::default(),
            selection: SelectionConfig::default(),
            analysis: AnalysisConfig::default(),
            attention: AttendConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.scenes.validate()?;
        if self.scenes.size != self.encoder.input_size {
            bail!(
                "scene size {:?} differs from encoder input size {:?}",
                self.scenes.size,
                self.encoder.input_size
            );
        }
        if self.encoder.input_channels != 3 {
            bail!("scenes are RGB; encoder.input_channels must be 3");
        }
        if !(self.lac.epsilon >= 0.0 && self.lac.epsilon.is_finite()) {
            bail!("lac.epsilon must be a finite nonnegative number");
        }
        let deepest = *self.encoder.widths.last().expect("validated nonempty");
        if self.selection.k == 0 || self.selection.k > deepest {
            bail!("selection.k = {} must lie in 1..={deepest}", self.selection.k);
        }
        if self.analysis.target_class >= self.scenes.num_classes {
            bail!(
                "analysis.target_class = {} must lie in 0..{}",
                self.analysis.target_class,
                self.scenes.num_classes
            );
        }
        if let Some(&s) = self.analysis.severities.iter().find(|&&s| s >= SEVERITY_GRID.len()) {
            bail!("severity {s} outside 0..{}", SEVERITY_GRID.len());
        }
        let d = &self.data;
        let ranges = [
            (d.lac_start, self.train.dataset_size as u64, "lac"),
            (d.probe_start, d.probe_images as u64, "probe"),
            (d.test_start, d.test_images as u64, "test"),
        ];
        for (i, a) in ranges.iter().enumerate() {
            if a.1 == 0 {
                bail!("{} image count must be positive", a.2);
            }
            for b in &ranges[i + 1..] {
                if a.0 < b.0 + b.1 && b.0 < a.0 + a.1 {
                    bail!("{} and {} image ranges overlap", a.2, b.2);
                }
            }
        }
        if self.attention.head.blocks == 0 {
            bail!("attention.head.blocks must be positive");
        }
        if self.verify.nested_min_pass > self.verify.containment_images {
            bail!("verify.nested_min_pass exceeds verify.containment_images");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("sed = 3").unwrap_err();
        assert!(format!("{e:#}").contains("unknown field"), "{e:#}");
        assert!(RunConfig::from_toml("[lac]\nepsilon = 1e-8\nfoo = 1").is_err());
    }

    #[test]
    fn semantic_checks() {
        assert!(RunConfig::from_toml("[selection]\nk = 33").is_err());
        assert!(RunConfig::from_toml("[analysis]\nseverities = [0, 6]").is_err());
        assert!(RunConfig::from_toml("[data]\nprobe_start = 10").is_err());
        assert!(RunConfig::from_toml("[lac]\nepsilon = -1.0").is_err());
    }
}
