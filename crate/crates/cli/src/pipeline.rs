//! The shared experiment pipeline: frozen encoder, scene generator, trained LAC
//! parameters, linear probe and an optional attention head.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use lacvis_core::attention::{train_attention, AttentionHead, AttentionTrainRecord};
use lacvis_core::encoder::{build_encoder, Encoder};
use lacvis_core::io::{self, Container, Section};
use lacvis_core::lac::LacParams;
use lacvis_core::math::Tensor;
use lacvis_core::par;
use lacvis_core::rng::derive_seed;
use lacvis_core::training::{fit_linear_probe, train_lac, LinearProbe, SceneGenerator, SceneSample, TrainHistory};

use crate::config::RunConfig;
use crate::report::Table;

pub const MODEL_FILE: &str = "model.lacv";
pub const DATASET_FILE: &str = "lac_dataset.lacv";
pub const HISTORY_FILE: &str = "history.csv";

pub struct Pipeline {
    pub config: RunConfig,
    pub encoder: Encoder,
    pub generator: SceneGenerator,
    pub params: LacParams,
    /// Absent when the parameters were loaded from disk.
    pub history: Option<TrainHistory>,
    pub probe: LinearProbe,
    pub test: Vec<SceneSample>,
    pub test_features: Vec<Vec<f64>>,
    pub test_accuracy: f64,
}

pub fn encoder_for(cfg: &RunConfig) -> Result<Encoder> {
    Ok(build_encoder(&cfg.encoder, derive_seed(cfg.seed, "encoder"))?)
}

pub fn generator_for(cfg: &RunConfig) -> Result<SceneGenerator> {
    Ok(SceneGenerator::new(&cfg.scenes, derive_seed(cfg.seed, "data"))?)
}

pub fn gap_features(enc: &Encoder, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    par::map_slice(images, |x| enc.forward(x).map(|t| t.gap_features()))
        .into_iter()
        .map(|r| r.map_err(Into::into))
        .collect()
}

/// The subset of the config that determines trained artifacts.
fn model_key(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "seed": cfg.seed,
        "encoder": cfg.encoder,
        "scenes": cfg.scenes,
        "train": cfg.train,
        "probe": cfg.probe,
        "lac": cfg.lac,
        "data": cfg.data,
    })
}

impl Pipeline {
    pub fn lac_samples(cfg: &RunConfig, gen: &SceneGenerator) -> Vec<SceneSample> {
        gen.dataset(cfg.data.lac_start, cfg.train.dataset_size)
    }

    pub fn probe_samples(&self) -> Vec<SceneSample> {
        self.generator.dataset(self.config.data.probe_start, self.config.data.probe_images)
    }

    /// Trains the LAC parameters and the probe from scratch.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = encoder_for(cfg)?;
        let generator = generator_for(cfg)?;
        let lac_images: Vec<Tensor> = Self::lac_samples(cfg, &generator).into_iter().map(|s| s.image).collect();
        let (params, history) = train_lac(
            &encoder,
            &lac_images,
            cfg.lac.epsilon,
            &cfg.train,
            derive_seed(cfg.seed, "train"),
        )?;
        let probe = Self::fit_probe(cfg, &encoder, &generator)?;
        Self::assemble(cfg, encoder, generator, params, Some(history), probe)
    }

    fn fit_probe(cfg: &RunConfig, enc: &Encoder, gen: &SceneGenerator) -> Result<LinearProbe> {
        let samples = gen.dataset(cfg.data.probe_start, cfg.data.probe_images);
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let features = gap_features(enc, &images)?;
        Ok(fit_linear_probe(&features, &labels, cfg.scenes.num_classes, &cfg.probe)?)
    }

    fn assemble(
        cfg: &RunConfig,
        encoder: Encoder,
        generator: SceneGenerator,
        params: LacParams,
        history: Option<TrainHistory>,
        probe: LinearProbe,
    ) -> Result<Self> {
        let test = generator.dataset(cfg.data.test_start, cfg.data.test_images);
        let images: Vec<&Tensor> = test.iter().map(|s| &s.image).collect();
        let test_features = gap_features(&encoder, &images)?;
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        let test_accuracy = probe.accuracy(&test_features, &labels);
        Ok(Self {
            config: cfg.clone(),
            encoder,
            generator,
            params,
            history,
            probe,
            test,
            test_features,
            test_accuracy,
        })
    }

    pub fn model_path(cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join(MODEL_FILE)
    }

    /// Reuses `out_dir/model.lacv` when it was produced from the same model-relevant
    /// config; otherwise trains and saves.
    pub fn load_or_build(cfg: &RunConfig) -> Result<Self> {
        let path = Self::model_path(cfg);
        if path.exists() {
            let c = Container::load(&path).with_context(|| format!("reading {}", path.display()))?;
            if c.section("run").map(|s| s.header == model_key(cfg)).unwrap_or(false) {
                return Self::from_container(cfg, &c);
            }
        }
        let p = Self::build(cfg)?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        p.save(&cfg.out_dir, None)?;
        Ok(p)
    }

    fn from_container(cfg: &RunConfig, c: &Container) -> Result<Self> {
        let encoder = io::encoder_from_section(c.section("encoder")?)?;
        let params = io::lac_from_section(c.section("lac")?, &encoder)?;
        let probe = io::probe_from_section(c.section("probe")?)?;
        let generator = generator_for(cfg)?;
        Self::assemble(cfg, encoder, generator, params, None, probe)
    }

    pub fn container(&self, head: Option<&AttentionHead>) -> Container {
        let mut c = Container::default();
        c.sections.push(Section {
            tag: "run".into(),
            header: model_key(&self.config),
            values: Vec::new(),
        });
        c.sections.push(io::encoder_section(&self.encoder));
        c.sections.push(io::lac_section(&self.params));
        c.sections.push(io::probe_section(&self.probe));
        if let Some(h) = head {
            c.sections.push(attention_section(h));
        }
        c
    }

    /// Writes the model container, the LAC training set snapshot and, when
    /// available, the training history.
    pub fn save(&self, dir: &Path, head: Option<&AttentionHead>) -> Result<()> {
        self.container(head).save(&dir.join(MODEL_FILE))?;
        let samples = Self::lac_samples(&self.config, &self.generator);
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut ds = Container::default();
        ds.sections.push(io::dataset_section(&images, &labels));
        ds.save(&dir.join(DATASET_FILE))?;
        if let Some(h) = &self.history {
            history_table(h).write_csv(&dir.join(HISTORY_FILE))?;
        }
        Ok(())
    }

    /// First test image of `class` and its index in the test set.
    pub fn reference(&self, class: usize) -> Result<(usize, &SceneSample)> {
        self.test
            .iter()
            .enumerate()
            .find(|(_, s)| s.label == class)
            .ok_or_else(|| anyhow::anyhow!("no test image of class {class}"))
    }

    pub fn train_attention(&self) -> Result<(AttentionHead, Vec<AttentionTrainRecord>)> {
        let cfg = &self.config.attention.head;
        let samples = self.generator.dataset(self.config.data.probe_start, cfg.train_size);
        let deep: Vec<Result<Tensor>> = par::map_slice(&samples, |s| {
            self.encoder.forward(&s.image).map(|t| t.deepest().clone()).map_err(Into::into)
        });
        let deep: Vec<Tensor> = deep.into_iter().collect::<Result<_>>()?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(train_attention(
            &deep,
            &labels,
            self.config.scenes.num_classes,
            cfg,
            derive_seed(self.config.seed, "attention"),
        )?)
    }
}

pub fn history_table(h: &TrainHistory) -> Table {
    let mut t = Table::new(&[
        ("step", "count"),
        ("loss", "summed absolute pixel error"),
        ("mean_abs_beta", "pixel value"),
        ("min_gamma", "1"),
    ]);
    for s in &h.steps {
        t.push(vec![s.step.into(), s.loss.into(), s.mean_abs_beta.into(), s.min_gamma.into()]);
    }
    t
}

pub fn attention_section(h: &AttentionHead) -> Section {
    Section {
        tag: "attention".into(),
        header: json!({
            "blocks": h.blocks.len(),
            "dim": h.dim(),
            "classes": h.classes(),
            "norm_epsilon": h.norm_epsilon,
        }),
        values: h.to_flat(),
    }
}

pub fn attention_from_section(s: &Section) -> Result<AttentionHead> {
    let get = |k: &str| s.header.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
    let (Some(blocks), Some(dim), Some(classes)) = (get("blocks"), get("dim"), get("classes")) else {
        anyhow::bail!("attention section header incomplete");
    };
    let eps = s.header.get("norm_epsilon").and_then(|v| v.as_f64()).unwrap_or(0.0);
    let mut h = AttentionHead::zeros(dim, blocks, classes, eps);
    h.set_flat(&s.values)?;
    h.trained = true;
    Ok(h)
}
