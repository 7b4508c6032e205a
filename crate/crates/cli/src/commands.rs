//! Subcommand bodies and the analyses they share with the acceptance tests.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use lacvis_core::attention::{attend_visualize, readout_seed, AttentionHead, Readout};
use lacvis_core::covvol::{
    brute_force_select, centered_covariance, corrupt, duality_experiment, energy_select, greedy_select,
    ood_indicators, spearman, subset_logdet, GapMatrix, OodIndicators, SEVERITY_GRID,
};
use lacvis_core::encoder::EffectiveFields;
use lacvis_core::interference::{
    ablation_study, class_reconstruction_from_basis, default_fractions, ecr, fg_energy, gram_analysis,
    insertion_deletion_auc, saliency_map, saliency_order, AblationCurve,
};
use lacvis_core::io::{self, Container, Normalization};
use lacvis_core::lac::{cascade_invert, containment_violations, synthesize, SpatialBasis};
use lacvis_core::math::Tensor;
use lacvis_core::par;
use lacvis_core::rng::derive_seed;
use lacvis_core::training::param_summary;

use crate::config::RunConfig;
use crate::pipeline::{attention_from_section, gap_features, Pipeline};
use crate::report::{Report, Table, Timing};
use crate::verify::{self, Fault};

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn finish(report: &Report, timing: &Timing, dir: &Path) -> Result<()> {
    for (name, t) in &report.tables {
        t.write_csv(&dir.join(format!("{name}.csv")))?;
    }
    report.write(dir)?;
    timing.write(dir, &report.command)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainingDynamics {
    pub max_abs_beta: f64,
    pub mean_gamma: f64,
    pub min_gamma: f64,
    pub first_decile_loss: f64,
    pub last_decile_loss: f64,
}

impl TrainingDynamics {
    pub fn beta_bounded(&self) -> bool {
        self.max_abs_beta <= 0.05 * self.mean_gamma
    }

    pub fn gamma_positive(&self) -> bool {
        self.min_gamma > 0.0
    }

    pub fn loss_decreased(&self) -> bool {
        self.last_decile_loss < self.first_decile_loss
    }
}

pub fn training_dynamics(p: &Pipeline) -> Result<TrainingDynamics> {
    let Some(h) = &p.history else {
        bail!("training history unavailable; parameters were loaded from disk");
    };
    let (_, max_abs_beta, mean_gamma, min_gamma) = param_summary(&p.params);
    let (first, last) = h.decile_medians();
    Ok(TrainingDynamics {
        max_abs_beta,
        mean_gamma,
        min_gamma,
        first_decile_loss: first,
        last_decile_loss: last,
    })
}

pub fn train(cfg: &RunConfig) -> Result<Report> {
    let dir = prepare_out(cfg)?;
    let mut timing = Timing::default();
    let p = timing.time("train_lac_and_probe", || Pipeline::build(cfg))?;
    let head = if cfg.attention.enabled {
        Some(timing.time("train_attention", || p.train_attention())?)
    } else {
        None
    };
    p.save(dir, head.as_ref().map(|h| &h.0))?;

    let mut report = Report::new("train", cfg);
    let d = training_dynamics(&p)?;
    report.summary.insert("training_dynamics".into(), serde_json::to_value(&d)?);
    report.summary.insert("probe_train_accuracy".into(), p.probe.train_accuracy.into());
    report.summary.insert("probe_test_accuracy".into(), p.test_accuracy.into());
    if let Some((_, records)) = &head {
        let mut t = Table::new(&[("step", "count"), ("loss", "nats"), ("accuracy", "fraction")]);
        for r in records {
            t.push(vec![r.step.into(), r.loss.into(), r.accuracy.into()]);
        }
        report.tables.insert("attention_history".into(), t);
    }
    finish(&report, &timing, dir)?;
    Ok(report)
}

/// Which channels `invert` renders besides the full synthesis.
#[derive(Clone, Debug)]
pub enum InvertTarget {
    Channels(Vec<usize>),
    Class(usize),
}

pub struct InvertArgs {
    pub image: usize,
    /// `None` renders every layer.
    pub layer: Option<usize>,
    pub target: InvertTarget,
}

struct Images<'a> {
    dir: &'a Path,
    norms: Table,
}

impl<'a> Images<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            norms: Table::new(&[
                ("file", "path"),
                ("max_abs", "pixel value"),
                ("offset", "pixel value"),
                ("scale", "byte per pixel value"),
            ]),
        }
    }

    fn write(&mut self, name: &str, t: &Tensor) -> Result<Normalization> {
        let file = format!("{name}.ppm");
        let n = io::write_ppm(&self.dir.join(&file), t)?;
        self.norms.push(vec![file.into(), n.max_abs.into(), n.offset.into(), n.scale.into()]);
        Ok(n)
    }
}

pub fn invert(cfg: &RunConfig, args: &InvertArgs) -> Result<Report> {
    let dir = prepare_out(cfg)?;
    let mut timing = Timing::default();
    let p = timing.time("load_or_train", || Pipeline::load_or_build(cfg))?;
    let Some(sample) = p.test.get(args.image) else {
        bail!("image index {} out of range 0..{}", args.image, p.test.len());
    };
    let depth = p.encoder.depth();
    if let Some(l) = args.layer {
        if l >= depth {
            bail!("layer {l} out of range 0..{depth}");
        }
    }
    let trace = p.encoder.forward(&sample.image)?;
    let mut images = Images::new(dir);
    images.write("input", &sample.image)?;

    let mut report = Report::new("invert", cfg);
    let mut levels = Table::new(&[("layer", "index"), ("fg_energy", "fraction"), ("active_channels", "count")]);
    let layers: Vec<usize> = match args.layer {
        Some(l) => vec![l],
        None => (0..depth).collect(),
    };
    let recons = timing.time("synthesis", || -> Result<Vec<_>> {
        layers.iter().map(|&l| Ok(synthesize(&p.encoder, &trace, &p.params, l)?)).collect()
    })?;
    for (l, r) in layers.iter().zip(&recons) {
        images.write(&format!("x_hat_l{l}"), &r.image)?;
        let active = r.basis.entries.iter().filter(|e| e.active).count();
        levels.push(vec![(*l).into(), fg_energy(&r.image, &sample.foreground)?.into(), active.into()]);
    }
    report.tables.insert("invert_levels".into(), levels);

    let l = args.layer.unwrap_or(depth - 1);
    let channels = trace.h(l).shape()[0];
    match &args.target {
        InvertTarget::Channels(cs) => {
            if let Some(&bad) = cs.iter().find(|&&c| c >= channels) {
                bail!("channel {bad} out of range 0..{channels} at layer {l}");
            }
            let mut t = Table::new(&[("channel", "index"), ("active", "bool"), ("fg_energy", "fraction")]);
            for &c in cs {
                let e = cascade_invert(&p.encoder, &trace, &p.params, l, c)?;
                images.write(&format!("channel_l{l}_c{c}"), &e.v)?;
                t.push(vec![c.into(), e.active.into(), fg_energy(&e.v, &sample.foreground)?.into()]);
            }
            report.tables.insert("invert_channels".into(), t);
        }
        InvertTarget::Class(class) => {
            if *class >= p.probe.classes() {
                bail!("class {class} out of range 0..{}", p.probe.classes());
            }
            let deepest = depth - 1;
            let basis = SpatialBasis::compute(&p.encoder, &trace, &p.params, deepest)?;
            let rec = class_reconstruction_from_basis(&basis, &p.probe.class_weights(*class), *class)?;
            images.write(&format!("class{class}_full"), &rec.full)?;
            images.write(&format!("class{class}_positive"), &rec.positive)?;
            images.write(&format!("class{class}_negative"), &rec.negative)?;
            let mut t = Table::new(&[("part", "label"), ("fg_energy", "fraction")]);
            for (name, x) in [("full", &rec.full), ("positive", &rec.positive), ("negative", &rec.negative)] {
                t.push(vec![name.into(), fg_energy(x, &sample.foreground)?.into()]);
            }
            report.tables.insert("invert_class".into(), t);
            let h1 = gram_analysis(&basis.vectors())?;
            report.summary.insert("gram_energy_fraction".into(), h1.energy_fraction.into());
        }
    }
    report.summary.insert("image".into(), args.image.into());
    report.summary.insert("label".into(), sample.label.into());
    report.tables.insert("invert_normalization".into(), images.norms);
    finish(&report, &timing, dir)?;
    Ok(report)
}

/// Runs the verification suite and writes its report. The caller maps failure to the exit status.
pub fn verify(cfg: &RunConfig, filter: Option<&str>, fault: Fault) -> Result<Report> {
    let dir = prepare_out(cfg)?;
    let mut timing = Timing::default();
    let report = timing.time("verify", || verify::run(cfg, filter, fault))?;
    finish(&report, &timing, dir)?;
    Ok(report)
}

pub fn select(cfg: &RunConfig) -> Result<Report> {
    let dir = prepare_out(cfg)?;
    let mut timing = Timing::default();
    let p = timing.time("load_or_train", || Pipeline::load_or_build(cfg))?;
    let k = cfg.selection.k;
    let samples = p.probe_samples();
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let h = GapMatrix::from_features(&gap_features(&p.encoder, &images)?)?;
    if k > h.channels() {
        bail!("selection size {k} exceeds the channel count {}", h.channels());
    }
    let sigma = centered_covariance(&h);

    let mut report = Report::new("select", cfg);
    let mut t = Table::new(&[
        ("method", "label"),
        ("step", "index"),
        ("channel", "index"),
        ("pivot", "feature variance"),
        ("cumulative_logdet", "nats"),
    ]);
    let greedy = greedy_select(&sigma, k)?;
    for (i, (&c, &pv)) in greedy.indices.iter().zip(&greedy.pivots).enumerate() {
        let ld = subset_logdet(&sigma, &greedy.indices[..=i]);
        t.push(vec!["greedy".into(), i.into(), c.into(), pv.into(), ld.into()]);
    }
    let energy = energy_select(&h, k)?;
    for i in 0..energy.len() {
        let ld = subset_logdet(&sigma, &energy[..=i]);
        t.push(vec!["energy".into(), i.into(), energy[i].into(), Value::Null, ld.into()]);
    }
    let brute = timing.time("brute_force", || brute_force_select(&sigma, k))?;
    for (i, &c) in brute.indices.iter().enumerate() {
        t.push(vec!["brute".into(), i.into(), c.into(), Value::Null, Value::Null]);
    }
    report.tables.insert("selection".into(), t);
    report.summary.insert(
        "logdet".into(),
        json!({ "greedy": greedy.logdet, "energy": subset_logdet(&sigma, &energy), "brute": brute.logdet }),
    );

    let duality = timing.time("duality", || {
        duality_experiment(
            &cfg.selection.ensemble,
            k,
            cfg.selection.duality_trials,
            derive_seed(cfg.seed, "duality"),
        )
    })?;
    std::fs::write(
        dir.join("duality.json"),
        serde_json::to_string_pretty(&crate::report::sorted(serde_json::to_value(&duality)?))? + "\n",
    )?;
    report.summary.insert("duality_agreement_rate".into(), duality.agreement_rate.into());
    report.summary.insert("duality_mean_spearman".into(), duality.mean_spearman.into());

    let mut c = Container::default();
    c.sections.push(io::covariance_section("gap_covariance", &sigma));
    c.save(&dir.join("covariance.lacv"))?;
    finish(&report, &timing, dir)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeverityRow {
    pub severity: usize,
    pub level: f64,
    pub indicators: OodIndicators,
}

/// GAP-feature geometry of the test set under each corruption severity.
pub fn ood_sweep(p: &Pipeline) -> Result<Vec<SeverityRow>> {
    let cfg = &p.config;
    let clean = GapMatrix::from_features(&p.test_features)?;
    let seed = derive_seed(cfg.seed, "corrupt");
    cfg.analysis
        .severities
        .iter()
        .map(|&s| {
            let feats = par::map_range(p.test.len(), |i| -> Result<Vec<Vec<f64>>> {
                let x = &p.test[i].image;
                let c = corrupt(x, s, seed, i as u64)?;
                let mut out = vec![p.encoder.forward(&c)?.gap_features()];
                if cfg.analysis.antithetic {
                    out.push(p.encoder.forward(&x.scale(2.0).sub(&c))?.gap_features());
                }
                Ok(out)
            });
            let mut rows = Vec::new();
            for f in feats {
                rows.extend(f?);
            }
            Ok(SeverityRow {
                severity: s,
                level: SEVERITY_GRID[s],
                indicators: ood_indicators(&clean, &GapMatrix::from_features(&rows)?)?,
            })
        })
        .collect()
}

/// Spearman correlation of each indicator with the severity index.
pub fn ood_monotonicity(rows: &[SeverityRow]) -> [(&'static str, f64); 4] {
    let sev: Vec<f64> = rows.iter().map(|r| r.severity as f64).collect();
    let col = |f: fn(&OodIndicators) -> f64| spearman(&sev, &rows.iter().map(|r| f(&r.indicators)).collect::<Vec<_>>());
    [
        ("logdet", col(|i| i.logdet)),
        ("trace", col(|i| i.trace)),
        ("effective_rank", col(|i| i.effective_rank)),
        ("mmd", col(|i| i.mmd)),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationOutcome {
    pub reference_index: usize,
    pub ecr: Vec<f64>,
    pub images: usize,
    pub curves: Vec<AblationCurve>,
}

impl AblationOutcome {
    pub fn curve(&self, ordering: &str) -> &AblationCurve {
        self.curves.iter().find(|c| c.ordering == ordering).expect("known ordering")
    }
}

/// ECR of each deepest channel on the reference image's foreground, then GAP
/// ablation in ECR order over every target-class test image.
pub fn ecr_ablation(p: &Pipeline) -> Result<AblationOutcome> {
    let target = p.config.analysis.target_class;
    let (idx, reference) = p.reference(target)?;
    let trace = p.encoder.forward(&reference.image)?;
    let basis = SpatialBasis::compute(&p.encoder, &trace, &p.params, trace.depth() - 1)?;
    let scores = ecr(&basis.vectors(), &reference.foreground)?;
    let features: Vec<Vec<f64>> = p
        .test
        .iter()
        .zip(&p.test_features)
        .filter(|(s, _)| s.label == target)
        .map(|(_, f)| f.clone())
        .collect();
    let curves = ablation_study(
        &p.probe,
        &features,
        target,
        &scores,
        &default_fractions(),
        p.config.analysis.random_orderings,
        derive_seed(p.config.seed, "ablate"),
    );
    Ok(AblationOutcome {
        reference_index: idx,
        ecr: scores,
        images: features.len(),
        curves,
    })
}

pub fn ablate(cfg: &RunConfig) -> Result<Report> {
    let dir = prepare_out(cfg)?;
    let mut timing = Timing::default();
    let p = timing.time("load_or_train", || Pipeline::load_or_build(cfg))?;
    let mut report = Report::new("ablate", cfg);

    let ab = timing.time("ecr_ablation", || ecr_ablation(&p))?;
    let mut t = Table::new(&[
        ("fraction", "fraction of channels"),
        ("descending_mean", "probability"),
        ("ascending_mean", "probability"),
        ("random_mean", "probability"),
        ("random_std", "probability"),
    ]);
    let (d, a, r) = (ab.curve("descending"), ab.curve("ascending"), ab.curve("random"));
    for (j, &f) in d.fractions.iter().enumerate() {
        t.push(vec![
            f.into(),
            d.mean_probability[j].into(),
            a.mean_probability[j].into(),
            r.mean_probability[j].into(),
            r.std_probability[j].into(),
        ]);
    }
    report.tables.insert("ablation".into(), t);
    let mut e = Table::new(&[("channel", "index"), ("ecr", "fraction")]);
    for (c, &s) in ab.ecr.iter().enumerate() {
        e.push(vec![c.into(), s.into()]);
    }
    report.tables.insert("ecr".into(), e);
    report.summary.insert("reference_index".into(), ab.reference_index.into());
    report.summary.insert("ablation_images".into(), ab.images.into());

    let rows = timing.time("ood_sweep", || ood_sweep(&p))?;
    let mut s = Table::new(&[
        ("severity", "index"),
        ("noise_level", "fraction of image std"),
        ("logdet", "nats"),
        ("trace", "feature variance"),
        ("effective_rank", "dimensions"),
        ("mmd", "squared kernel distance"),
    ]);
    for row in &rows {
        let i = &row.indicators;
        s.push(vec![
            row.severity.into(),
            row.level.into(),
            i.logdet.into(),
            i.trace.into(),
            i.effective_rank.into(),
            i.mmd.into(),
        ]);
    }
    report.tables.insert("severity".into(), s);
    let mono: serde_json::Map<String, Value> =
        ood_monotonicity(&rows).iter().map(|(k, v)| (k.to_string(), (*v).into())).collect();
    report.summary.insert("severity_spearman".into(), mono.into());

    let (_, reference) = p.reference(cfg.analysis.target_class)?;
    let trace = p.encoder.forward(&reference.image)?;
    let basis = SpatialBasis::compute(&p.encoder, &trace, &p.params, trace.depth() - 1)?;
    let rec = class_reconstruction_from_basis(
        &basis,
        &p.probe.class_weights(cfg.analysis.target_class),
        cfg.analysis.target_class,
    )?;
    let order = saliency_order(&saliency_map(&rec.full)?);
    let auc = timing.time("insertion_deletion", || {
        insertion_deletion_auc(&p.encoder, &p.probe, &reference.image, &order, cfg.analysis.target_class)
    })?;
    report.summary.insert("insertion_auc".into(), auc.insertion_auc.into());
    report.summary.insert("deletion_auc".into(), auc.deletion_auc.into());

    finish(&report, &timing, dir)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionStudy {
    pub images: usize,
    /// Images whose nested field check failed at the deepest level.
    pub skipped: usize,
    pub seeds: usize,
    pub violations: usize,
    pub lac_unchanged: bool,
    pub test_accuracy: f64,
}

fn readouts(head: &AttentionHead, tokens: usize) -> Vec<Readout> {
    let mut out = Vec::new();
    for layer in 0..head.blocks.len() {
        out.push(Readout::Layer { layer });
        out.extend((0..tokens).map(|token| Readout::Token { layer, token }));
    }
    out.extend((0..head.classes()).map(|class| Readout::Logit { class }));
    out
}

/// Containment of every layer, token and logit rendering on the first test images,
/// optionally writing the images; LAC bytes are compared before and after.
pub fn attention_study(p: &Pipeline, head: &AttentionHead, render: Option<&Path>) -> Result<AttentionStudy> {
    let before = p.params.to_bytes();
    let n = p.config.attention.images.min(p.test.len());
    let mut study = AttentionStudy {
        images: n,
        skipped: 0,
        seeds: 0,
        violations: 0,
        lac_unchanged: false,
        test_accuracy: attention_accuracy(p, head)?,
    };
    for (i, s) in p.test.iter().take(n).enumerate() {
        let trace = p.encoder.forward(&s.image)?;
        let l = trace.depth() - 1;
        let fields = EffectiveFields::compute(&p.encoder, &trace)?;
        let tokens = trace.h(l).shape()[1] * trace.h(l).shape()[2];
        let kinds = readouts(head, tokens);
        let rendered = par::map_slice(&kinds, |&k| -> Result<Tensor> {
            Ok(attend_visualize(&p.encoder, &trace, &p.params, &readout_seed(head, &trace, k)?)?)
        });
        let rendered: Vec<Tensor> = rendered.into_iter().collect::<Result<_>>()?;
        if fields.nested_check(l).holds {
            let union = fields.active_union(l);
            for v in &rendered {
                study.violations += containment_violations(v, &union)?.count();
                study.seeds += 1;
            }
        } else {
            study.skipped += 1;
        }
        if let Some(dir) = render {
            let mut images = Images::new(dir);
            let mut tiles = vec![Vec::new(); head.blocks.len()];
            for (k, v) in kinds.iter().zip(&rendered) {
                match *k {
                    Readout::Layer { layer } => {
                        images.write(&format!("attend_img{i}_layer{layer}"), v)?;
                    }
                    Readout::Token { layer, .. } => tiles[layer].push(v.clone()),
                    Readout::Logit { class } => {
                        images.write(&format!("attend_img{i}_logit{class}"), v)?;
                    }
                }
            }
            let cols = trace.h(l).shape()[2];
            for (layer, t) in tiles.iter().enumerate() {
                images.write(&format!("attend_img{i}_tokens{layer}"), &io::tile(t, cols)?)?;
            }
            images.norms.write_csv(&dir.join(format!("attend_img{i}_normalization.csv")))?;
        }
    }
    study.lac_unchanged = p.params.to_bytes() == before;
    Ok(study)
}

fn attention_accuracy(p: &Pipeline, head: &AttentionHead) -> Result<f64> {
    let correct = par::map_slice(&p.test, |s| -> Result<bool> {
        let trace = p.encoder.forward(&s.image)?;
        let tokens = lacvis_core::attention::tokens_from_features(trace.deepest())?;
        let fwd = head.forward(&tokens)?;
        let z = head.logits(&fwd, &tokens);
        let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
        Ok(best == s.label)
    });
    let hits = correct.into_iter().collect::<Result<Vec<_>>>()?.iter().filter(|&&b| b).count();
    Ok(hits as f64 / p.test.len().max(1) as f64)
}

pub fn attend(cfg: &RunConfig) -> Result<Report> {
    let dir = prepare_out(cfg)?;
    let mut timing = Timing::default();
    let p = timing.time("load_or_train", || Pipeline::load_or_build(cfg))?;
    let stored = Container::load(&Pipeline::model_path(cfg))
        .ok()
        .and_then(|c| c.section("attention").ok().map(attention_from_section));
    let head = match stored {
        Some(h) => h?,
        None => {
            let (h, _) = timing.time("train_attention", || p.train_attention())?;
            p.save(dir, Some(&h))?;
            h
        }
    };
    let study = timing.time("attention_study", || attention_study(&p, &head, Some(dir)))?;
    let mut report = Report::new("attend", cfg);
    report.summary.insert("attention".into(), serde_json::to_value(&study)?);
    report.checks.push(crate::report::CheckOutcome {
        name: "attention.containment".into(),
        description: "renderings inside the dilated active field union (pixel count)".into(),
        observed: study.violations as f64,
        tolerance: 0.0,
        cases: study.seeds,
        passed: study.violations == 0,
        details: vec![format!("{} images skipped by the nested check", study.skipped)],
    });
    report.checks.push(crate::report::CheckOutcome {
        name: "attention.lac_unchanged".into(),
        description: "LAC parameter bytes unchanged".into(),
        observed: if study.lac_unchanged { 0.0 } else { 1.0 },
        tolerance: 0.0,
        cases: 1,
        passed: study.lac_unchanged,
        details: Vec::new(),
    });
    finish(&report, &timing, dir)?;
    Ok(report)
}
