//! Exact-identity and oracle checks. Each check reports its worst observed
//! deviation against a fixed tolerance; the suite passes when every check does.

use anyhow::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use lacvis_core::attention::{
    attend_visualize, readout_gradient, readout_seed, tokens_from_features, AttentionConfig, AttentionHead, Readout,
    ReadoutSeed,
};
use lacvis_core::covvol::{admissible_volume, brute_force_select, greedy_select, subset_logdet};
use lacvis_core::encoder::{effective_field, EffectiveFields, Encoder, ForwardTrace, Level, PixelMask};
use lacvis_core::interference::{background_coefficient, ecr, gram_analysis, insertion_deletion_auc, saliency_map, saliency_order};
use lacvis_core::io::{self, Container};
use lacvis_core::lac::{
    cascade_from_seed, cascade_identity, cascade_invert, containment_violations, fv_decompose, groupnorm_strip,
    path_moment_check, synthesize, LacParams, SpatialBasis,
};
use lacvis_core::math::{
    angle_collapse_bound, angle_collapse_sample, conv2d, conv2d_adjoint, conv2d_adjoint_scatter, orthonormal_complement,
    random_orthogonal, relative_error, sym_eigen, Matrix, SymMatrix, Tensor,
};
use lacvis_core::par::{self, Exec};
use lacvis_core::rng;
use lacvis_core::training::{lac_gradients_for, min_abs_residual, objective_loss, LinearProbe};

use crate::config::RunConfig;
use crate::pipeline::{encoder_for, generator_for};
use crate::report::{CheckOutcome, Report};

/// Deliberate defects for mutation testing of the suite itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negate the kernel inside the convolution adjoint.
    AdjointKernelSign,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub enc: Encoder,
    pub images: Vec<Tensor>,
    pub traces: Vec<ForwardTrace>,
    /// Arbitrary (untrained) LAC parameters at the configured ε.
    pub params: LacParams,
    pub fault: Fault,
}

struct Measured {
    observed: f64,
    cases: usize,
    details: Vec<String>,
}

impl Measured {
    fn new(observed: f64, cases: usize) -> Self {
        Self {
            observed,
            cases,
            details: Vec::new(),
        }
    }
}

struct Check {
    name: &'static str,
    description: &'static str,
    tolerance: f64,
    run: fn(&Ctx) -> Result<Measured>,
}

fn stream(ctx: &Ctx, label: &str) -> ChaCha8Rng {
    rng::stream(ctx.cfg.seed, &format!("verify.{label}"))
}

fn normal_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    Tensor::random_normal(&[n], 1.0, r).into_data()
}

/// `γ` of either sign bounded away from zero, `β` of order one.
pub fn random_params(enc: &Encoder, epsilon: f64, r: &mut ChaCha8Rng) -> LacParams {
    let mut p = LacParams::init(enc, epsilon);
    for s in p.sites() {
        let sp = p.site_mut(s);
        for g in sp.gamma.iter_mut() {
            let mag = r.random_range(0.5..1.5);
            *g = if r.random::<f64>() < 0.2 { -mag } else { mag };
        }
        for b in sp.beta.iter_mut() {
            *b = r.random_range(-0.5..0.5);
        }
    }
    p
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

fn adjoint(ctx: &Ctx, g: &Tensor, layer: &lacvis_core::math::ConvLayer, shape: (usize, usize, usize)) -> Result<Tensor> {
    Ok(match ctx.fault {
        Fault::None => conv2d_adjoint(g, layer, shape)?,
        Fault::AdjointKernelSign => conv2d_adjoint(g, &layer.negated(), shape)?,
    })
}

fn random_conv_case(ctx: &Ctx, r: &mut ChaCha8Rng) -> Result<(usize, Tensor, Tensor)> {
    let layers = ctx.enc.layers();
    let li = r.random_range(0..layers.len());
    let layer = layers[li];
    let (h, w) = (r.random_range(5..=17), r.random_range(5..=17));
    let x = Tensor::random_normal(&[layer.c_in(), h, w], 1.0, r);
    let (oh, ow) = layer.output_hw(h, w)?;
    let y = Tensor::random_normal(&[layer.c_out(), oh, ow], 1.0, r);
    Ok((li, x, y))
}

fn adjoint_dot_product(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "adjoint");
    let mut worst: f64 = 0.0;
    let n = ctx.cfg.verify.adjoint_cases;
    for _ in 0..n {
        let (li, x, y) = random_conv_case(ctx, &mut r)?;
        let layer = ctx.enc.layers()[li];
        let lhs = conv2d(&x, layer)?.dot(&y);
        let rhs = x.dot(&adjoint(ctx, &y, layer, x.dims3()?)?);
        worst = worst.max(rel(lhs, rhs));
    }
    Ok(Measured::new(worst, n))
}

fn adjoint_scatter(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "scatter");
    let mut worst: f64 = 0.0;
    let n = ctx.cfg.verify.adjoint_cases;
    for _ in 0..n {
        let (li, x, y) = random_conv_case(ctx, &mut r)?;
        let layer = ctx.enc.layers()[li];
        let a = conv2d_adjoint(&y, layer, x.dims3()?)?;
        let b = conv2d_adjoint_scatter(&y, layer, x.dims3()?)?;
        worst = worst.max(relative_error(a.data(), b.data()));
    }
    Ok(Measured::new(worst, n))
}

fn stage_pairing(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "pairing");
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for tr in ctx.traces.iter().take(5) {
        let dx = Tensor::random_normal(tr.input.shape(), 1.0, &mut r);
        let g = Tensor::random_normal(tr.h_stem.shape(), 1.0, &mut r);
        let lhs = ctx.enc.stem_jvp(tr, &dx)?.dot(&g);
        let rhs = dx.dot(&ctx.enc.stem_pullback(tr, &g)?);
        worst = worst.max(rel(lhs, rhs));
        cases += 1;
        for l in 0..tr.depth() {
            let input = if l == 0 { &tr.h_stem } else { tr.h(l - 1) };
            let dx = Tensor::random_normal(input.shape(), 1.0, &mut r);
            let g = Tensor::random_normal(tr.h(l).shape(), 1.0, &mut r);
            let lhs = ctx.enc.stage_jvp(tr, l, &dx)?.dot(&g);
            let rhs = dx.dot(&ctx.enc.stage_pullback(tr, l, &g)?);
            worst = worst.max(rel(lhs, rhs));
            cases += 1;
        }
    }
    Ok(Measured::new(worst, cases))
}

fn same_pattern(a: &ForwardTrace, b: &ForwardTrace) -> bool {
    a.mask_stem == b.mask_stem
        && a.stages.iter().zip(&b.stages).all(|(s, t)| {
            s.mask == t.mask && s.mid.as_ref().map(|m| &m.1) == t.mid.as_ref().map(|m| &m.1)
        })
}

/// Pick an `(l, c)` whose channel is active on this trace.
fn active_channel(tr: &ForwardTrace, r: &mut ChaCha8Rng) -> (usize, usize) {
    loop {
        let l = r.random_range(0..tr.depth());
        let c = r.random_range(0..tr.h(l).shape()[0]);
        if tr.h(l).channel(c).iter().any(|&v| v > 0.0) {
            return (l, c);
        }
    }
}

fn phi(enc: &Encoder, x: &Tensor, l: usize, c: usize) -> Result<(f64, ForwardTrace)> {
    let tr = enc.forward(x)?;
    let v = 0.5 * tr.h(l).channel(c).iter().map(|a| a * a).sum::<f64>();
    Ok((v, tr))
}

/// Directional central differences along random directions that keep every ReLU
/// pattern fixed, where `½‖h_{l,c}‖²` is exactly quadratic.
fn vjp_finite_difference(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "vjp");
    let n = ctx.cfg.verify.vjp_cases;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for case in 0..n {
        let x = &ctx.images[case % ctx.images.len()];
        let tr = &ctx.traces[case % ctx.traces.len()];
        let (l, c) = active_channel(tr, &mut r);
        let vjp = ctx.enc.raw_vjp(tr, l, c)?;
        let (mut fd, mut an) = (Vec::new(), Vec::new());
        while fd.len() < 16 {
            let u = Tensor::random_normal(x.shape(), 1.0, &mut r);
            let mut xp = x.clone();
            xp.axpy(h, &u);
            let mut xm = x.clone();
            xm.axpy(-h, &u);
            let (fp, tp) = phi(&ctx.enc, &xp, l, c)?;
            let (fm, tm) = phi(&ctx.enc, &xm, l, c)?;
            if !(same_pattern(&tp, tr) && same_pattern(&tm, tr)) {
                skipped += 1;
                continue;
            }
            fd.push((fp - fm) / (2.0 * h));
            an.push(vjp.dot(&u));
        }
        worst = worst.max(relative_error(&fd, &an));
    }
    let mut m = Measured::new(worst, n);
    m.details.push(format!("{skipped} directions crossed a ReLU boundary and were redrawn"));
    Ok(m)
}

fn vjp_support(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "support");
    let n = ctx.cfg.verify.support_cases;
    let mut violations = 0usize;
    let mut m = Measured::new(0.0, n);
    for case in 0..n {
        let tr = if case % 2 == 0 {
            ctx.traces[case / 2 % ctx.traces.len()].clone()
        } else {
            let x = Tensor::random_normal(ctx.images[0].shape(), 1.0, &mut r);
            ctx.enc.forward(&x)?
        };
        let (l, c) = active_channel(&tr, &mut r);
        let ef = effective_field(&ctx.enc, &tr, l, c)?;
        let vjp = ctx.enc.raw_vjp(&tr, l, c)?;
        let outside = PixelMask::support(&vjp, 1e-12).minus(&ef);
        if !outside.is_empty() {
            violations += outside.count();
            m.details.push(format!("case {case} (l={l}, c={c}): {} pixels", outside.count()));
        }
    }
    m.observed = violations as f64;
    Ok(m)
}

fn mask_coords(m: &PixelMask) -> String {
    let mut out = Vec::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                out.push(format!("({y},{x})"));
            }
        }
    }
    out.join(" ")
}

fn fields(ctx: &Ctx) -> Result<Vec<EffectiveFields>> {
    par::map_slice(&ctx.traces, |tr| EffectiveFields::compute(&ctx.enc, tr))
        .into_iter()
        .map(|r| r.map_err(Into::into))
        .collect()
}

/// Number of images whose nested check fails; the tolerance is the allowed count.
fn nested_fields(ctx: &Ctx) -> Result<Measured> {
    let all = fields(ctx)?;
    let mut m = Measured::new(0.0, all.len());
    for (i, f) in all.iter().enumerate() {
        for l in 0..ctx.enc.depth() {
            let rep = f.nested_check(l);
            if !rep.holds {
                m.observed += 1.0;
                m.details.push(format!(
                    "image {i} level {l}: {} violating fields, pixels {}",
                    rep.violations.len(),
                    mask_coords(&rep.violating_pixels)
                ));
                break;
            }
        }
    }
    Ok(m)
}

fn containment(ctx: &Ctx) -> Result<Measured> {
    let all = fields(ctx)?;
    let mut m = Measured::new(0.0, 0);
    for (i, (f, tr)) in all.iter().zip(&ctx.traces).enumerate() {
        if !(0..ctx.enc.depth()).all(|l| f.nested_check(l).holds) {
            m.details.push(format!("image {i} skipped: nested check fails"));
            continue;
        }
        for l in 0..ctx.enc.depth() {
            let x_hat = synthesize(&ctx.enc, tr, &ctx.params, l)?.image;
            let bad = containment_violations(&x_hat, &f.active_union(l))?;
            m.cases += 1;
            if !bad.is_empty() {
                m.observed += bad.count() as f64;
                m.details.push(format!("image {i} level {l}: {}", mask_coords(&bad)));
            }
        }
    }
    Ok(m)
}

fn sparse_dense(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "sparse");
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for tr in ctx.traces.iter().take(3) {
        for l in 0..tr.depth() {
            let seed = Tensor::random_normal(tr.h(l).shape(), 1.0, &mut r);
            let a = ctx.enc.pullback_to_pixels(tr, l, &seed)?;
            let b = ctx.enc.sparse_pullback_to_pixels(tr, Level::Stage(l), &seed)?;
            worst = worst.max(relative_error(a.data(), b.data()));
            cases += 1;
        }
    }
    Ok(Measured::new(worst, cases))
}

struct StripCase {
    v: Tensor,
    gamma: f64,
    beta: f64,
    out: Tensor,
}

fn strip_cases(ctx: &Ctx) -> Result<Vec<StripCase>> {
    let mut r = stream(ctx, "strip");
    (0..ctx.cfg.verify.strip_vectors)
        .map(|_| {
            let n = r.random_range(16..=256);
            let v = Tensor::new(vec![n], normal_vec(n, &mut r).iter().map(|x| 3.0 * x + 1.0).collect())?;
            let mag = r.random_range(0.1..3.0);
            let gamma = if r.random::<bool>() { mag } else { -mag };
            let beta = r.random_range(-2.0..2.0);
            let out = groupnorm_strip(&v, gamma, beta, 0.0)?;
            Ok(StripCase { v, gamma, beta, out })
        })
        .collect()
}

fn strip_norm(ctx: &Ctx) -> Result<Measured> {
    let cases = strip_cases(ctx)?;
    let worst = cases.iter().fold(0.0f64, |w, c| {
        let n = c.v.len() as f64;
        let d = c.out.map(|x| x - c.beta).norm();
        w.max(rel(d, c.gamma.abs() * n.sqrt()))
    });
    Ok(Measured::new(worst, cases.len()))
}

fn strip_mean(ctx: &Ctx) -> Result<Measured> {
    let cases = strip_cases(ctx)?;
    let worst = cases.iter().fold(0.0f64, |w, c| {
        w.max((lacvis_core::math::mean(c.out.data()) - c.beta).abs())
    });
    Ok(Measured::new(worst, cases.len()))
}

fn centred(t: &Tensor) -> Vec<f64> {
    let m = lacvis_core::math::mean(t.data());
    t.data().iter().map(|x| x - m).collect()
}

fn strip_cosine(ctx: &Ctx) -> Result<Measured> {
    let cases = strip_cases(ctx)?;
    let worst = cases.iter().fold(0.0f64, |w, c| {
        let (a, b) = (centred(&c.out), centred(&c.v));
        let cos = lacvis_core::math::dot(&a, &b)
            / (lacvis_core::math::dot(&a, &a).sqrt() * lacvis_core::math::dot(&b, &b).sqrt());
        w.max((cos - c.gamma.signum()).abs())
    });
    Ok(Measured::new(worst, cases.len()))
}

/// Count of wrong outcomes on constant inputs.
fn strip_degenerate(_ctx: &Ctx) -> Result<Measured> {
    let v = Tensor::full(&[64], 2.5);
    let mut bad = 0.0;
    if groupnorm_strip(&v, 1.3, 0.4, 0.0).is_ok() {
        bad += 1.0;
    }
    match groupnorm_strip(&v, 1.3, 0.4, 1e-8) {
        Ok(o) if o.data().iter().all(|&x| x == 0.4) => {}
        _ => bad += 1.0,
    }
    Ok(Measured::new(bad, 2))
}

fn fv_residual(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "fv");
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for tr in ctx.traces.iter().take(4) {
        let mut p = random_params(&ctx.enc, ctx.cfg.lac.epsilon, &mut r);
        for b in p.stem.beta.iter_mut() {
            *b = r.random_range(-3.0..3.0);
        }
        for l in 0..tr.depth() {
            let d = fv_decompose(&ctx.enc, tr, &p, l)?;
            for (pl, bound) in d.bound.iter().enumerate() {
                let plane = d.residual.channel(pl);
                let inf = plane.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let spread = plane.iter().fold(0.0f64, |m, x| m.max((x - plane[0]).abs()));
                worst = worst.max((inf - bound).abs()).max(spread);
            }
            cases += 1;
        }
    }
    Ok(Measured::new(worst, cases))
}

fn exact_params(ctx: &Ctx) -> LacParams {
    let mut p = ctx.params.clone();
    p.epsilon = 0.0;
    p
}

fn moments(ctx: &Ctx) -> Result<Measured> {
    let p = exact_params(ctx);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut m = Measured::new(0.0, 0);
    for tr in ctx.traces.iter().take(2) {
        for site in p.sites() {
            let rep = path_moment_check(&ctx.enc, tr, &p, site)?;
            worst = worst.max(rep.max_mean_dev).max(rep.max_moment_dev);
            cases += rep.entries.iter().filter(|e| !e.degenerate).count();
            let degenerate = rep.entries.iter().filter(|e| e.degenerate).count();
            if degenerate > 0 {
                m.details.push(format!("{site}: {degenerate} degenerate groups excluded"));
            }
        }
    }
    m.observed = worst;
    m.cases = cases;
    Ok(m)
}

/// Count of sources whose strip count differs from `l + 2`.
fn cascade_depth(ctx: &Ctx) -> Result<Measured> {
    let tr = &ctx.traces[0];
    let rep = path_moment_check(&ctx.enc, tr, &ctx.params, lacvis_core::lac::Site::Stem)?;
    let mut m = Measured::new(0.0, rep.depth_by_source.len());
    for (l, d) in rep.depth_by_source {
        if d != l + 2 {
            m.observed += 1.0;
            m.details.push(format!("source {l}: {d} strips"));
        }
    }
    Ok(m)
}

fn norm_identity(ctx: &Ctx) -> Result<Measured> {
    let p = exact_params(ctx);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for tr in ctx.traces.iter().take(3) {
        for l in 0..tr.depth() {
            let basis = SpatialBasis::compute(&ctx.enc, tr, &p, l)?;
            for e in basis.entries.iter().filter(|e| e.active) {
                for pl in 0..e.v.shape()[0] {
                    if e.rho[pl] == 0.0 {
                        continue;
                    }
                    let plane = Tensor::new(vec![e.v.channel(pl).len()], e.v.channel(pl).to_vec())?;
                    let n = plane.len() as f64;
                    let got = lacvis_core::math::dot(&centred(&plane), &centred(&plane)).sqrt();
                    worst = worst.max(rel(got, p.stem.gamma[pl].abs() * n.sqrt()));
                    cases += 1;
                }
            }
        }
    }
    Ok(Measured::new(worst, cases))
}

fn identity_strips(ctx: &Ctx) -> Result<Measured> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for tr in ctx.traces.iter().take(2) {
        for l in 0..tr.depth() {
            for c in [0, tr.h(l).shape()[0] - 1] {
                let seed = ctx.enc.channel_seed(tr, l, c)?;
                let a = cascade_identity(&ctx.enc, tr, l, &seed)?;
                let b = ctx.enc.raw_vjp(tr, l, c)?;
                worst = worst.max(relative_error(a.data(), b.data()));
                cases += 1;
            }
        }
    }
    Ok(Measured::new(worst, cases))
}

fn zero_seed(ctx: &Ctx) -> Result<Measured> {
    let tr = &ctx.traces[0];
    let mut worst: f64 = 0.0;
    for l in 0..tr.depth() {
        let e = cascade_from_seed(&ctx.enc, tr, &ctx.params, l, &Tensor::zeros(tr.h(l).shape()), false)?;
        if e.active {
            worst = f64::INFINITY;
        }
        for p in 0..e.v.shape()[0] {
            let b = ctx.params.stem.beta[p];
            worst = worst.max(e.v.channel(p).iter().fold(0.0f64, |m, x| m.max((x - b).abs())));
        }
    }
    Ok(Measured::new(worst, tr.depth()))
}

fn lac_gradient(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "lacgrad");
    let objective = ctx.cfg.train.objective;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut m = Measured::new(0.0, 0);
    for (x, tr) in ctx.images.iter().zip(&ctx.traces).take(ctx.cfg.verify.gradient_images) {
        let mut p = LacParams::init(&ctx.enc, ctx.cfg.lac.epsilon);
        let flat: Vec<f64> = p
            .to_flat()
            .iter()
            .map(|v| v + r.random_range(-0.2..0.2))
            .collect();
        p.set_flat(&flat)?;
        let an = lac_gradients_for(&ctx.enc, tr, &p, x, objective)?.grad;
        let fd: Vec<f64> = par::map_range(flat.len(), |i| -> Result<f64> {
            let mut q = p.clone();
            let mut f = flat.clone();
            f[i] += h;
            q.set_flat(&f)?;
            let lp = objective_loss(&ctx.enc, tr, &q, x, objective)?;
            f[i] -= 2.0 * h;
            q.set_flat(&f)?;
            let lm = objective_loss(&ctx.enc, tr, &q, x, objective)?;
            Ok((lp - lm) / (2.0 * h))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        worst = worst.max(relative_error(&fd, &an));
        m.cases += flat.len();
        m.details
            .push(format!("min |X - X̂| = {:.3e}", min_abs_residual(&ctx.enc, tr, &p, x)?));
    }
    m.observed = worst;
    Ok(m)
}

fn simplex(ctx: &Ctx) -> Result<Measured> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for tr in &ctx.traces {
        for l in 0..tr.depth() {
            let e = lacvis_core::encoder::simplex_measure(tr, l)?;
            worst = worst.max((e.iter().sum::<f64>() - 1.0).abs());
            if e.iter().any(|&v| v < 0.0) {
                worst = f64::INFINITY;
            }
            cases += 1;
        }
    }
    Ok(Measured::new(worst, cases))
}

/// 1 when sequential and parallel synthesis differ in any bit.
fn exec_modes(ctx: &Ctx) -> Result<Measured> {
    let tr = &ctx.traces[0];
    let l = tr.depth() - 1;
    let a = par::with_exec(Exec::Sequential, || synthesize(&ctx.enc, tr, &ctx.params, l))?;
    let b = par::with_exec(Exec::Parallel, || synthesize(&ctx.enc, tr, &ctx.params, l))?;
    let same = a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(Measured::new(if same { 0.0 } else { 1.0 }, 1))
}

fn deep_basis(ctx: &Ctx, i: usize) -> Result<SpatialBasis> {
    let tr = &ctx.traces[i];
    Ok(SpatialBasis::compute(&ctx.enc, tr, &ctx.params, tr.depth() - 1)?)
}

fn gram_psd(ctx: &Ctx) -> Result<Measured> {
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        let basis = deep_basis(ctx, i)?;
        let rep = gram_analysis(&basis.vectors())?;
        let dense = rep.gram.to_dense();
        let asym = (0..dense.rows())
            .flat_map(|a| (0..dense.cols()).map(move |b| (a, b)))
            .fold(0.0f64, |m, (a, b)| m.max((dense.get(a, b) - dense.get(b, a)).abs()));
        let min_eig = rep.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.max(asym).max((-min_eig).max(0.0));
    }
    Ok(Measured::new(worst, 2))
}

fn residual_orthogonality(ctx: &Ctx) -> Result<Measured> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for i in 0..2 {
        let rep = gram_analysis(&deep_basis(ctx, i)?.vectors())?;
        for d in &rep.residuals {
            worst = worst.max(d.dot(&rep.background).abs());
            cases += 1;
        }
    }
    Ok(Measured::new(worst, cases))
}

fn ecr_oracle(v: &Tensor, m: &PixelMask) -> f64 {
    let (c, h, w) = v.dims3().expect("rank 3");
    let (mut inside, mut total) = (0.0, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let e = v.data()[ch * h * w + y * w + x].powi(2);
                total += e;
                if m.get(y, x) {
                    inside += e;
                }
            }
        }
    }
    inside / total
}

fn ecr_properties(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "ecr");
    let basis = deep_basis(ctx, 0)?;
    let vecs = basis.vectors();
    let (_, h, w) = vecs[0].dims3()?;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..10 {
        let draws: Vec<(bool, bool)> = (0..h * w).map(|_| (r.random::<f64>() < 0.2, r.random::<f64>() < 0.3)).collect();
        let small = PixelMask::from_fn(h, w, |y, x| draws[y * w + x].0);
        let mut big = small.clone();
        big.union_with(&PixelMask::from_fn(h, w, |y, x| draws[y * w + x].1));
        if small.is_empty() {
            continue;
        }
        let a = ecr(&vecs, &small)?;
        let b = ecr(&vecs, &big)?;
        for (i, (&sa, &sb)) in a.iter().zip(&b).enumerate() {
            let out_of_range = !(0.0..=1.0).contains(&sa) || !(0.0..=1.0).contains(&sb);
            let shrink = (sa - sb).max(0.0);
            worst = worst
                .max(if out_of_range { f64::INFINITY } else { 0.0 })
                .max(shrink)
                .max((sa - ecr_oracle(vecs[i], &small)).abs());
            cases += 1;
        }
    }
    Ok(Measured::new(worst, cases))
}

fn random_probe(ctx: &Ctx) -> LinearProbe {
    let mut r = stream(ctx, "probe");
    let c = *ctx.cfg.encoder.widths.last().expect("nonempty");
    let k = ctx.cfg.scenes.num_classes;
    LinearProbe {
        weights: Matrix::random_normal(k, c, &mut r),
        bias: normal_vec(k, &mut r),
        train_accuracy: 0.0,
    }
}

fn auc_endpoints(ctx: &Ctx) -> Result<Measured> {
    let probe = random_probe(ctx);
    let mut worst: f64 = 0.0;
    for x in ctx.images.iter().take(2) {
        let order = saliency_order(&saliency_map(x)?);
        let class = 1 % probe.classes();
        let id = insertion_deletion_auc(&ctx.enc, &probe, x, &order, class)?;
        let full = probe.probabilities(&ctx.enc.forward(x)?.gap_features())[class];
        let zero = probe.probabilities(&ctx.enc.forward(&Tensor::zeros(x.shape()))?.gap_features())[class];
        let (ins, del) = (*id.insertion.last().expect("nonempty"), *id.deletion.last().expect("nonempty"));
        worst = worst.max((ins - full).abs()).max((del - zero).abs());
    }
    Ok(Measured::new(worst, 2))
}

fn alpha_split(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "alpha");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..40);
        let (w, c) = (normal_vec(n, &mut r), normal_vec(n, &mut r));
        let b = background_coefficient(&w, &c);
        let direct: f64 = w.iter().zip(&c).map(|(a, b)| a * b).sum();
        worst = worst.max((b.alpha - direct).abs()).max((b.alpha - b.positive_part - b.negative_part).abs());
    }
    Ok(Measured::new(worst, 50))
}

fn random_spd(r: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let a = Matrix::random_normal(n, n, r);
    let g = a.gram();
    SymMatrix::from_fn(n, |i, j| g.get(i, j) + if i == j { 0.1 } else { 0.0 })
}

fn greedy_marginal(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "greedy");
    let mut worst: f64 = 0.0;
    let mut m = Measured::new(0.0, 0);
    for t in 0..ctx.cfg.verify.spd_matrices {
        let s = random_spd(&mut r, 10);
        let sel = greedy_select(&s, 10)?;
        let mut chosen: Vec<usize> = Vec::new();
        for (step, &pick) in sel.indices.iter().enumerate() {
            let base = subset_logdet(&s, &chosen);
            let gain = |j: usize| {
                let mut t = chosen.clone();
                t.push(j);
                subset_logdet(&s, &t) - base
            };
            let best = (0..10).filter(|j| !chosen.contains(j)).map(gain).fold(f64::NEG_INFINITY, f64::max);
            let dev = (gain(pick) - best).abs().max((sel.pivots[step].ln() - best).abs());
            if dev > 1e-10 {
                m.details.push(format!("matrix {t} step {step}: gap {dev:e}"));
            }
            worst = worst.max(dev);
            chosen.push(pick);
            m.cases += 1;
        }
    }
    m.observed = worst;
    Ok(m)
}

/// Reports `max(0, (1 − 1/e) − ratio)` so the check passes at zero.
fn greedy_vs_brute(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "brute");
    let bound = 1.0 - (-1.0f64).exp();
    let mut worst_ratio: f64 = 1.0;
    let mut cases = 0;
    for _ in 0..ctx.cfg.verify.spd_matrices {
        let s = random_spd(&mut r, 10);
        let lmin = sym_eigen(&s).values.iter().cloned().fold(f64::INFINITY, f64::min);
        let scaled = s.scale(1.0 / lmin);
        for k in 1..=4 {
            let g = greedy_select(&scaled, k)?;
            let b = brute_force_select(&scaled, k)?;
            if g.logdet > b.logdet + 1e-9 {
                worst_ratio = f64::NEG_INFINITY;
            }
            let ratio = if b.logdet > 0.0 { g.logdet / b.logdet } else { 1.0 };
            worst_ratio = worst_ratio.min(ratio);
            cases += 1;
        }
    }
    let mut m = Measured::new((bound - worst_ratio).max(0.0), cases);
    m.details.push(format!("worst greedy/brute logdet ratio {worst_ratio:.6}"));
    Ok(m)
}

fn angle_bound(ctx: &Ctx) -> Result<Measured> {
    let mut violations = 0usize;
    let mut m = Measured::new(0.0, 0);
    for (ki, &k) in [0.0, 0.5, 1.0, 2.0].iter().enumerate() {
        let mut r = rng::indexed(ctx.cfg.seed, "verify.bound", ki as u64);
        let b = angle_collapse_bound(k);
        let mut min_seen = f64::INFINITY;
        for draw in 0..ctx.cfg.verify.bound_samples {
            let dim = r.random_range(2..=64);
            let s = angle_collapse_sample(dim, k, draw, &mut r);
            min_seen = min_seen.min(s);
            if s < b - 1e-12 {
                violations += 1;
            }
            m.cases += 1;
        }
        m.details.push(format!("K={k}: bound {b:.6}, min sample {min_seen:.6}"));
    }
    m.observed = violations as f64;
    Ok(m)
}

fn volume_invariance(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "volume");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (d, s) = (r.random_range(6..20), r.random_range(2..5));
        let delta = Matrix::random_normal(d, s, &mut r);
        let c = normal_vec(s, &mut r);
        let v = admissible_volume(&delta, &c)?;
        let q = random_orthogonal(d, &mut r);
        let rotated = admissible_volume(&q.matmul(&delta), &c)?;
        let rescaled = admissible_volume(&delta, &c.iter().map(|x| -2.5 * x).collect::<Vec<_>>())?;
        // A different orthonormal basis of the same complement.
        let u = orthonormal_complement(&c)?;
        let rot = random_orthogonal(s - 1, &mut r);
        let g = delta.matmul(&u.matmul(&rot)).gram();
        let direct = sym_eigen(&g).values.iter().map(|x| x.max(0.0)).product::<f64>().sqrt();
        worst = worst.max(rel(v, rotated)).max(rel(v, rescaled)).max(rel(v, direct));
    }
    Ok(Measured::new(worst, 20))
}

fn volume_closed_form(ctx: &Ctx) -> Result<Measured> {
    let mut r = stream(ctx, "volume2");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = r.random_range(3..30);
        let (a, b) = (normal_vec(d, &mut r), normal_vec(d, &mut r));
        let c = normal_vec(2, &mut r);
        let got = admissible_volume(&Matrix::from_columns(&[a.clone(), b.clone()]), &c)?;
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| c[1] * x - c[0] * y).collect();
        let want = lacvis_core::math::dot(&diff, &diff).sqrt() / lacvis_core::math::dot(&c, &c).sqrt();
        worst = worst.max(rel(got, want));
    }
    Ok(Measured::new(worst, 20))
}

fn random_head(ctx: &Ctx) -> Result<AttentionHead> {
    let dim = *ctx.cfg.encoder.widths.last().expect("nonempty");
    let cfg = AttentionConfig {
        blocks: ctx.cfg.attention.head.blocks,
        ..AttentionConfig::default()
    };
    let mut h = AttentionHead::random(dim, ctx.cfg.scenes.num_classes, &cfg, &mut stream(ctx, "head"))?;
    h.classifier = Matrix::random_normal(h.classes(), dim, &mut stream(ctx, "head.classifier"));
    Ok(h)
}

fn readout_kinds(head: &AttentionHead, tokens: usize) -> Vec<Readout> {
    let last = head.blocks.len() - 1;
    vec![
        Readout::Layer { layer: 0 },
        Readout::Layer { layer: last },
        Readout::Token { layer: last, token: tokens / 2 },
        Readout::Logit { class: 0 },
    ]
}

fn attention_fd(ctx: &Ctx) -> Result<Measured> {
    let head = random_head(ctx)?;
    let mut r = stream(ctx, "attention.fd");
    let tokens = tokens_from_features(ctx.traces[0].deepest())?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let kinds = readout_kinds(&head, tokens.rows());
    for &kind in &kinds {
        let (_, g) = readout_gradient(&head, &tokens, kind)?;
        let (mut fd, mut an) = (Vec::new(), Vec::new());
        for _ in 0..5 {
            let t = r.random_range(0..tokens.rows());
            for j in 0..tokens.cols() {
                let mut a = tokens.clone();
                a.set(t, j, a.get(t, j) + h);
                let mut b = tokens.clone();
                b.set(t, j, b.get(t, j) - h);
                let fa = readout_gradient(&head, &a, kind)?.0;
                let fb = readout_gradient(&head, &b, kind)?.0;
                fd.push((fa - fb) / (2.0 * h));
                an.push(g.get(t, j));
            }
        }
        worst = worst.max(relative_error(&fd, &an));
    }
    Ok(Measured::new(worst, kinds.len()))
}

fn token_additivity(ctx: &Ctx) -> Result<Measured> {
    let head = random_head(ctx)?;
    let mut worst: f64 = 0.0;
    let tr = &ctx.traces[0];
    for layer in 0..head.blocks.len() {
        let whole = readout_seed(&head, tr, Readout::Layer { layer })?.seed;
        let mut sum = Tensor::zeros(whole.shape());
        let p = tr.deepest().shape()[1] * tr.deepest().shape()[2];
        for token in 0..p {
            sum.axpy(1.0, &readout_seed(&head, tr, Readout::Token { layer, token })?.seed);
        }
        worst = worst.max(sum.sub(&whole).max_abs() / whole.max_abs().max(1.0));
    }
    Ok(Measured::new(worst, head.blocks.len()))
}

fn attention_containment(ctx: &Ctx) -> Result<Measured> {
    let head = random_head(ctx)?;
    let mut m = Measured::new(0.0, 0);
    for (i, tr) in ctx.traces.iter().take(3).enumerate() {
        let f = EffectiveFields::compute(&ctx.enc, tr)?;
        let l = tr.depth() - 1;
        if !f.nested_check(l).holds {
            continue;
        }
        let union = f.active_union(l);
        for kind in readout_kinds(&head, 16) {
            let seed = readout_seed(&head, tr, kind)?;
            let v = attend_visualize(&ctx.enc, tr, &ctx.params, &seed)?;
            let bad = containment_violations(&v, &union)?;
            m.cases += 1;
            if !bad.is_empty() {
                m.observed += bad.count() as f64;
                m.details.push(format!("image {i} {kind}: {}", mask_coords(&bad)));
            }
        }
    }
    Ok(m)
}

fn seed_equivalence(ctx: &Ctx) -> Result<Measured> {
    let tr = &ctx.traces[0];
    let l = tr.depth() - 1;
    let mut worst: f64 = 0.0;
    for c in 0..tr.h(l).shape()[0] {
        let seed = ReadoutSeed {
            kind: Readout::Layer { layer: 0 },
            value: 0.0,
            seed: ctx.enc.channel_seed(tr, l, c)?,
        };
        let a = attend_visualize(&ctx.enc, tr, &ctx.params, &seed)?;
        let b = cascade_invert(&ctx.enc, tr, &ctx.params, l, c)?.v;
        worst = worst.max(a.sub(&b).max_abs());
    }
    Ok(Measured::new(worst, tr.h(l).shape()[0]))
}

/// 1 when the LAC parameter bytes change across attention training and rendering.
fn lac_bytes(ctx: &Ctx) -> Result<Measured> {
    let before = ctx.params.to_bytes();
    let cfg = AttentionConfig {
        steps: 3,
        ..ctx.cfg.attention.head.clone()
    };
    let feats: Vec<Tensor> = ctx.traces.iter().map(|t| t.deepest().clone()).collect();
    let labels: Vec<usize> = (0..feats.len()).map(|i| i % ctx.cfg.scenes.num_classes).collect();
    let (head, _) = lacvis_core::attention::train_attention(&feats, &labels, ctx.cfg.scenes.num_classes, &cfg, ctx.cfg.seed)?;
    let seed = readout_seed(&head, &ctx.traces[0], Readout::Layer { layer: 0 })?;
    attend_visualize(&ctx.enc, &ctx.traces[0], &ctx.params, &seed)?;
    Ok(Measured::new(if ctx.params.to_bytes() == before { 0.0 } else { 1.0 }, 1))
}

/// 1 when any artifact fails to round-trip bit for bit.
fn container_round_trip(ctx: &Ctx) -> Result<Measured> {
    let probe = random_probe(ctx);
    let mut c = Container::default();
    c.sections.push(io::encoder_section(&ctx.enc));
    c.sections.push(io::lac_section(&ctx.params));
    c.sections.push(io::probe_section(&probe));
    let back = Container::from_bytes(&c.to_bytes())?;
    let enc = io::encoder_from_section(back.section("encoder")?)?;
    let ok = enc == ctx.enc
        && io::lac_from_section(back.section("lac")?, &enc)?.to_bytes() == ctx.params.to_bytes()
        && io::probe_from_section(back.section("probe")?)? == probe
        && back.to_bytes() == c.to_bytes();
    Ok(Measured::new(if ok { 0.0 } else { 1.0 }, 3))
}

fn checks() -> Vec<Check> {
    macro_rules! check {
        ($name:expr, $tol:expr, $f:expr, $d:expr) => {
            Check {
                name: $name,
                description: $d,
                tolerance: $tol,
                run: $f,
            }
        };
    }
    vec![
        check!("adjoint.dot_product", 1e-10, adjoint_dot_product, "<Ax, y> = <x, A^T y> for random layers and shapes (relative)"),
        check!("adjoint.scatter_equals_gather", 1e-12, adjoint_scatter, "scatter-form adjoint equals zero-insert correlation (relative)"),
        check!("adjoint.stage_pairing", 1e-10, stage_pairing, "stage JVP and pullback are adjoint on recorded traces (relative)"),
        check!("vjp.finite_difference", 1e-5, vjp_finite_difference, "raw VJP against directional central differences of the channel energy (relative)"),
        check!("ef.vjp_support", 0.0, vjp_support, "raw VJP vanishes outside the effective field (pixel count)"),
        check!("ef.nested", 0.0, nested_fields, "images whose nested field check fails (count above the allowance)"),
        check!("ef.containment", 0.0, containment, "spatial-gradient support of every reconstruction inside the dilated active field union (pixel count)"),
        check!("ef.sparse_equals_dense", 1e-12, sparse_dense, "scatter pullback to pixels equals the dense pullback (relative)"),
        check!("strip.norm", 1e-12, strip_norm, "||GN(v) - beta|| = |gamma| sqrt(n) at epsilon 0 (relative)"),
        check!("strip.mean", 1e-12, strip_mean, "mean(GN(v)) = beta at epsilon 0 (absolute)"),
        check!("strip.cosine", 1e-12, strip_cosine, "centred cosine between GN(v) and v equals sign(gamma) (absolute)"),
        check!("strip.degenerate", 0.0, strip_degenerate, "constant groups rejected at epsilon 0 and mapped to beta otherwise (failures)"),
        check!("cascade.offset_residual", 1e-12, fv_residual, "reconstruction minus principal part is the constant plane sum(E) beta (absolute)"),
        check!("cascade.moments", 1e-12, moments, "standardised signal has mean 0 and second moment 1 at every site (absolute)"),
        check!("cascade.depth", 0.0, cascade_depth, "sources whose strip count differs from l + 2 (count)"),
        check!("cascade.norm_identity", 1e-10, norm_identity, "centred norm of each inversion plane equals |gamma_stem| sqrt(n) (relative)"),
        check!("cascade.identity_strips", 1e-12, identity_strips, "cascade with identity strips equals the raw VJP (relative)"),
        check!("cascade.zero_seed", 0.0, zero_seed, "zero seed gives inactive beta-constant planes (absolute)"),
        check!("lac.gradient", 1e-5, lac_gradient, "reverse-mode LAC gradient against central differences over every gamma and beta (relative)"),
        check!("synthesis.simplex", 1e-12, simplex, "simplex weights are nonnegative and sum to one (absolute)"),
        check!("exec.modes_agree", 0.0, exec_modes, "sequential and parallel synthesis agree bit for bit (mismatches)"),
        check!("gram.symmetric_psd", 1e-10, gram_psd, "Gram matrix symmetric with eigenvalues above -tol (absolute)"),
        check!("gram.residual_orthogonality", 1e-10, residual_orthogonality, "residuals orthogonal to the background direction (absolute)"),
        check!("ecr.properties", 1e-12, ecr_properties, "ECR in [0, 1], monotone in the region, equal to a loop-nest oracle (absolute)"),
        check!("auc.endpoints", 1e-12, auc_endpoints, "insertion ends at the full-image probability and deletion at the zero image (absolute)"),
        check!("interference.alpha_split", 1e-12, alpha_split, "alpha equals the weighted sum and its positive plus negative parts (absolute)"),
        check!("select.greedy_marginal", 1e-10, greedy_marginal, "greedy pivot equals the best marginal log-det gain at every step (absolute)"),
        check!("select.greedy_vs_brute", 0.0, greedy_vs_brute, "greedy/brute log-det ratio shortfall below 1 - 1/e on rescaled matrices"),
        check!("bound.angle_collapse", 0.0, angle_bound, "constrained samples below the direction-displacement bound (count)"),
        check!("volume.basis_invariance", 1e-9, volume_invariance, "volume invariant to pixel rotations, coefficient scaling and complement basis (relative)"),
        check!("volume.two_channel", 1e-10, volume_closed_form, "two-channel volume equals |c2 d1 - c1 d2| / |c| (relative)"),
        check!("attention.finite_difference", 1e-5, attention_fd, "readout gradients against central differences on five random tokens (relative)"),
        check!("attention.token_additivity", 1e-10, token_additivity, "per-token seeds sum to the layer seed (relative to max)"),
        check!("attention.containment", 0.0, attention_containment, "attention renderings inside the dilated active field union (pixel count)"),
        check!("attention.seed_equivalence", 1e-12, seed_equivalence, "channel seed through the attention path equals the channel inversion (absolute)"),
        check!("attention.lac_unchanged", 0.0, lac_bytes, "LAC parameter bytes unchanged by attention training and rendering"),
        check!("io.round_trip", 0.0, container_round_trip, "weight container round trip is bit exact"),
    ]
}

pub fn check_names() -> Vec<&'static str> {
    checks().iter().map(|c| c.name).collect()
}

fn selected(name: &str, filter: Option<&str>) -> bool {
    match filter {
        None => true,
        Some(f) => f.split(',').map(str::trim).filter(|s| !s.is_empty()).any(|s| name.contains(s)),
    }
}

impl Ctx {
    pub fn new(cfg: &RunConfig, fault: Fault) -> Result<Self> {
        cfg.validate()?;
        let enc = encoder_for(cfg)?;
        let gen = generator_for(cfg)?;
        let images: Vec<Tensor> = gen
            .dataset(cfg.data.test_start, cfg.verify.containment_images.max(5))
            .into_iter()
            .map(|s| s.image)
            .collect();
        let traces = par::map_slice(&images, |x| enc.forward(x))
            .into_iter()
            .collect::<lacvis_core::Result<Vec<_>>>()?;
        let params = random_params(&enc, cfg.lac.epsilon, &mut rng::stream(cfg.seed, "verify.params"));
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            images,
            traces,
            params,
            fault,
        })
    }
}

/// Runs every check whose name contains one of the comma-separated `filter` terms.
pub fn run(cfg: &RunConfig, filter: Option<&str>, fault: Fault) -> Result<Report> {
    let ctx = Ctx::new(cfg, fault)?;
    let mut report = Report::new("verify", cfg);
    for c in checks().into_iter().filter(|c| selected(c.name, filter)) {
        let outcome = match (c.run)(&ctx) {
            Ok(m) => {
                let allowance = if c.name == "ef.nested" {
                    (cfg.verify.containment_images - cfg.verify.nested_min_pass) as f64
                } else {
                    c.tolerance
                };
                CheckOutcome {
                    name: c.name.into(),
                    description: c.description.into(),
                    observed: m.observed,
                    tolerance: allowance,
                    cases: m.cases,
                    passed: m.observed <= allowance,
                    details: m.details,
                }
            }
            Err(e) => CheckOutcome {
                name: c.name.into(),
                description: c.description.into(),
                observed: f64::INFINITY,
                tolerance: c.tolerance,
                cases: 0,
                passed: false,
                details: vec![format!("error: {e:#}")],
            },
        };
        report.checks.push(outcome);
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    report.summary.insert("checks".into(), report.checks.len().into());
    report.summary.insert("passed".into(), passed.into());
    report.summary.insert("all_passed".into(), report.passed().into());
    Ok(report)
}
