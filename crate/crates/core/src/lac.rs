//! Local Adjoint Correctors and the backward cascade.
//!
//! Sites are named after the pullback they follow. `Boundary(k)` normalises the
//! output of `J_kᵀ` (level `k − 1`, the stem activations for `k = 0`);
//! `Stem` normalises the pixel-space output of the stem adjoint, one group per
//! colour plane. A cascade started at stage `l` visits
//! `Boundary(l), …, Boundary(0), Stem`, i.e. `l + 2` sites, and every site is
//! shared by all source stages that reach it.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::encoder::{simplex_measure, Encoder, ForwardTrace};
use crate::error::{check_len, Error, Result};
use crate::math::{mean, project_zero_mean, Tensor};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Stem,
    Boundary(usize),
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::Stem => write!(f, "stem"),
            Site::Boundary(k) => write!(f, "boundary{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SiteParams {
    pub fn identity(groups: usize) -> Self {
        Self {
            gamma: vec![1.0; groups],
            beta: vec![0.0; groups],
        }
    }

    pub fn groups(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LacParams {
    pub stem: SiteParams,
    /// Indexed by boundary `k = 0..L`.
    pub boundaries: Vec<SiteParams>,
    pub epsilon: f64,
}

impl LacParams {
    /// `γ = 1`, `β = 0` at every site.
    pub fn init(enc: &Encoder, epsilon: f64) -> Self {
        let cfg = enc.config();
        let boundaries = (0..cfg.depth())
            .map(|k| SiteParams::identity(if k == 0 { cfg.widths[0] } else { cfg.widths[k - 1] }))
            .collect();
        Self {
            stem: SiteParams::identity(cfg.input_channels),
            boundaries,
            epsilon,
        }
    }

    /// Stem first, then boundaries in increasing order.
    pub fn sites(&self) -> Vec<Site> {
        std::iter::once(Site::Stem)
            .chain((0..self.boundaries.len()).map(Site::Boundary))
            .collect()
    }

    pub fn site(&self, s: Site) -> &SiteParams {
        match s {
            Site::Stem => &self.stem,
            Site::Boundary(k) => &self.boundaries[k],
        }
    }

    pub fn site_mut(&mut self, s: Site) -> &mut SiteParams {
        match s {
            Site::Stem => &mut self.stem,
            Site::Boundary(k) => &mut self.boundaries[k],
        }
    }

    pub fn num_params(&self) -> usize {
        self.sites().iter().map(|&s| 2 * self.site(s).groups()).sum()
    }

    /// Per site in [`Self::sites`] order: all γ, then all β.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in self.sites() {
            out.extend_from_slice(&self.site(s).gamma);
            out.extend_from_slice(&self.site(s).beta);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameter length", self.num_params(), flat.len())?;
        let mut i = 0;
        for s in self.sites() {
            let sp = self.site_mut(s);
            let g = sp.groups();
            sp.gamma.copy_from_slice(&flat[i..i + g]);
            sp.beta.copy_from_slice(&flat[i + g..i + 2 * g]);
            i += 2 * g;
        }
        Ok(())
    }

    /// Human-readable names aligned with [`Self::to_flat`].
    pub fn flat_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in self.sites() {
            let g = self.site(s).groups();
            out.extend((0..g).map(|c| format!("{s}.gamma[{c}]")));
            out.extend((0..g).map(|c| format!("{s}.beta[{c}]")));
        }
        out
    }

    /// Little-endian bytes of every parameter and ε, for byte-level equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out
    }
}

/// GroupNorm strip of a single group: `γ√n·P⊥1 v / √(‖P⊥1 v‖² + nε) + β·1`.
pub fn groupnorm_strip(v: &Tensor, gamma: f64, beta: f64, epsilon: f64) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(Error::Invalid(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let mut out = vec![0.0; v.len()];
    let mut vhat = vec![0.0; v.len()];
    let s = strip_group(v.data(), gamma, beta, epsilon, &mut out, &mut vhat);
    if s == 0.0 {
        return Err(Error::Degenerate("constant channel with epsilon = 0".into()));
    }
    Tensor::new(v.shape().to_vec(), out)
}

/// Returns the scale `√(σ² + ε)`, or 0 when the group is degenerate (constant input
/// with ε = 0). A degenerate group maps to `β·1`.
fn strip_group(u: &[f64], gamma: f64, beta: f64, epsilon: f64, out: &mut [f64], vhat: &mut [f64]) -> f64 {
    let n = u.len() as f64;
    let constant = u.iter().all(|&x| x == u[0]);
    let mu = mean(u);
    let var = if constant {
        0.0
    } else {
        u.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n
    };
    let s = (var + epsilon).sqrt();
    if s == 0.0 {
        vhat.fill(0.0);
        out.fill(beta);
        return 0.0;
    }
    for ((o, vh), &x) in out.iter_mut().zip(vhat.iter_mut()).zip(u) {
        *vh = if constant { 0.0 } else { (x - mu) / s };
        *o = gamma * *vh + beta;
    }
    s
}

/// What one site did to one signal: standardised signal and per-group scale.
#[derive(Clone, Debug)]
pub struct SiteRecord {
    pub site: Site,
    /// Signal entering the strip.
    pub input: Tensor,
    pub vhat: Tensor,
    /// `√(σ² + ε)` per group, 0 for degenerate groups.
    pub scale: Vec<f64>,
}

impl SiteRecord {
    pub fn degenerate(&self, group: usize) -> bool {
        self.scale[group] == 0.0
    }
}

fn apply_site(site: Site, u: Tensor, sp: &SiteParams, epsilon: f64) -> (Tensor, SiteRecord) {
    let g = u.shape()[0];
    debug_assert_eq!(g, sp.groups());
    let plane = u.len() / g;
    let mut out = vec![0.0; u.len()];
    let mut vhat = vec![0.0; u.len()];
    let mut scale = Vec::with_capacity(g);
    for c in 0..g {
        let r = c * plane..(c + 1) * plane;
        scale.push(strip_group(
            &u.data()[r.clone()],
            sp.gamma[c],
            sp.beta[c],
            epsilon,
            &mut out[r.clone()],
            &mut vhat[r],
        ));
    }
    let shape = u.shape().to_vec();
    (
        Tensor::from_raw(shape.clone(), out),
        SiteRecord {
            site,
            input: u,
            vhat: Tensor::from_raw(shape, vhat),
            scale,
        },
    )
}

/// Full record of one cascade pass, in the order the sites were visited.
#[derive(Clone, Debug)]
pub struct CascadeTape {
    pub level: usize,
    pub records: Vec<SiteRecord>,
}

/// One channel's (or one seed's) pixel-space inversion.
#[derive(Clone, Debug)]
pub struct BasisEntry {
    pub channel: usize,
    /// `Ṽ`, shape `[C₀, H₀, W₀]`.
    pub v: Tensor,
    /// Unit-norm-per-plane direction of the signal entering the stem strip (zero planes
    /// where that signal is constant).
    pub d_cas: Tensor,
    /// `‖P⊥1 f‖ / √(‖P⊥1 f‖² + nε)` per plane; 1 with ε = 0.
    pub rho: Vec<f64>,
    /// False when the seed is identically zero.
    pub active: bool,
    pub sites_applied: usize,
    pub tape: Option<CascadeTape>,
}

fn inactive_entry(enc: &Encoder, params: &LacParams, channel: usize) -> BasisEntry {
    let (c0, h, w) = enc.input_shape();
    let mut v = Tensor::zeros(&[c0, h, w]);
    for p in 0..c0 {
        v.channel_mut(p).fill(params.stem.beta[p]);
    }
    BasisEntry {
        channel,
        v,
        d_cas: Tensor::zeros(&[c0, h, w]),
        rho: vec![0.0; c0],
        active: false,
        sites_applied: 0,
        tape: None,
    }
}

/// Push a level-`l` seed through `Boundary(l) … Boundary(0), Stem`.
pub fn cascade_from_seed(
    enc: &Encoder,
    trace: &ForwardTrace,
    params: &LacParams,
    l: usize,
    seed: &Tensor,
    keep_tape: bool,
) -> Result<BasisEntry> {
    check_len("seed size", trace.h(l).len(), seed.len())?;
    if seed.max_abs() == 0.0 {
        return Ok(inactive_entry(enc, params, usize::MAX));
    }
    let mut records = Vec::with_capacity(l + 2);
    let mut g = seed.clone();
    for k in (0..=l).rev() {
        let u = enc.stage_pullback(trace, k, &g)?;
        let (out, rec) = apply_site(Site::Boundary(k), u, &params.boundaries[k], params.epsilon);
        records.push(rec);
        g = out;
    }
    let f = enc.stem_pullback(trace, &g)?;
    let (v, rec) = apply_site(Site::Stem, f, &params.stem, params.epsilon);
    let (c0, _, _) = v.dims3()?;
    let plane = v.len() / c0;
    let mut d_cas = Tensor::zeros(v.shape());
    let mut rho = Vec::with_capacity(c0);
    for p in 0..c0 {
        let fp = rec.input.channel(p);
        let mu = mean(fp);
        let norm = fp.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>().sqrt();
        if rec.scale[p] == 0.0 || norm == 0.0 {
            rho.push(0.0);
            continue;
        }
        for (d, x) in d_cas.channel_mut(p).iter_mut().zip(fp) {
            *d = (x - mu) / norm;
        }
        rho.push(norm / (norm * norm + plane as f64 * params.epsilon).sqrt());
    }
    records.push(rec);
    let sites_applied = records.len();
    Ok(BasisEntry {
        channel: usize::MAX,
        v,
        d_cas,
        rho,
        active: true,
        sites_applied,
        tape: keep_tape.then_some(CascadeTape { level: l, records }),
    })
}

/// Channel inversion `Ṽ_{l,c}` from the seed `e_c ⊙ h_l`.
pub fn cascade_invert(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, l: usize, c: usize) -> Result<BasisEntry> {
    cascade_invert_taped(enc, trace, params, l, c, false)
}

pub fn cascade_invert_taped(
    enc: &Encoder,
    trace: &ForwardTrace,
    params: &LacParams,
    l: usize,
    c: usize,
    keep_tape: bool,
) -> Result<BasisEntry> {
    let seed = enc.channel_seed(trace, l, c)?;
    let mut e = cascade_from_seed(enc, trace, params, l, &seed, keep_tape)?;
    e.channel = c;
    Ok(e)
}

/// The cascade with every strip replaced by the identity; equals the raw pullback.
pub fn cascade_identity(enc: &Encoder, trace: &ForwardTrace, l: usize, seed: &Tensor) -> Result<Tensor> {
    let mut g = seed.clone();
    for k in (0..=l).rev() {
        g = enc.stage_pullback(trace, k, &g)?;
    }
    enc.stem_pullback(trace, &g)
}

#[derive(Clone, Debug)]
pub struct SpatialBasis {
    pub level: usize,
    pub entries: Vec<BasisEntry>,
}

impl SpatialBasis {
    pub fn compute(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, l: usize) -> Result<Self> {
        Self::compute_taped(enc, trace, params, l, false)
    }

    pub fn compute_taped(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, l: usize, keep_tape: bool) -> Result<Self> {
        let (c, _, _) = trace.h(l).dims3()?;
        let entries = par::map_range(c, |ch| cascade_invert_taped(enc, trace, params, l, ch, keep_tape));
        Ok(Self {
            level: l,
            entries: entries.into_iter().collect::<Result<_>>()?,
        })
    }

    pub fn vectors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|e| &e.v).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub level: usize,
    pub image: Tensor,
    pub weights: Vec<f64>,
    /// `E_{l,c} · Ṽ_{l,c}` per channel.
    pub terms: Vec<Tensor>,
    pub basis: SpatialBasis,
}

/// `X̂_l = Σ_c E_{l,c} Ṽ_{l,c}` summed in channel order.
pub fn synthesize(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, l: usize) -> Result<Reconstruction> {
    let basis = SpatialBasis::compute(enc, trace, params, l)?;
    synthesize_from_basis(trace, basis)
}

pub fn synthesize_from_basis(trace: &ForwardTrace, basis: SpatialBasis) -> Result<Reconstruction> {
    let weights = simplex_measure(trace, basis.level)?;
    let terms: Vec<Tensor> = basis.entries.iter().zip(&weights).map(|(e, &w)| e.v.scale(w)).collect();
    let mut image = Tensor::zeros(terms[0].shape());
    for t in &terms {
        image.axpy(1.0, t);
    }
    Ok(Reconstruction {
        level: basis.level,
        image,
        weights,
        terms,
        basis,
    })
}

#[derive(Clone, Debug)]
pub struct FvDecomposition {
    pub principal: Tensor,
    pub residual: Tensor,
    /// `Σ_c E_c |β_p|` per plane.
    pub bound: Vec<f64>,
    /// `Ẽ_{c,p} = E_c γ_p √n ρ_{c,p}`, indexed `[channel][plane]`.
    pub effective_weights: Vec<Vec<f64>>,
    /// Per channel: `‖d_cas − d_FV‖` with `d_FV` the per-plane unit direction of the raw VJP.
    pub eps_dc: Vec<f64>,
    pub reconstruction: Tensor,
}

/// Split `X̂_l` into `Σ Ẽ d_cas` plus the constant stem-offset residual.
pub fn fv_decompose(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, l: usize) -> Result<FvDecomposition> {
    let rec = synthesize(enc, trace, params, l)?;
    let (c0, _, _) = rec.image.dims3()?;
    let n = (rec.image.len() / c0) as f64;
    let mut principal = Tensor::zeros(rec.image.shape());
    let mut effective_weights = Vec::with_capacity(rec.weights.len());
    let mut eps_dc = Vec::with_capacity(rec.weights.len());
    for (e, &w) in rec.basis.entries.iter().zip(&rec.weights) {
        let et: Vec<f64> = (0..c0).map(|p| w * params.stem.gamma[p] * n.sqrt() * e.rho[p]).collect();
        for p in 0..c0 {
            for (dst, d) in principal.channel_mut(p).iter_mut().zip(e.d_cas.channel(p)) {
                *dst += et[p] * d;
            }
        }
        effective_weights.push(et);
        if e.active {
            let raw = enc.raw_vjp(trace, l, e.channel)?;
            let mut err2 = 0.0;
            for p in 0..c0 {
                let pr = project_zero_mean(&Tensor::from_raw(vec![raw.channel(p).len()], raw.channel(p).to_vec()));
                let nr = pr.norm();
                for (d, r) in e.d_cas.channel(p).iter().zip(pr.data()) {
                    let fv = if nr > 0.0 { r / nr } else { 0.0 };
                    err2 += (d - fv) * (d - fv);
                }
            }
            eps_dc.push(err2.sqrt());
        } else {
            eps_dc.push(0.0);
        }
    }
    let residual = rec.image.sub(&principal);
    let wsum: f64 = rec.weights.iter().sum();
    let bound = (0..c0).map(|p| wsum * params.stem.beta[p].abs()).collect();
    Ok(FvDecomposition {
        principal,
        residual,
        bound,
        effective_weights,
        eps_dc,
        reconstruction: rec.image,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentEntry {
    pub source: usize,
    pub channel: usize,
    pub group: usize,
    pub mean: f64,
    pub second_moment: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    pub site: Site,
    pub entries: Vec<MomentEntry>,
    /// Number of sites each source stage passes through.
    pub depth_by_source: Vec<(usize, usize)>,
    pub max_mean_dev: f64,
    pub max_moment_dev: f64,
}

/// Standardised-signal moments at `site` for every source stage that reaches it.
pub fn path_moment_check(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, site: Site) -> Result<MomentReport> {
    let depth = trace.depth();
    let sources: Vec<usize> = match site {
        Site::Stem => (0..depth).collect(),
        Site::Boundary(b) => (b..depth).collect(),
    };
    let mut entries = Vec::new();
    let mut depth_by_source = Vec::new();
    for &l in &sources {
        let basis = SpatialBasis::compute_taped(enc, trace, params, l, true)?;
        let mut applied = 0;
        for e in &basis.entries {
            let Some(tape) = &e.tape else { continue };
            applied = e.sites_applied;
            let rec = tape.records.iter().find(|r| r.site == site).expect("site on path");
            let g = rec.vhat.shape()[0];
            let plane = rec.vhat.len() / g;
            for grp in 0..g {
                let vh = rec.vhat.channel(grp);
                entries.push(MomentEntry {
                    source: l,
                    channel: e.channel,
                    group: grp,
                    mean: mean(vh),
                    second_moment: vh.iter().map(|x| x * x).sum::<f64>() / plane as f64,
                    degenerate: rec.degenerate(grp),
                });
            }
        }
        depth_by_source.push((l, applied));
    }
    let live = entries.iter().filter(|e| !e.degenerate);
    let max_mean_dev = live.clone().fold(0.0f64, |m, e| m.max(e.mean.abs()));
    let max_moment_dev = live.fold(0.0f64, |m, e| m.max((e.second_moment - 1.0).abs()));
    Ok(MomentReport {
        site,
        entries,
        depth_by_source,
        max_mean_dev,
        max_moment_dev,
    })
}

/// Share of a plane's non-DC spectral energy with a signed frequency above a
/// quarter cycle per sample along either axis.
pub fn high_frequency_fraction(t: &Tensor) -> Result<f64> {
    let (c, h, w) = t.dims3()?;
    let mut planner = FftPlanner::<f64>::new();
    let fw = planner.plan_fft_forward(w);
    let fh = planner.plan_fft_forward(h);
    let (mut hi, mut total) = (0.0, 0.0);
    for ch in 0..c {
        let mut buf: Vec<Complex<f64>> = t.channel(ch).iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_mut(w) {
            fw.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            fh.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for y in 0..h {
            for x in 0..w {
                if x == 0 && y == 0 {
                    continue;
                }
                let e = buf[y * w + x].norm_sqr();
                let fy = y.min(h - y) as f64 / h as f64;
                let fx = x.min(w - x) as f64 / w as f64;
                total += e;
                if fy > 0.25 || fx > 0.25 {
                    hi += e;
                }
            }
        }
    }
    Ok(if total > 0.0 { hi / total } else { 0.0 })
}

/// High-frequency share of the raw VJP and of the cascade output for one channel.
pub fn spike_energy_ratio(enc: &Encoder, trace: &ForwardTrace, l: usize, c: usize, params: &LacParams) -> Result<(f64, f64)> {
    let raw = enc.raw_vjp(trace, l, c)?;
    let lac = cascade_invert(enc, trace, params, l, c)?;
    Ok((high_frequency_fraction(&raw)?, high_frequency_fraction(&lac.v)?))
}

/// Forward differences; a pixel is flagged when any plane's difference towards its
/// lower or right neighbour exceeds `tol`.
pub fn spatial_gradient_support(x: &Tensor, tol: f64) -> Result<crate::encoder::PixelMask> {
    let (c, h, w) = x.dims3()?;
    let mut m = crate::encoder::PixelMask::empty(h, w);
    for ch in 0..c {
        let p = x.channel(ch);
        for y in 0..h {
            for xx in 0..w {
                let v = p[y * w + xx];
                let dy = if y + 1 < h { p[(y + 1) * w + xx] - v } else { 0.0 };
                let dx = if xx + 1 < w { p[y * w + xx + 1] - v } else { 0.0 };
                if dy.abs() > tol || dx.abs() > tol {
                    m.set(y, xx, true);
                }
            }
        }
    }
    Ok(m)
}

/// Support threshold for the discrete spatial gradient in containment scans.
pub const GRADIENT_TOL: f64 = 1e-10;

/// Pixels where `x` has a nonzero spatial gradient outside the one-pixel dilation of `field`.
pub fn containment_violations(x: &Tensor, field: &crate::encoder::PixelMask) -> Result<crate::encoder::PixelMask> {
    Ok(spatial_gradient_support(x, GRADIENT_TOL)?.minus(&crate::encoder::dilate_one(field)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_encoder, EncoderConfig};
    use crate::rng;

    fn setup(eps: f64) -> (Encoder, ForwardTrace, LacParams) {
        let enc = build_encoder(&EncoderConfig::default(), 21).unwrap();
        let x = Tensor::random_normal(&[3, 32, 32], 1.0, &mut rng::stream(4, "test"));
        let tr = enc.forward(&x).unwrap();
        let p = LacParams::init(&enc, eps);
        (enc, tr, p)
    }

    #[test]
    fn strip_hand_example() {
        let v = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = groupnorm_strip(&v, 1.0, 0.0, 0.0).unwrap();
        let k = 2.0 / 5f64.sqrt();
        for (o, e) in out.data().iter().zip([-1.5, -0.5, 0.5, 1.5]) {
            assert!((o - k * e).abs() < 1e-15);
        }
        assert!((out.norm() - 2.0).abs() < 1e-15);
        let z = groupnorm_strip(&v, 0.0, 0.7, 0.0).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.7));
        assert!(groupnorm_strip(&Tensor::full(&[5], 0.1), 1.0, 0.0, 0.0).is_err());
        assert!(groupnorm_strip(&Tensor::full(&[5], 0.1), 1.0, 0.3, 1e-8).is_ok());
    }

    #[test]
    fn depth_is_l_plus_two() {
        let (enc, tr, p) = setup(0.0);
        for l in 0..3 {
            let c = (0..tr.h(l).shape()[0]).find(|&c| tr.h(l).channel(c).iter().any(|&v| v > 0.0)).unwrap();
            assert_eq!(cascade_invert(&enc, &tr, &p, l, c).unwrap().sites_applied, l + 2);
        }
    }

    #[test]
    fn identity_cascade_is_raw_vjp() {
        let (enc, tr, _) = setup(0.0);
        let seed = enc.channel_seed(&tr, 2, 3).unwrap();
        assert_eq!(cascade_identity(&enc, &tr, 2, &seed).unwrap(), enc.raw_vjp(&tr, 2, 3).unwrap());
    }

    #[test]
    fn inactive_channel_gives_beta_planes() {
        let (enc, mut tr, mut p) = setup(1e-8);
        tr.stages[2].h.channel_mut(0).fill(0.0);
        p.stem.beta = vec![0.1, -0.2, 0.3];
        let e = cascade_invert(&enc, &tr, &p, 2, 0).unwrap();
        assert!(!e.active);
        for (pl, b) in [0.1, -0.2, 0.3].iter().enumerate() {
            assert!(e.v.channel(pl).iter().all(|v| v == b));
        }
    }

    #[test]
    fn norm_identity_per_plane() {
        let (enc, tr, mut p) = setup(0.0);
        p.stem.gamma = vec![0.5, 1.5, 2.0];
        p.stem.beta = vec![0.3, 0.0, -0.1];
        let e = cascade_invert(&enc, &tr, &p, 1, 2).unwrap();
        for pl in 0..3 {
            let t = Tensor::from_raw(vec![1024], e.v.channel(pl).to_vec());
            let n = project_zero_mean(&t).norm();
            assert!((n - p.stem.gamma[pl] * 32.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn synthesis_additivity_and_fv_residual() {
        let (enc, tr, mut p) = setup(0.0);
        for s in p.sites() {
            let sp = p.site_mut(s);
            for (i, b) in sp.beta.iter_mut().enumerate() {
                *b = 0.1 * (i as f64 - 1.0);
            }
        }
        let rec = synthesize(&enc, &tr, &p, 2).unwrap();
        let mut sum = Tensor::zeros(rec.image.shape());
        for t in &rec.terms {
            sum.axpy(1.0, t);
        }
        assert!(sum.sub(&rec.image).max_abs() <= 1e-12);
        let fv = fv_decompose(&enc, &tr, &p, 2).unwrap();
        for pl in 0..3 {
            let r = fv.residual.channel(pl);
            let target = p.stem.beta[pl];
            assert!(r.iter().all(|v| (v - target).abs() <= 1e-12));
            assert!((fv.bound[pl] - target.abs()).abs() <= 1e-15);
        }
    }

    #[test]
    fn moments_exact_with_zero_epsilon() {
        let (enc, tr, p) = setup(0.0);
        let r = path_moment_check(&enc, &tr, &p, Site::Boundary(1)).unwrap();
        assert!(r.max_mean_dev <= 1e-12 && r.max_moment_dev <= 1e-12);
        assert_eq!(r.depth_by_source, vec![(1, 3), (2, 4)]);
    }

    #[test]
    fn moment_shrinks_with_epsilon() {
        let (enc, tr, _) = setup(0.0);
        let eps = 1e-3;
        let p = LacParams::init(&enc, eps);
        let r = path_moment_check(&enc, &tr, &p, Site::Stem).unwrap();
        let tape = cascade_invert_taped(&enc, &tr, &p, 0, 1, true).unwrap().tape.unwrap();
        let rec = tape.records.last().unwrap();
        let f = rec.input.channel(0);
        let mu = mean(f);
        let var = f.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / f.len() as f64;
        let e = r.entries.iter().find(|e| e.source == 0 && e.channel == 1 && e.group == 0).unwrap();
        assert!((e.second_moment - var / (var + eps)).abs() <= 1e-12);
    }

    #[test]
    fn gradient_support_of_constant_is_empty() {
        let t = Tensor::full(&[3, 5, 5], 0.3);
        assert!(spatial_gradient_support(&t, 1e-10).unwrap().is_empty());
        let mut t = Tensor::zeros(&[1, 5, 5]);
        t.data_mut()[12] = 1.0;
        let m = spatial_gradient_support(&t, 1e-10).unwrap();
        assert_eq!(m.count(), 3);
    }

    #[test]
    fn smooth_field_has_small_hf_share() {
        let tau = std::f64::consts::TAU;
        let t = Tensor::new(
            vec![1, 16, 16],
            (0..256).map(|i| (tau * (i / 16) as f64 / 16.0).sin() + (2.0 * tau * (i % 16) as f64 / 16.0).cos()).collect(),
        )
        .unwrap();
        assert!(high_frequency_fraction(&t).unwrap() < 0.05);
        let checker = Tensor::new(vec![1, 16, 16], (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect()).unwrap();
        assert!(high_frequency_fraction(&checker).unwrap() > 0.99);
    }
}
