//! Covariance-volume channel selection, the exhaustive oracle, admissible
//! interference volumes, the volume/covariance duality experiment and
//! distribution-shift indicators on GAP features.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cholesky, dot, orthonormal_complement, sym_eigen, Matrix, SymMatrix, Tensor};

/// Pivots at or below this are treated as exhausted.
pub const PIVOT_FLOOR: f64 = 1e-12;

/// `N×C` GAP features, one row per image.
#[derive(Clone, Debug)]
pub struct GapMatrix {
    rows: Matrix,
}

impl GapMatrix {
    pub fn new(rows: Matrix) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::Invalid(format!("GAP matrix needs at least 2 rows, got {}", rows.rows())));
        }
        if let Some(i) = rows.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(GapMatrix { rows })
    }

    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Invalid("no feature rows".into()));
        }
        let c = features[0].len();
        if let Some(bad) = features.iter().find(|f| f.len() != c) {
            return Err(Error::Shape {
                axis: "feature width",
                expected: c,
                got: bad.len(),
            });
        }
        Self::new(Matrix::from_rows(features))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn samples(&self) -> usize {
        self.rows.rows()
    }

    pub fn channels(&self) -> usize {
        self.rows.cols()
    }
}

/// `(1/N)(H − H̄)ᵀ(H − H̄)`.
pub fn centered_covariance(h: &GapMatrix) -> SymMatrix {
    let m = h.matrix();
    let (n, c) = (m.rows(), m.cols());
    let means: Vec<f64> = (0..c).map(|j| (0..n).map(|i| m.get(i, j)).sum::<f64>() / n as f64).collect();
    let centred = Matrix::from_fn(n, c, |i, j| m.get(i, j) - means[j]);
    centred.gram().scale(1.0 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    /// Residual variance of each pick at the moment it was chosen.
    pub pivots: Vec<f64>,
    pub logdet: f64,
    /// Set when every remaining pivot fell to `PIVOT_FLOOR` before `k` picks.
    pub truncated: bool,
}

fn check_k(dim: usize, k: usize) -> Result<()> {
    if k == 0 || k > dim {
        return Err(Error::OutOfRange {
            what: "selection size",
            got: k,
            len: dim + 1,
        });
    }
    Ok(())
}

/// Pivoted partial Cholesky: repeatedly take the largest Schur-complement diagonal.
pub fn greedy_select(sigma: &SymMatrix, k: usize) -> Result<SelectionResult> {
    let n = sigma.dim();
    check_k(n, k)?;
    let mut resid: Vec<f64> = (0..n).map(|i| sigma.get(i, i)).collect();
    let mut factors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let mut out = SelectionResult {
        indices: Vec::with_capacity(k),
        pivots: Vec::with_capacity(k),
        logdet: 0.0,
        truncated: false,
    };
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            if best.is_none_or(|b| resid[i] > resid[b]) {
                best = Some(i);
            }
        }
        let p = best.expect("k ≤ dim leaves a candidate");
        let pivot = resid[p];
        if pivot <= PIVOT_FLOOR {
            out.truncated = true;
            break;
        }
        let root = pivot.sqrt();
        let col: Vec<f64> = (0..n)
            .map(|i| {
                let s = sigma.get(i, p) - factors.iter().map(|f| f[i] * f[p]).sum::<f64>();
                s / root
            })
            .collect();
        for i in 0..n {
            resid[i] -= col[i] * col[i];
        }
        chosen[p] = true;
        factors.push(col);
        out.indices.push(p);
        out.pivots.push(pivot);
        out.logdet += pivot.ln();
    }
    Ok(out)
}

/// `logdet(Σ_S)`, or `-∞` if the submatrix is singular.
pub fn subset_logdet(sigma: &SymMatrix, subset: &[usize]) -> f64 {
    let sub = sigma.submatrix(subset);
    match cholesky(&sub) {
        Ok(l) => (0..subset.len()).map(|i| 2.0 * l.get(i, i).ln()).sum(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k.min(n - k)).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive argmax of `logdet(Σ_S)`; the lexicographically first subset wins ties.
pub fn brute_force_select(sigma: &SymMatrix, k: usize) -> Result<SelectionResult> {
    let n = sigma.dim();
    check_k(n, k)?;
    if binomial(n, k) > 1_000_000 {
        return Err(Error::Invalid(format!("C({n}, {k}) subsets exceed the exhaustive limit of 10^6")));
    }
    let subsets = combinations(n, k);
    let values = crate::par::map_slice(&subsets, |s| subset_logdet(sigma, s));
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    if values[best] == f64::NEG_INFINITY {
        return Err(Error::Degenerate(format!("every {k}-subset is singular")));
    }
    let indices = subsets[best].clone();
    let pivots = (0..k)
        .map(|j| {
            let prev = if j == 0 { 0.0 } else { subset_logdet(sigma, &indices[..j]) };
            (subset_logdet(sigma, &indices[..=j]) - prev).exp()
        })
        .collect();
    Ok(SelectionResult {
        indices,
        pivots,
        logdet: values[best],
        truncated: false,
    })
}

/// Channels with the largest mean squared GAP feature.
pub fn energy_select(h: &GapMatrix, k: usize) -> Result<Vec<usize>> {
    check_k(h.channels(), k)?;
    let m = h.matrix();
    let energy: Vec<f64> = (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m.get(i, j).powi(2)).sum::<f64>() / m.rows() as f64)
        .collect();
    let mut order = crate::interference::rank_descending(&energy);
    order.truncate(k);
    Ok(order)
}

fn det_psd(g: &SymMatrix) -> f64 {
    sym_eigen(g).values.iter().map(|v| v.max(0.0)).product()
}

/// `√det(UᵀΔᵀΔU)` with `U` an orthonormal basis of `C_S`'s complement.
pub fn admissible_volume(delta: &Matrix, c: &[f64]) -> Result<f64> {
    if delta.cols() != c.len() {
        return Err(Error::Shape {
            axis: "coefficient count",
            expected: delta.cols(),
            got: c.len(),
        });
    }
    if c.len() < 2 {
        return Err(Error::Invalid("admissible volume needs |S| ≥ 2".into()));
    }
    let u = orthonormal_complement(c)?;
    Ok(det_psd(&delta.matmul(&u).gram()).sqrt())
}

/// Ensemble satisfying the rank-one-plus-residual model exactly:
/// `Ṽ_i = C_i B + δ_i` with every `δ_i ⟂ B`.
#[derive(Clone, Debug)]
pub struct H1Ensemble {
    pub background: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// `d × C`, column `i` is `δ_i`.
    pub residuals: Matrix,
    pub background_std: f64,
    pub residual_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub channels: usize,
    pub pixel_dim: usize,
    pub images: usize,
    /// Uniform channel norms and coefficients nearly constant when set;
    /// wildly non-uniform norms otherwise.
    pub theorem_conditions: bool,
    pub coefficient_jitter: f64,
    pub background_std: f64,
    pub residual_std: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            channels: 8,
            pixel_dim: 48,
            images: 20_000,
            theorem_conditions: true,
            coefficient_jitter: 0.01,
            background_std: 10.0,
            residual_std: 1.0,
        }
    }
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl H1Ensemble {
    pub fn generate<R: Rng + ?Sized>(cfg: &EnsembleConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels < 2 || cfg.pixel_dim <= cfg.channels {
            return Err(Error::Invalid("ensemble needs 2 ≤ channels < pixel_dim".into()));
        }
        let b = gaussian_vec(cfg.pixel_dim, rng);
        let nb = dot(&b, &b).sqrt();
        let b: Vec<f64> = b.iter().map(|v| v / nb).collect();
        let mut coefficients = Vec::with_capacity(cfg.channels);
        let mut cols = Vec::with_capacity(cfg.channels);
        for _ in 0..cfg.channels {
            let mut d = gaussian_vec(cfg.pixel_dim, rng);
            let p = dot(&d, &b);
            for (di, bi) in d.iter_mut().zip(&b) {
                *di -= p * bi;
            }
            let nd = dot(&d, &d).sqrt();
            let (ci, target) = if cfg.theorem_conditions {
                let ci = 1.0 + cfg.coefficient_jitter * rng.random_range(-1.0..1.0);
                // ‖Ṽ_i‖² = C_i² + ‖δ_i‖² = 2 for every channel.
                (ci, (2.0 - ci * ci).max(0.0).sqrt())
            } else {
                (rng.random_range(0.1..3.0), 10f64.powf(rng.random_range(-1.0..1.0)))
            };
            coefficients.push(ci);
            cols.push(d.iter().map(|v| v * target / nd).collect());
        }
        Ok(H1Ensemble {
            background: b,
            coefficients,
            residuals: Matrix::from_columns(&cols),
            background_std: cfg.background_std,
            residual_std: cfg.residual_std,
        })
    }

    pub fn channels(&self) -> usize {
        self.coefficients.len()
    }

    pub fn subset(&self, s: &[usize]) -> (Matrix, Vec<f64>) {
        let cols: Vec<Vec<f64>> = s.iter().map(|&i| self.residuals.column(i)).collect();
        (Matrix::from_columns(&cols), s.iter().map(|&i| self.coefficients[i]).collect())
    }

    /// `h_{n,i} = C_i b_n + ⟨δ_i, ζ_n⟩` for `n` synthetic images.
    pub fn gap_features<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<GapMatrix> {
        let c = self.channels();
        let d = self.residuals.rows();
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            let b = self.background_std * z;
            let zeta: Vec<f64> = gaussian_vec(d, rng).into_iter().map(|z| z * self.residual_std).collect();
            let proj = self.residuals.transpose().matvec(&zeta);
            rows.push((0..c).map(|i| self.coefficients[i] * b + proj[i]).collect());
        }
        GapMatrix::from_features(&rows)
    }

    /// Background share of the Schur-complemented signal for subset `s`:
    /// `r/(1+r)` with `r = (σ_b²/σ_ζ²) C_Sᵀ G_S⁻¹ C_S`.
    pub fn rho(&self, s: &[usize]) -> f64 {
        let (delta, c) = self.subset(s);
        let g = delta.gram();
        let Ok(l) = cholesky(&g) else { return 1.0 };
        // Forward substitution: ‖L⁻¹c‖² = cᵀG⁻¹c.
        let k = c.len();
        let mut y = vec![0.0; k];
        for i in 0..k {
            let s: f64 = (0..i).map(|j| l.get(i, j) * y[j]).sum();
            y[i] = (c[i] - s) / l.get(i, i);
        }
        let r = (self.background_std / self.residual_std).powi(2) * dot(&y, &y);
        r / (1.0 + r)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SubsetScore {
    pub trial: usize,
    pub subset: Vec<usize>,
    pub log_volume_sq: f64,
    pub logdet_cov: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub top_volume: Vec<usize>,
    pub top_covariance: Vec<usize>,
    pub agree: bool,
    /// Runner-up within tolerance of the best under either objective.
    pub tie: bool,
    pub spearman: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityReport {
    pub config: EnsembleConfig,
    pub k: usize,
    pub trials: Vec<TrialOutcome>,
    pub agreement_rate: f64,
    pub mean_spearman: f64,
    pub subsets: Vec<SubsetScore>,
}

/// Average ranks (ties share the mean rank).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation of ranks; zero when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

const TIE_TOL: f64 = 1e-9;

fn argmax_with_tie(v: &[f64]) -> (usize, bool) {
    let best = (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    let tie = (0..v.len()).any(|i| i != best && (v[best] - v[i]).abs() <= TIE_TOL * v[best].abs().max(1.0));
    (best, tie)
}

/// Compare `mean log Vol²(F_S)` with `logdet Σ_S` over every `k`-subset.
/// Volumes come from the fixed ensemble, so the image mean is the value itself.
pub fn duality_experiment(cfg: &EnsembleConfig, k: usize, trials: usize, seed: u64) -> Result<DualityReport> {
    check_k(cfg.channels, k)?;
    if k < 2 {
        return Err(Error::Invalid("duality needs k ≥ 2".into()));
    }
    let subsets = combinations(cfg.channels, k);
    let per_trial = crate::par::map_range(trials, |t| -> Result<(TrialOutcome, Vec<SubsetScore>)> {
        let mut rng = crate::rng::indexed(seed, "duality", t as u64);
        let ens = H1Ensemble::generate(cfg, &mut rng)?;
        let h = ens.gap_features(cfg.images, &mut rng)?;
        let sigma = centered_covariance(&h);
        let mut scores = Vec::with_capacity(subsets.len());
        for s in &subsets {
            let (delta, c) = ens.subset(s);
            let vol = admissible_volume(&delta, &c)?;
            scores.push(SubsetScore {
                trial: t,
                subset: s.clone(),
                log_volume_sq: 2.0 * vol.ln(),
                logdet_cov: subset_logdet(&sigma, s),
                rho: ens.rho(s),
            });
        }
        let a: Vec<f64> = scores.iter().map(|s| s.log_volume_sq).collect();
        let b: Vec<f64> = scores.iter().map(|s| s.logdet_cov).collect();
        let (ia, ta) = argmax_with_tie(&a);
        let (ib, tb) = argmax_with_tie(&b);
        Ok((
            TrialOutcome {
                trial: t,
                top_volume: subsets[ia].clone(),
                top_covariance: subsets[ib].clone(),
                agree: ia == ib,
                tie: ta || tb,
                spearman: spearman(&a, &b),
            },
            scores,
        ))
    });
    let mut outcomes = Vec::with_capacity(trials);
    let mut all = Vec::new();
    for r in per_trial {
        let (o, s) = r?;
        outcomes.push(o);
        all.extend(s);
    }
    let n = trials.max(1) as f64;
    Ok(DualityReport {
        config: cfg.clone(),
        k,
        agreement_rate: outcomes.iter().filter(|o| o.agree).count() as f64 / n,
        mean_spearman: outcomes.iter().map(|o| o.spearman).sum::<f64>() / n,
        trials: outcomes,
        subsets: all,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OodIndicators {
    /// `-∞` when the covariance is singular.
    pub logdet: f64,
    pub trace: f64,
    pub effective_rank: f64,
    pub mmd: f64,
}

/// `exp` of the Shannon entropy of the normalised non-negative eigenvalues.
pub fn effective_rank(sigma: &SymMatrix) -> f64 {
    let vals: Vec<f64> = sym_eigen(sigma).values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = vals
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Biased Gaussian-kernel MMD², bandwidth = median pairwise distance of the pooled sample.
pub fn mmd_squared(x: &Matrix, y: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).chain((0..y.rows()).map(|i| y.row(i))).collect();
    let mut d: Vec<f64> = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let med = if d.is_empty() {
        0.0
    } else if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0
    };
    let bw = if med > 0.0 { med } else { 1.0 };
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * bw * bw)).exp();
    let mean_k = |p: &Matrix, q: &Matrix| {
        let mut s = 0.0;
        for i in 0..p.rows() {
            for j in 0..q.rows() {
                s += k(p.row(i), q.row(j));
            }
        }
        s / (p.rows() * q.rows()) as f64
    };
    (mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)).max(0.0)
}

pub fn ood_indicators(clean: &GapMatrix, corrupt: &GapMatrix) -> Result<OodIndicators> {
    if clean.channels() != corrupt.channels() {
        return Err(Error::Shape {
            axis: "feature width",
            expected: clean.channels(),
            got: corrupt.channels(),
        });
    }
    let sigma = centered_covariance(corrupt);
    Ok(OodIndicators {
        logdet: sym_eigen(&sigma).values.iter().map(|v| if *v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).sum(),
        trace: sigma.trace(),
        effective_rank: effective_rank(&sigma),
        mmd: mmd_squared(clean.matrix(), corrupt.matrix()),
    })
}

/// Noise levels as a fraction of per-image standard deviation.
pub const SEVERITY_GRID: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4];

/// Additive Gaussian noise at the given severity. The unit-noise draw depends only
/// on `(seed, index)`, so every severity perturbs an image along the same direction.
pub fn corrupt(x: &Tensor, severity: usize, seed: u64, index: u64) -> Result<Tensor> {
    let Some(&level) = SEVERITY_GRID.get(severity) else {
        return Err(Error::OutOfRange {
            what: "severity",
            got: severity,
            len: SEVERITY_GRID.len(),
        });
    };
    if level == 0.0 {
        return Ok(x.clone());
    }
    let m = crate::math::mean(x.data());
    let std = (x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let mut rng = crate::rng::indexed(seed, "corrupt", index);
    let noise = Tensor::random_normal(x.shape(), 1.0, &mut rng);
    let mut out = x.clone();
    out.axpy(level * std, &noise);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm(rows: &[Vec<f64>]) -> GapMatrix {
        GapMatrix::from_features(rows).unwrap()
    }

    #[test]
    fn covariance_hand_cases() {
        let s = centered_covariance(&gm(&[vec![0.0, 0.0], vec![2.0, 2.0]]));
        assert_eq!(s.to_dense().data(), &[1.0, 1.0, 1.0, 1.0]);
        let z = centered_covariance(&gm(&[vec![3.0, -1.0], vec![3.0, -1.0], vec![3.0, -1.0]]));
        assert!(z.upper().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn greedy_hand_cases() {
        let r = greedy_select(&SymMatrix::diag(&[1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(r.indices, vec![2, 1]);
        assert!((r.logdet - 6f64.ln()).abs() < 1e-14);
        let s = SymMatrix::from_fn(3, |i, j| match (i, j) {
            (0, 0) | (1, 1) => 2.0,
            (0, 1) => 1.9,
            (2, 2) => 1.5,
            _ => 0.0,
        });
        let r = greedy_select(&s, 2).unwrap();
        assert_eq!(r.indices, vec![0, 2]);
        assert_eq!(brute_force_select(&s, 2).unwrap().indices, vec![0, 2]);
    }

    #[test]
    fn greedy_truncates_on_rank_deficiency() {
        let s = SymMatrix::from_fn(3, |_, _| 1.0);
        let r = greedy_select(&s, 3).unwrap();
        assert!(r.truncated);
        assert_eq!(r.indices, vec![0]);
        assert!(greedy_select(&s, 4).is_err());
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(8, 3).len(), 56);
        assert_eq!(combinations(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(binomial(40, 20), 137_846_528_820);
    }

    #[test]
    fn two_channel_volume() {
        let delta = Matrix::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert!((admissible_volume(&delta, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        let same = Matrix::from_columns(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]]);
        assert!(admissible_volume(&same, &[1.0, 1.0]).unwrap() < 1e-7);
    }

    #[test]
    fn effective_rank_extremes() {
        assert!((effective_rank(&SymMatrix::identity(5)) - 5.0).abs() < 1e-12);
        assert!((effective_rank(&SymMatrix::diag(&[4.0, 0.0, 0.0])) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![1.5, 0.0, 1.5]);
    }

    #[test]
    fn corrupt_levels() {
        let mut rng = crate::rng::stream(1, "x");
        let x = Tensor::random_normal(&[3, 32, 32], 2.0, &mut rng);
        assert_eq!(corrupt(&x, 0, 9, 0).unwrap(), x);
        assert_eq!(corrupt(&x, 3, 9, 4).unwrap(), corrupt(&x, 3, 9, 4).unwrap());
        let m = crate::math::mean(x.data());
        let sx = (x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        for s in 1..6 {
            let d = corrupt(&x, s, 9, 0).unwrap().sub(&x);
            let emp = d.norm() / (d.len() as f64).sqrt();
            let target = SEVERITY_GRID[s] * sx;
            assert!((emp / target - 1.0).abs() < 0.05, "severity {s}");
        }
        assert!(corrupt(&x, 6, 9, 0).is_err());
    }

    #[test]
    fn mmd_basic() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]);
        assert!(mmd_squared(&x, &x) <= 1e-10);
        let y = Matrix::from_fn(3, 2, |i, j| x.get(i, j) + 100.0);
        assert!(mmd_squared(&x, &y) > 0.5);
    }
}
