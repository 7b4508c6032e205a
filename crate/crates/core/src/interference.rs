//! Class-directional reconstructions, foreground energy, Gram analysis of a
//! channel basis, ECR-ranked ablation, saliency and insertion/deletion curves.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::encoder::{Encoder, ForwardTrace, PixelMask};
use crate::error::{check_len, Error, Result};
use crate::lac::{cascade_from_seed, LacParams, SpatialBasis};
use crate::math::{sym_eigen, SymMatrix, Tensor};
use crate::training::LinearProbe;

#[derive(Clone, Debug)]
pub struct ClassReconstruction {
    pub class: usize,
    pub weights: Vec<f64>,
    pub full: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

/// `Σ_i w_i Ṽ_i` with the positive- and negative-weight parts kept apart.
/// Zero-weight channels land in neither hemisphere.
pub fn class_reconstruction_from_basis(basis: &SpatialBasis, weights: &[f64], class: usize) -> Result<ClassReconstruction> {
    check_len("weight count", basis.entries.len(), weights.len())?;
    let shape = basis.entries[0].v.shape().to_vec();
    let mut positive = Tensor::zeros(&shape);
    let mut negative = Tensor::zeros(&shape);
    for (e, &w) in basis.entries.iter().zip(weights) {
        if w > 0.0 {
            positive.axpy(w, &e.v);
        } else if w < 0.0 {
            negative.axpy(w, &e.v);
        }
    }
    Ok(ClassReconstruction {
        class,
        weights: weights.to_vec(),
        full: positive.add(&negative),
        positive,
        negative,
    })
}

pub fn class_reconstruction(
    enc: &Encoder,
    trace: &ForwardTrace,
    params: &LacParams,
    probe: &LinearProbe,
    class: usize,
) -> Result<ClassReconstruction> {
    if class >= probe.classes() {
        return Err(Error::OutOfRange {
            what: "class",
            got: class,
            len: probe.classes(),
        });
    }
    let basis = SpatialBasis::compute(enc, trace, params, trace.depth() - 1)?;
    class_reconstruction_from_basis(&basis, &probe.class_weights(class), class)
}

/// Relative gap between the per-channel sum and one cascade pass of the weighted
/// seed `Σ w_i e_i ⊙ h`. Not zero in general: the strips see mixed statistics.
pub fn single_pass_discrepancy(
    enc: &Encoder,
    trace: &ForwardTrace,
    params: &LacParams,
    recon: &ClassReconstruction,
) -> Result<f64> {
    let l = trace.depth() - 1;
    let h = trace.h(l);
    let mut seed = Tensor::zeros(h.shape());
    for (c, &w) in recon.weights.iter().enumerate() {
        for (s, v) in seed.channel_mut(c).iter_mut().zip(h.channel(c)) {
            *s = w * v;
        }
    }
    let single = cascade_from_seed(enc, trace, params, l, &seed, false)?;
    let denom = recon.full.norm();
    Ok(if denom > 0.0 { single.v.sub(&recon.full).norm() / denom } else { 0.0 })
}

/// Share of squared energy (all planes) inside the mask.
pub fn fg_energy(x: &Tensor, mask: &PixelMask) -> Result<f64> {
    let (c, h, w) = x.dims3()?;
    check_len("mask height", h, mask.height())?;
    check_len("mask width", w, mask.width())?;
    let (mut inside, mut total) = (0.0, 0.0);
    for ch in 0..c {
        for (v, &m) in x.channel(ch).iter().zip(mask.bits()) {
            let e = v * v;
            total += e;
            if m {
                inside += e;
            }
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct H1Report {
    pub gram: SymMatrix,
    pub eigenvalues: Vec<f64>,
    pub energy_fraction: f64,
    /// Unit-norm background image.
    pub background: Tensor,
    pub coefficients: Vec<f64>,
    pub residuals: Vec<Tensor>,
    /// Mean squared deviation from the channel mean, over mean channel energy.
    pub variance_pre: f64,
    pub variance_post: f64,
    pub cosine_range_pre: (f64, f64),
    pub cosine_range_post: (f64, f64),
}

fn spread(vs: &[&Tensor]) -> f64 {
    let n = vs.len() as f64;
    let mut centre = Tensor::zeros(vs[0].shape());
    for v in vs {
        centre.axpy(1.0 / n, v);
    }
    let var = vs.iter().map(|v| v.sub(&centre).dot(&v.sub(&centre))).sum::<f64>() / n;
    let energy = vs.iter().map(|v| v.dot(v)).sum::<f64>() / n;
    if energy > 0.0 {
        var / energy
    } else {
        0.0
    }
}

fn cosine_range(vs: &[&Tensor]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            let d = vs[i].norm() * vs[j].norm();
            if d > 0.0 {
                let c = vs[i].dot(vs[j]) / d;
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
    }
    (lo, hi)
}

/// Rank-one split `Ṽ_i = C_i B + δ_i` around the leading Gram eigenvector.
pub fn gram_analysis(vectors: &[&Tensor]) -> Result<H1Report> {
    if vectors.len() < 2 {
        return Err(Error::Invalid("gram analysis needs at least two channels".into()));
    }
    let n = vectors.len();
    let gram = SymMatrix::from_fn(n, |i, j| vectors[i].dot(vectors[j]));
    let eig = sym_eigen(&gram);
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all channel inversions vanish".into()));
    }
    let lead = eig.vectors.column(0);
    let mut b = Tensor::zeros(vectors[0].shape());
    for (v, &u) in vectors.iter().zip(&lead) {
        b.axpy(u, v);
    }
    let nb = b.norm();
    b = b.scale(1.0 / nb);
    let mut coefficients: Vec<f64> = vectors.iter().map(|v| v.dot(&b)).collect();
    if coefficients.iter().sum::<f64>() < 0.0 {
        b = b.scale(-1.0);
        for c in &mut coefficients {
            *c = -*c;
        }
    }
    let residuals: Vec<Tensor> = vectors
        .iter()
        .zip(&coefficients)
        .map(|(v, &c)| {
            let mut r = (*v).clone();
            r.axpy(-c, &b);
            r
        })
        .collect();
    let rrefs: Vec<&Tensor> = residuals.iter().collect();
    Ok(H1Report {
        energy_fraction: eig.values[0] / total,
        eigenvalues: eig.values,
        gram,
        background: b,
        coefficients,
        variance_pre: spread(vectors),
        variance_post: spread(&rrefs),
        cosine_range_pre: cosine_range(vectors),
        cosine_range_post: cosine_range(&rrefs),
        residuals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BackgroundCoefficient {
    pub alpha: f64,
    pub positive_part: f64,
    pub negative_part: f64,
}

/// `α = Σ w_i C_i` and its restrictions to positive and negative weights.
pub fn background_coefficient(weights: &[f64], coefficients: &[f64]) -> BackgroundCoefficient {
    assert_eq!(weights.len(), coefficients.len(), "weights and coefficients differ in length");
    let mut out = BackgroundCoefficient {
        alpha: 0.0,
        positive_part: 0.0,
        negative_part: 0.0,
    };
    for (&w, &c) in weights.iter().zip(coefficients) {
        out.alpha += w * c;
        if w > 0.0 {
            out.positive_part += w * c;
        } else if w < 0.0 {
            out.negative_part += w * c;
        }
    }
    out
}

/// Per-channel share of squared energy (all planes) inside `region`.
pub fn ecr(vectors: &[&Tensor], region: &PixelMask) -> Result<Vec<f64>> {
    if region.is_empty() {
        return Err(Error::Invalid("ECR region is empty".into()));
    }
    vectors.iter().map(|v| fg_energy(v, region)).collect()
}

/// Channel indices by descending score; ties go to the lower index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationCurve {
    pub ordering: String,
    pub fractions: Vec<f64>,
    pub mean_probability: Vec<f64>,
    /// Across random orderings; zeros for the deterministic orders.
    pub std_probability: Vec<f64>,
}

/// Mean target probability after zeroing the first `⌈ρC⌉` features of `order`.
pub fn ablation_curve(
    probe: &LinearProbe,
    features: &[Vec<f64>],
    target: usize,
    order: &[usize],
    fractions: &[f64],
) -> Vec<f64> {
    let c = order.len();
    fractions
        .iter()
        .map(|&rho| {
            let k = ((rho * c as f64) - 1e-9).ceil().max(0.0) as usize;
            let k = k.min(c);
            let probs: f64 = features
                .iter()
                .map(|h| {
                    let mut h = h.clone();
                    for &i in &order[..k] {
                        h[i] = 0.0;
                    }
                    probe.probabilities(&h)[target]
                })
                .sum();
            probs / features.len() as f64
        })
        .collect()
}

pub fn default_fractions() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Descending and ascending ECR orders plus the mean/std over `random_seeds` shuffles.
pub fn ablation_study(
    probe: &LinearProbe,
    features: &[Vec<f64>],
    target: usize,
    scores: &[f64],
    fractions: &[f64],
    random_seeds: usize,
    seed: u64,
) -> Vec<AblationCurve> {
    let desc = rank_descending(scores);
    let asc: Vec<usize> = desc.iter().rev().cloned().collect();
    let zeros = vec![0.0; fractions.len()];
    let mut out = vec![
        AblationCurve {
            ordering: "descending".into(),
            fractions: fractions.to_vec(),
            mean_probability: ablation_curve(probe, features, target, &desc, fractions),
            std_probability: zeros.clone(),
        },
        AblationCurve {
            ordering: "ascending".into(),
            fractions: fractions.to_vec(),
            mean_probability: ablation_curve(probe, features, target, &asc, fractions),
            std_probability: zeros,
        },
    ];
    let curves = crate::par::map_range(random_seeds, |s| {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.shuffle(&mut crate::rng::indexed(seed, "ablate", s as u64));
        ablation_curve(probe, features, target, &order, fractions)
    });
    let n = random_seeds.max(1) as f64;
    let mean: Vec<f64> = (0..fractions.len())
        .map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..fractions.len())
        .map(|j| (curves.iter().map(|c| (c[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    out.push(AblationCurve {
        ordering: "random".into(),
        fractions: fractions.to_vec(),
        mean_probability: mean,
        std_probability: std,
    });
    out
}

/// Per-pixel ℓ2 norm over planes.
pub fn saliency_map(x: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = x.dims3()?;
    Ok((0..h * w)
        .map(|p| (0..c).map(|ch| x.channel(ch)[p].powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// Pixel indices by descending saliency, ties broken by row-major index.
pub fn saliency_order(sal: &[f64]) -> Vec<usize> {
    rank_descending(sal)
}

#[derive(Clone, Debug, Serialize)]
pub struct InsertionDeletion {
    pub fractions: Vec<f64>,
    pub insertion: Vec<f64>,
    pub deletion: Vec<f64>,
    pub insertion_auc: f64,
    pub deletion_auc: f64,
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| (a[1] - a[0]) * (b[0] + b[1]) / 2.0).sum()
}

/// Class probability as pixels are inserted into the zero image (or deleted from
/// `x`) in saliency order, in 1% steps.
pub fn insertion_deletion_auc(
    enc: &Encoder,
    probe: &LinearProbe,
    x: &Tensor,
    order: &[usize],
    class: usize,
) -> Result<InsertionDeletion> {
    let (c, h, w) = x.dims3()?;
    check_len("pixel order length", h * w, order.len())?;
    let p = h * w;
    let steps = 100;
    let prob = |img: &Tensor| -> Result<f64> { Ok(probe.probabilities(&enc.forward(img)?.gap_features())[class]) };
    let rows = crate::par::map_range(steps + 1, |j| -> Result<(f64, f64)> {
        let k = (j * p + steps / 2) / steps;
        let mut ins = Tensor::zeros(x.shape());
        let mut del = x.clone();
        for &px in &order[..k] {
            for ch in 0..c {
                ins.data_mut()[ch * p + px] = x.data()[ch * p + px];
                del.data_mut()[ch * p + px] = 0.0;
            }
        }
        Ok((prob(&ins)?, prob(&del)?))
    });
    let rows: Vec<(f64, f64)> = rows.into_iter().collect::<Result<_>>()?;
    let fractions: Vec<f64> = (0..=steps).map(|j| j as f64 / steps as f64).collect();
    let insertion: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let deletion: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(InsertionDeletion {
        insertion_auc: trapezoid(&fractions, &insertion),
        deletion_auc: trapezoid(&fractions, &deletion),
        fractions,
        insertion,
        deletion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![1, 1, n], v).unwrap()
    }

    #[test]
    fn identical_channels_are_rank_one() {
        let a = t(vec![1.0, 2.0, -1.0, 0.5]);
        let r = gram_analysis(&[&a, &a, &a]).unwrap();
        assert!((r.energy_fraction - 1.0).abs() < 1e-12);
        assert!(r.residuals.iter().all(|d| d.max_abs() < 1e-12));
        assert!(r.coefficients.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn orthogonal_equal_norm_channels_are_isotropic() {
        let vs: Vec<Tensor> = (0..4).map(|i| t((0..4).map(|j| if i == j { 2.0 } else { 0.0 }).collect())).collect();
        let refs: Vec<&Tensor> = vs.iter().collect();
        let r = gram_analysis(&refs).unwrap();
        assert!((r.energy_fraction - 0.25).abs() < 1e-12);
    }

    #[test]
    fn planted_background_is_recovered() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::stream(5, "plant");
        let d = 64;
        let b = Tensor::random_normal(&[1, 1, d], 1.0, &mut rng);
        let b = b.scale(1.0 / b.norm());
        let vs: Vec<Tensor> = (0..12)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let c = 3.0 + 0.3 * z;
                let mut v = Tensor::random_normal(&[1, 1, d], 0.1, &mut rng);
                v.axpy(c, &b);
                v
            })
            .collect();
        let refs: Vec<&Tensor> = vs.iter().collect();
        let r = gram_analysis(&refs).unwrap();
        assert!(r.background.dot(&b) >= 0.99);
        assert!(r.variance_post > r.variance_pre);
        for (i, v) in vs.iter().enumerate() {
            let mut back = r.residuals[i].clone();
            back.axpy(r.coefficients[i], &r.background);
            assert!(back.sub(v).max_abs() <= 1e-10);
            assert!(r.residuals[i].dot(&r.background).abs() <= 1e-10);
        }
    }

    #[test]
    fn fg_energy_cases() {
        let mut m = PixelMask::empty(1, 4);
        m.set(0, 1, true);
        let x = t(vec![0.0, 3.0, 0.0, 0.0]);
        assert_eq!(fg_energy(&x, &m).unwrap(), 1.0);
        let u = t(vec![1.0, -1.0, 1.0, 1.0]);
        assert!((fg_energy(&u, &m).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn alpha_cases() {
        assert_eq!(background_coefficient(&[1.0, -1.0], &[2.0, 2.0]).alpha, 0.0);
        let c = [0.5, -2.0, 1.0];
        assert!((background_coefficient(&c, &c).alpha - 5.25).abs() < 1e-15);
    }

    #[test]
    fn ranking_ties_go_low() {
        assert_eq!(rank_descending(&[0.0, 0.0, 0.0]), vec![0, 1, 2]);
        assert_eq!(rank_descending(&[0.1, 0.5, 0.5]), vec![1, 2, 0]);
    }

    #[test]
    fn trapezoid_of_line() {
        let x = [0.0, 0.5, 1.0];
        assert!((trapezoid(&x, &[0.0, 0.5, 1.0]) - 0.5).abs() < 1e-15);
    }
}
