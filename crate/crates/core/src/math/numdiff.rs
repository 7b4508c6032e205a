use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{dot, Tensor};

/// Central differences, one coordinate at a time.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Lower bound on the unit-direction displacement `‖ŵ − v̂‖` when `w = v + ε`,
/// `‖ε⊥‖ ≥ ‖v‖` and `‖ε∥‖ ≤ K‖v‖`.
pub fn angle_collapse_bound(k: f64) -> f64 {
    assert!(k >= 0.0, "K must be nonnegative");
    1.0 / ((1.0 + k) * (1.0 + k) + 1.0).sqrt()
}

/// One constrained draw: returns `‖ŵ − v̂‖` for a random `v ∈ ℝ^dim` and a perturbation
/// on the constraint set. Every fourth draw sits exactly on the constraint boundary.
pub fn angle_collapse_sample<R: Rng + ?Sized>(dim: usize, k: f64, draw: usize, rng: &mut R) -> f64 {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let nv = dot(&v, &v).sqrt();
    let vhat: Vec<f64> = v.iter().map(|x| x / nv).collect();
    let mut perp: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let d = dot(&perp, &vhat);
    for (p, u) in perp.iter_mut().zip(&vhat) {
        *p -= d * u;
    }
    let np = dot(&perp, &perp).sqrt();
    let boundary = draw % 4 == 0;
    let perp_norm = if boundary { nv } else { nv * (1.0 + 3.0 * rng.random::<f64>()) };
    let par = if boundary { k * nv } else { k * nv * (2.0 * rng.random::<f64>() - 1.0) };
    let w: Vec<f64> = (0..dim)
        .map(|i| v[i] + par * vhat[i] + perp_norm * perp[i] / np)
        .collect();
    let nw = dot(&w, &w).sqrt();
    (0..dim)
        .map(|i| (w[i] / nw - vhat[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_and_linear() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| 0.5 * t.dot(t), &x, 1e-4);
        assert!((g.data()[0] - 1.0).abs() < 1e-9 && (g.data()[1] - 2.0).abs() < 1e-9);
        let w = Tensor::new(vec![2], vec![-3.0, 0.5]).unwrap();
        let g = finite_diff_gradient(|t| t.dot(&w), &x, 1e-3);
        assert!(relative_error(g.data(), w.data()) < 1e-12);
    }

    #[test]
    fn bound_formula() {
        assert!((angle_collapse_bound(0.0) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((angle_collapse_bound(1.0) - 0.2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sampler_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (i, &k) in [0.0, 0.5, 1.0, 2.0].iter().enumerate() {
            let c = angle_collapse_bound(k);
            for d in 0..500 {
                assert!(angle_collapse_sample(8, k, d + i, &mut rng) >= c);
            }
        }
    }
}
