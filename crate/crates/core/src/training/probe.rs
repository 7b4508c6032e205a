use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{sym_eigen, Matrix, SymMatrix};

/// Multinomial logistic classifier on GAP features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `classes × features`; row `c` is `∂logit_c/∂h`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub ridge: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            iterations: 3000,
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.weights.matvec(h).iter().zip(&self.bias).map(|(a, b)| a + b).collect()
    }

    pub fn probabilities(&self, h: &[f64]) -> Vec<f64> {
        softmax(&self.logits(h))
    }

    pub fn predict(&self, h: &[f64]) -> usize {
        let z = self.logits(h);
        (0..z.len()).fold(0, |best, i| if z[i] > z[best] { i } else { best })
    }

    pub fn class_weights(&self, c: usize) -> Vec<f64> {
        self.weights.row(c).to_vec()
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(h, &y)| self.predict(h) == y).count();
        hits as f64 / labels.len() as f64
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `½λ‖W‖²`. Features are
/// standardised internally and the solution is mapped back to raw feature units.
pub fn fit_linear_probe(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    check_len("label count", features.len(), labels.len())?;
    if features.is_empty() {
        return Err(Error::Invalid("probe needs at least one sample".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::OutOfRange {
            what: "label",
            got: y,
            len: classes,
        });
    }
    let n = features.len();
    let d = features[0].len();
    let mu: Vec<f64> = (0..d).map(|j| features.iter().map(|h| h[j]).sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = features.iter().map(|h| (h[j] - mu[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|h| (0..d).map(|j| (h[j] - mu[j]) / sd[j]).collect())
        .collect();
    // Lipschitz bound: ½ λ_max(ZᵀZ/n) with the bias column, plus λ.
    let gram = SymMatrix::from_fn(d + 1, |a, b| {
        z.iter()
            .map(|r| {
                let x = if a < d { r[a] } else { 1.0 };
                let y = if b < d { r[b] } else { 1.0 };
                x * y
            })
            .sum::<f64>()
            / n as f64
    });
    let lmax = sym_eigen(&gram).values[0];
    let step = 1.0 / (0.5 * lmax + cfg.ridge);
    let mut w = Matrix::zeros(classes, d);
    let mut b = vec![0.0; classes];
    for _ in 0..cfg.iterations {
        let mut gw = Matrix::zeros(classes, d);
        let mut gb = vec![0.0; classes];
        for (x, &y) in z.iter().zip(labels) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + w.row(c).iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            let p = softmax(&logits);
            for c in 0..classes {
                let r = p[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += r / n as f64;
                for j in 0..d {
                    gw.set(c, j, gw.get(c, j) + r * x[j] / n as f64);
                }
            }
        }
        for c in 0..classes {
            b[c] -= step * gb[c];
            for j in 0..d {
                let g = gw.get(c, j) + cfg.ridge * w.get(c, j);
                w.set(c, j, w.get(c, j) - step * g);
            }
        }
    }
    let weights = Matrix::from_fn(classes, d, |c, j| w.get(c, j) / sd[j]);
    let bias: Vec<f64> = (0..classes)
        .map(|c| b[c] - (0..d).map(|j| weights.get(c, j) * mu[j]).sum::<f64>())
        .collect();
    let mut probe = LinearProbe {
        weights,
        bias,
        train_accuracy: 0.0,
    };
    probe.train_accuracy = probe.accuracy(features, labels);
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_two_class() {
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, 0.1 * i as f64]).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let p = fit_linear_probe(&feats, &labels, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(p.train_accuracy, 1.0);
    }

    #[test]
    fn huge_ridge_gives_uniform() {
        let feats: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64, (i % 3) as f64]).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let p = fit_linear_probe(&feats, &labels, 2, &ProbeConfig { ridge: 1e8, iterations: 500 }).unwrap();
        assert!(p.weights.frobenius() < 1e-6);
        let pr = p.probabilities(&feats[0]);
        assert!((pr[0] - 0.5).abs() < 1e-6);
    }
}
