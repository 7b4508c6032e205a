//! A small pre-norm self-attention stack over deepest-stage tokens, scalar
//! readouts with hand-written reverse mode, and their pixel-space rendering
//! through the unchanged LAC cascade.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, ForwardTrace};
use crate::error::{check_len, Error, Result};
use crate::lac::{cascade_from_seed, LacParams};
use crate::math::{Matrix, Tensor};
use crate::training::{softmax, Adam, TrainConfig};

/// Row `t = r·W + s` holds the channel vector `h[:, r, s]`.
pub fn tokens_from_features(h: &Tensor) -> Result<Matrix> {
    let (c, hh, ww) = h.dims3()?;
    let p = hh * ww;
    Ok(Matrix::from_fn(p, c, |t, ch| h.data()[ch * p + t]))
}

pub fn features_from_tokens(tokens: &Matrix, height: usize, width: usize) -> Result<Tensor> {
    check_len("token count", height * width, tokens.rows())?;
    let (p, c) = (tokens.rows(), tokens.cols());
    let mut data = vec![0.0; c * p];
    for t in 0..p {
        for ch in 0..c {
            data[ch * p + t] = tokens.get(t, ch);
        }
    }
    Tensor::new(vec![c, height, width], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub blocks: usize,
    /// Projection entries are drawn with std `init_scale / √d`.
    pub init_scale: f64,
    pub norm_epsilon: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub train_size: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            init_scale: 0.5,
            norm_epsilon: 1e-6,
            steps: 150,
            learning_rate: 1e-2,
            train_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Single-head blocks `T ← T + softmax(QKᵀ/√d) V` with `Q, K, V` read from the
/// token-normalised input, followed by a mean-pool linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub blocks: Vec<Block>,
    pub classifier: Matrix,
    pub bias: Vec<f64>,
    pub norm_epsilon: f64,
    pub heads: usize,
    pub trained: bool,
}

struct BlockCache {
    input: Matrix,
    centred: Matrix,
    radius: Vec<f64>,
    n: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
}

pub struct AttentionForward {
    /// `outputs[ℓ]` is the token matrix after block `ℓ`.
    pub outputs: Vec<Matrix>,
    pub attention: Vec<Matrix>,
    caches: Vec<BlockCache>,
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(i, j))
}

fn add_into(acc: &mut Matrix, b: &Matrix) {
    for (x, y) in acc.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

impl AttentionHead {
    pub fn zeros(dim: usize, blocks: usize, classes: usize, norm_epsilon: f64) -> Self {
        let z = || Matrix::zeros(dim, dim);
        Self {
            blocks: (0..blocks).map(|_| Block { wq: z(), wk: z(), wv: z() }).collect(),
            classifier: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
            norm_epsilon,
            heads: 1,
            trained: false,
        }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, classes: usize, cfg: &AttentionConfig, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, cfg.init_scale / (dim as f64).sqrt()).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut head = Self::zeros(dim, cfg.blocks, classes, cfg.norm_epsilon);
        for b in &mut head.blocks {
            for m in [&mut b.wq, &mut b.wk, &mut b.wv] {
                for v in m.data_mut() {
                    *v = normal.sample(rng);
                }
            }
        }
        Ok(head)
    }

    pub fn dim(&self) -> usize {
        self.classifier.cols()
    }

    pub fn classes(&self) -> usize {
        self.classifier.rows()
    }

    fn norm_tokens(&self, x: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
        let d = x.cols() as f64;
        let mut centred = x.clone();
        let mut radius = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let row = x.row(t);
            let mu = row.iter().sum::<f64>() / d;
            let mut ss = 0.0;
            for j in 0..x.cols() {
                let u = row[j] - mu;
                centred.set(t, j, u);
                ss += u * u;
            }
            radius.push((ss + d * self.norm_epsilon).sqrt());
        }
        let n = Matrix::from_fn(x.rows(), x.cols(), |t, j| d.sqrt() * centred.get(t, j) / radius[t]);
        (n, centred, radius)
    }

    pub fn forward(&self, tokens: &Matrix) -> Result<AttentionForward> {
        check_len("token dim", self.dim(), tokens.cols())?;
        let scale_qk = 1.0 / (self.dim() as f64).sqrt();
        let mut x = tokens.clone();
        let mut out = AttentionForward {
            outputs: Vec::with_capacity(self.blocks.len()),
            attention: Vec::with_capacity(self.blocks.len()),
            caches: Vec::with_capacity(self.blocks.len()),
        };
        for b in &self.blocks {
            let (n, centred, radius) = self.norm_tokens(&x);
            let q = n.matmul(&b.wq);
            let k = n.matmul(&b.wk);
            let v = n.matmul(&b.wv);
            let s = q.matmul(&k.transpose());
            let rows: Vec<Vec<f64>> = (0..s.rows())
                .map(|i| softmax(&s.row(i).iter().map(|z| z * scale_qk).collect::<Vec<_>>()))
                .collect();
            let a = Matrix::from_rows(&rows);
            let y = add(&x, &a.matmul(&v));
            out.attention.push(a.clone());
            out.caches.push(BlockCache {
                input: x,
                centred,
                radius,
                n,
                q,
                k,
                v,
                a,
            });
            out.outputs.push(y.clone());
            x = y;
        }
        Ok(out)
    }

    pub fn logits(&self, fwd: &AttentionForward, tokens: &Matrix) -> Vec<f64> {
        let last = fwd.outputs.last().unwrap_or(tokens);
        let pooled: Vec<f64> = (0..last.cols())
            .map(|j| (0..last.rows()).map(|t| last.get(t, j)).sum::<f64>() / last.rows() as f64)
            .collect();
        let z = self.classifier.matvec(&pooled);
        z.iter().zip(&self.bias).map(|(a, b)| a + b).collect()
    }

    /// Reverse pass. `d_outputs[ℓ]` is the gradient arriving at block `ℓ`'s output
    /// from outside the stack. Returns the token gradient and, per block,
    /// `(dWq, dWk, dWv)`.
    pub fn backward(&self, fwd: &AttentionForward, d_outputs: &[Option<Matrix>]) -> (Matrix, Vec<[Matrix; 3]>) {
        let nb = self.blocks.len();
        let d = self.dim();
        let scale_qk = 1.0 / (d as f64).sqrt();
        let rows = fwd.caches.first().map_or(0, |c| c.input.rows());
        let mut g = Matrix::zeros(rows, d);
        let mut grads: Vec<[Matrix; 3]> = Vec::with_capacity(nb);
        for l in (0..nb).rev() {
            if let Some(extra) = &d_outputs[l] {
                add_into(&mut g, extra);
            }
            let c = &fwd.caches[l];
            let b = &self.blocks[l];
            // out = x + A V
            let da = g.matmul(&c.v.transpose());
            let dv = c.a.transpose().matmul(&g);
            let mut ds = Matrix::zeros(rows, rows);
            for i in 0..rows {
                let dot: f64 = (0..rows).map(|j| da.get(i, j) * c.a.get(i, j)).sum();
                for j in 0..rows {
                    ds.set(i, j, c.a.get(i, j) * (da.get(i, j) - dot) * scale_qk);
                }
            }
            let dq = ds.matmul(&c.k);
            let dk = ds.transpose().matmul(&c.q);
            let nt = c.n.transpose();
            grads.push([nt.matmul(&dq), nt.matmul(&dk), nt.matmul(&dv)]);
            let mut dn = dq.matmul(&b.wq.transpose());
            add_into(&mut dn, &dk.matmul(&b.wk.transpose()));
            add_into(&mut dn, &dv.matmul(&b.wv.transpose()));
            let sd = (d as f64).sqrt();
            let mut dx = g;
            for t in 0..rows {
                let r = c.radius[t];
                let u = c.centred.row(t);
                let un: f64 = (0..d).map(|j| u[j] * dn.get(t, j)).sum();
                let du: Vec<f64> = (0..d).map(|j| sd * (dn.get(t, j) / r - u[j] * un / (r * r * r))).collect();
                let mean = du.iter().sum::<f64>() / d as f64;
                for j in 0..d {
                    dx.set(t, j, dx.get(t, j) + du[j] - mean);
                }
            }
            g = dx;
        }
        grads.reverse();
        (g, grads)
    }

    pub fn num_params(&self) -> usize {
        let d = self.dim();
        self.blocks.len() * 3 * d * d + self.classifier.data().len() + self.bias.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            out.extend_from_slice(b.wq.data());
            out.extend_from_slice(b.wk.data());
            out.extend_from_slice(b.wv.data());
        }
        out.extend_from_slice(self.classifier.data());
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("attention parameter count", self.num_params(), flat.len())?;
        let mut it = flat.iter().copied();
        for b in &mut self.blocks {
            for m in [&mut b.wq, &mut b.wk, &mut b.wv] {
                for v in m.data_mut() {
                    *v = it.next().expect("length checked");
                }
            }
        }
        for v in self.classifier.data_mut() {
            *v = it.next().expect("length checked");
        }
        for v in &mut self.bias {
            *v = it.next().expect("length checked");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Readout {
    /// `½‖A_ℓ(T)‖²_F` after block `layer`.
    Layer { layer: usize },
    /// `½‖A_ℓ(T)_t‖²` for one token.
    Token { layer: usize, token: usize },
    /// Classifier logit.
    Logit { class: usize },
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Readout::Layer { layer } => write!(f, "layer{layer}"),
            Readout::Token { layer, token } => write!(f, "layer{layer}-token{token}"),
            Readout::Logit { class } => write!(f, "logit{class}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReadoutSeed {
    pub kind: Readout,
    pub value: f64,
    /// Shaped like the deepest feature map.
    pub seed: Tensor,
}

fn check_readout(head: &AttentionHead, tokens: usize, kind: Readout) -> Result<()> {
    let nb = head.blocks.len();
    match kind {
        Readout::Layer { layer } | Readout::Token { layer, .. } if layer >= nb => Err(Error::OutOfRange {
            what: "attention layer",
            got: layer,
            len: nb,
        }),
        Readout::Token { token, .. } if token >= tokens => Err(Error::OutOfRange {
            what: "token",
            got: token,
            len: tokens,
        }),
        Readout::Logit { class } if class >= head.classes() => Err(Error::OutOfRange {
            what: "class",
            got: class,
            len: head.classes(),
        }),
        _ => Ok(()),
    }
}

/// Value of the readout and its gradient with respect to the input tokens.
pub fn readout_gradient(head: &AttentionHead, tokens: &Matrix, kind: Readout) -> Result<(f64, Matrix)> {
    check_readout(head, tokens.rows(), kind)?;
    let fwd = head.forward(tokens)?;
    let nb = head.blocks.len();
    let mut d_out: Vec<Option<Matrix>> = vec![None; nb];
    let value = match kind {
        Readout::Layer { layer } => {
            let y = &fwd.outputs[layer];
            d_out[layer] = Some(y.clone());
            0.5 * y.data().iter().map(|v| v * v).sum::<f64>()
        }
        Readout::Token { layer, token } => {
            let y = &fwd.outputs[layer];
            let g = Matrix::from_fn(y.rows(), y.cols(), |t, j| if t == token { y.get(t, j) } else { 0.0 });
            d_out[layer] = Some(g);
            0.5 * y.row(token).iter().map(|v| v * v).sum::<f64>()
        }
        Readout::Logit { class } => {
            let p = tokens.rows() as f64;
            let g = Matrix::from_fn(tokens.rows(), tokens.cols(), |_, j| head.classifier.get(class, j) / p);
            if nb == 0 {
                return Ok((head.logits(&fwd, tokens)[class], g));
            }
            d_out[nb - 1] = Some(g);
            head.logits(&fwd, tokens)[class]
        }
    };
    let (g, _) = head.backward(&fwd, &d_out);
    Ok((value, g))
}

/// `∂(readout)/∂h_{L−1}` as a feature-shaped seed.
pub fn readout_seed(head: &AttentionHead, trace: &ForwardTrace, kind: Readout) -> Result<ReadoutSeed> {
    let h = trace.deepest();
    let (_, hh, ww) = h.dims3()?;
    let tokens = tokens_from_features(h)?;
    let (value, g) = readout_gradient(head, &tokens, kind)?;
    Ok(ReadoutSeed {
        kind,
        value,
        seed: features_from_tokens(&g, hh, ww)?,
    })
}

/// Render a readout seed through the same cascade used for channel inversions.
pub fn attend_visualize(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, seed: &ReadoutSeed) -> Result<Tensor> {
    Ok(cascade_from_seed(enc, trace, params, trace.depth() - 1, &seed.seed, false)?.v)
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionTrainRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn sample_loss_grad(head: &AttentionHead, tokens: &Matrix, label: usize) -> Result<(f64, bool, Vec<f64>)> {
    let fwd = head.forward(tokens)?;
    let z = head.logits(&fwd, tokens);
    let p = softmax(&z);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    let hit = crate::interference::rank_descending(&z)[0] == label;
    let dz: Vec<f64> = (0..z.len()).map(|c| p[c] - if c == label { 1.0 } else { 0.0 }).collect();
    let last = fwd.outputs.last().unwrap_or(tokens);
    let np = tokens.rows() as f64;
    let pooled: Vec<f64> = (0..last.cols())
        .map(|j| (0..last.rows()).map(|t| last.get(t, j)).sum::<f64>() / np)
        .collect();
    let d_cls = Matrix::from_fn(z.len(), pooled.len(), |c, j| dz[c] * pooled[j]);
    let d_pool = head.classifier.transpose().matvec(&dz);
    let d_last = Matrix::from_fn(tokens.rows(), tokens.cols(), |_, j| d_pool[j] / np);
    let nb = head.blocks.len();
    let mut grad = Vec::with_capacity(head.num_params());
    if nb > 0 {
        let mut d_out = vec![None; nb];
        d_out[nb - 1] = Some(d_last);
        let (_, gb) = head.backward(&fwd, &d_out);
        for [a, b, c] in &gb {
            grad.extend_from_slice(a.data());
            grad.extend_from_slice(b.data());
            grad.extend_from_slice(c.data());
        }
    }
    grad.extend_from_slice(d_cls.data());
    grad.extend_from_slice(&dz);
    Ok((loss, hit, grad))
}

/// Full-batch Adam on mean cross-entropy over pooled final tokens.
pub fn train_attention(
    features: &[Tensor],
    labels: &[usize],
    classes: usize,
    cfg: &AttentionConfig,
    seed: u64,
) -> Result<(AttentionHead, Vec<AttentionTrainRecord>)> {
    check_len("label count", features.len(), labels.len())?;
    let first = features.first().ok_or_else(|| Error::Invalid("attention training needs samples".into()))?;
    let dim = first.dims3()?.0;
    let tokens: Vec<Matrix> = features.iter().map(tokens_from_features).collect::<Result<_>>()?;
    let mut head = AttentionHead::random(dim, classes, cfg, &mut crate::rng::stream(seed, "attention"))?;
    let adam_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        ..TrainConfig::default()
    };
    let mut flat = head.to_flat();
    let mut adam = Adam::new(flat.len(), &adam_cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    let n = tokens.len() as f64;
    for step in 0..cfg.steps {
        let per = crate::par::map_range(tokens.len(), |i| sample_loss_grad(&head, &tokens[i], labels[i]));
        let mut grad = vec![0.0; flat.len()];
        let (mut loss, mut hits) = (0.0, 0usize);
        for r in per {
            let (l, hit, g) = r?;
            loss += l / n;
            hits += usize::from(hit);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / n;
            }
        }
        adam.step(&mut flat, &grad);
        head.set_flat(&flat)?;
        history.push(AttentionTrainRecord {
            step,
            loss,
            accuracy: hits as f64 / n,
        });
    }
    head.trained = true;
    Ok((head, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tokens(seed: u64, rows: usize, cols: usize) -> Matrix {
        Matrix::random_normal(rows, cols, &mut crate::rng::stream(seed, "tok"))
    }

    #[test]
    fn token_round_trip() {
        let h = Tensor::random_normal(&[32, 4, 4], 1.0, &mut crate::rng::stream(1, "h"));
        let t = tokens_from_features(&h).unwrap();
        assert_eq!(t.rows(), 16);
        assert_eq!(t.get(1 * 4 + 2, 5), h.data()[5 * 16 + 6]);
        assert_eq!(features_from_tokens(&t, 4, 4).unwrap(), h);
    }

    #[test]
    fn zero_projections_are_identity() {
        let head = AttentionHead::zeros(8, 3, 2, 1e-6);
        let t = random_tokens(2, 5, 8);
        let f = head.forward(&t).unwrap();
        assert_eq!(f.outputs.last().unwrap(), &t);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = AttentionConfig::default();
        let head = AttentionHead::random(8, 2, &cfg, &mut crate::rng::stream(3, "w")).unwrap();
        let f = head.forward(&random_tokens(4, 1, 8)).unwrap();
        assert!(f.attention.iter().all(|a| (a.get(0, 0) - 1.0).abs() < 1e-15));
    }

    #[test]
    fn readout_gradients_match_finite_differences() {
        let cfg = AttentionConfig::default();
        let mut head = AttentionHead::random(8, 3, &cfg, &mut crate::rng::stream(5, "w")).unwrap();
        head.classifier = Matrix::random_normal(3, 8, &mut crate::rng::stream(6, "c"));
        let t = random_tokens(7, 6, 8);
        for kind in [
            Readout::Layer { layer: 1 },
            Readout::Token { layer: 2, token: 4 },
            Readout::Logit { class: 2 },
        ] {
            let (_, g) = readout_gradient(&head, &t, kind).unwrap();
            let h = 1e-6;
            let mut fd = Matrix::zeros(t.rows(), t.cols());
            for i in 0..t.data().len() {
                let mut a = t.clone();
                a.data_mut()[i] += h;
                let mut b = t.clone();
                b.data_mut()[i] -= h;
                let fa = readout_gradient(&head, &a, kind).unwrap().0;
                let fb = readout_gradient(&head, &b, kind).unwrap().0;
                fd.data_mut()[i] = (fa - fb) / (2.0 * h);
            }
            let diff = Matrix::from_fn(t.rows(), t.cols(), |i, j| g.get(i, j) - fd.get(i, j));
            let rel = diff.frobenius() / g.frobenius().max(fd.frobenius());
            assert!(rel <= 1e-5, "{kind}: rel {rel}");
        }
    }

    #[test]
    fn token_readouts_sum_to_layer_readout() {
        let cfg = AttentionConfig::default();
        let head = AttentionHead::random(8, 2, &cfg, &mut crate::rng::stream(8, "w")).unwrap();
        let t = random_tokens(9, 6, 8);
        let (_, layer) = readout_gradient(&head, &t, Readout::Layer { layer: 2 }).unwrap();
        let mut sum = Matrix::zeros(6, 8);
        for token in 0..6 {
            add_into(&mut sum, &readout_gradient(&head, &t, Readout::Token { layer: 2, token }).unwrap().1);
        }
        let diff = Matrix::from_fn(6, 8, |i, j| sum.get(i, j) - layer.get(i, j));
        assert!(diff.frobenius() <= 1e-10 * layer.frobenius().max(1.0));
    }

    #[test]
    fn zero_features_zero_projections_give_zero_seed() {
        let head = AttentionHead::zeros(8, 3, 2, 1e-6);
        let (v, g) = readout_gradient(&head, &Matrix::zeros(4, 8), Readout::Layer { layer: 2 }).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = AttentionConfig {
            blocks: 2,
            ..AttentionConfig::default()
        };
        let mut head = AttentionHead::random(6, 3, &cfg, &mut crate::rng::stream(10, "w")).unwrap();
        head.classifier = Matrix::random_normal(3, 6, &mut crate::rng::stream(11, "c"));
        let t = random_tokens(12, 5, 6);
        let (_, _, g) = sample_loss_grad(&head, &t, 1).unwrap();
        let flat = head.to_flat();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            let mut a = head.clone();
            let mut f = flat.clone();
            f[i] += h;
            a.set_flat(&f).unwrap();
            let la = sample_loss_grad(&a, &t, 1).unwrap().0;
            f[i] -= 2.0 * h;
            a.set_flat(&f).unwrap();
            let lb = sample_loss_grad(&a, &t, 1).unwrap().0;
            let fd = (la - lb) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
        }
        assert!(worst <= 1e-5, "worst {worst}");
    }
}
