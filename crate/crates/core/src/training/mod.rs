//! Synthetic scenes, the reconstruction objective, exact LAC gradients, the
//! optimiser loop and the linear probe.

mod grad;
mod probe;
mod scenes;

pub use grad::{
    cascade_backward, lac_gradients, lac_gradients_for, min_abs_residual, objective_loss, reconstruction_loss, LossGrad,
    Objective,
};
pub use probe::{fit_linear_probe, softmax, LinearProbe, ProbeConfig};
pub use scenes::{SceneConfig, SceneGenerator, SceneSample, Shape};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, ForwardTrace};
use crate::error::{Error, Result};
use crate::lac::LacParams;
use crate::math::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub checkpoint_every: usize,
    pub objective: Objective,
    /// Negate each visited image with probability ½.
    pub sign_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 1,
            dataset_size: 64,
            checkpoint_every: 250,
            objective: Objective::SinglePath,
            sign_flip: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.adam_epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_abs_beta: f64,
    pub min_gamma: f64,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<(usize, LacParams)>,
}

impl TrainHistory {
    fn median(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Median loss over the first and the last tenth of the run.
    pub fn decile_medians(&self) -> (f64, f64) {
        let n = self.steps.len();
        let k = (n / 10).max(1);
        let mut first: Vec<f64> = self.steps[..k].iter().map(|s| s.loss).collect();
        let mut last: Vec<f64> = self.steps[n - k..].iter().map(|s| s.loss).collect();
        (Self::median(&mut first), Self::median(&mut last))
    }
}

pub fn param_summary(p: &LacParams) -> (f64, f64, f64, f64) {
    let mut betas = Vec::new();
    let mut gammas = Vec::new();
    for s in p.sites() {
        betas.extend(p.site(s).beta.iter().map(|b| b.abs()));
        gammas.extend_from_slice(&p.site(s).gamma);
    }
    let mean_abs_beta = betas.iter().sum::<f64>() / betas.len() as f64;
    let max_abs_beta = betas.iter().cloned().fold(0.0, f64::max);
    let mean_gamma = gammas.iter().sum::<f64>() / gammas.len() as f64;
    let min_gamma = gammas.iter().cloned().fold(f64::INFINITY, f64::min);
    (mean_abs_beta, max_abs_beta, mean_gamma, min_gamma)
}

/// Adam on the deepest-stage reconstruction loss, starting from `γ = 1, β = 0`.
/// Images are visited in an order drawn from `seed`, each negated with
/// probability ½ when `sign_flip` is set; per-step gradients are
/// reduced over the batch in index order.
pub fn train_lac(
    enc: &Encoder,
    images: &[Tensor],
    epsilon: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LacParams, TrainHistory)> {
    if images.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Invalid("training needs images and a positive batch size".into()));
    }
    // Slot 2i holds image i, slot 2i+1 its negation.
    let pool: Vec<Tensor> = if cfg.sign_flip {
        images.iter().flat_map(|x| [x.clone(), x.scale(-1.0)]).collect()
    } else {
        images.to_vec()
    };
    let traces: Vec<ForwardTrace> = crate::par::map_slice(&pool, |x| enc.forward(x))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut params = LacParams::init(enc, epsilon);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg);
    let mut order = crate::rng::stream(seed, "train");
    let mut history = TrainHistory {
        steps: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
    };
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; flat.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let mut i = order.random_range(0..images.len());
            if cfg.sign_flip {
                i = 2 * i + usize::from(order.random::<bool>());
            }
            let lg = lac_gradients_for(enc, &traces[i], &params, &pool[i], cfg.objective)?;
            loss += lg.loss / cfg.batch_size as f64;
            for (g, v) in grad.iter_mut().zip(&lg.grad) {
                *g += v / cfg.batch_size as f64;
            }
        }
        adam.step(&mut flat, &grad);
        params.set_flat(&flat)?;
        let (mean_abs_beta, _, _, min_gamma) = param_summary(&params);
        history.steps.push(StepRecord {
            step,
            loss,
            mean_abs_beta,
            min_gamma,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            history.checkpoints.push((step + 1, params.clone()));
        }
    }
    Ok((params, history))
}
