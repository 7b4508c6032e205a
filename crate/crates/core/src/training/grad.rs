use crate::encoder::{Encoder, ForwardTrace};
use crate::error::{check_len, Result};
use crate::lac::{synthesize_from_basis, CascadeTape, LacParams, Site, SpatialBasis};
use crate::math::{mean, Tensor};
use crate::par;

/// `‖X − X̂‖₁`, summed left to right.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor) -> f64 {
    assert_eq!(x.shape(), x_hat.shape(), "loss shape mismatch");
    x.data().iter().zip(x_hat.data()).fold(0.0, |s, (a, b)| s + (a - b).abs())
}

/// Which reconstructions the loss sums over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Deepest stage only.
    #[default]
    SinglePath,
    /// Every stage; kept as a diagnostic for gradient competition between paths.
    MultiPath,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn site_offsets(params: &LacParams) -> impl Fn(Site) -> usize + '_ {
    let sites = params.sites();
    let mut offs = Vec::with_capacity(sites.len());
    let mut acc = 0;
    for &s in &sites {
        offs.push((s, acc));
        acc += 2 * params.site(s).groups();
    }
    move |s| offs.iter().find(|(t, _)| *t == s).expect("known site").1
}

/// Reverse pass through one recorded cascade. `dv` is `∂L/∂Ṽ`; gradients are
/// accumulated into `grad` in the layout of [`LacParams::to_flat`].
pub fn cascade_backward(
    enc: &Encoder,
    trace: &ForwardTrace,
    params: &LacParams,
    tape: &CascadeTape,
    dv: &Tensor,
    grad: &mut [f64],
) -> Result<()> {
    check_len("gradient length", params.num_params(), grad.len())?;
    let offset = site_offsets(params);
    let mut g_out = dv.clone();
    for (i, rec) in tape.records.iter().enumerate().rev() {
        let sp = params.site(rec.site);
        let groups = sp.groups();
        let plane = rec.vhat.len() / groups;
        let off = offset(rec.site);
        let mut du = Tensor::zeros(rec.input.shape());
        for c in 0..groups {
            let g = g_out.channel(c);
            let vh = rec.vhat.channel(c);
            let dgamma = g.iter().zip(vh).fold(0.0, |s, (a, b)| s + a * b);
            let dbeta = g.iter().sum::<f64>();
            grad[off + c] += dgamma;
            grad[off + groups + c] += dbeta;
            let s = rec.scale[c];
            if s == 0.0 {
                continue;
            }
            let mg = mean(g);
            let mgv = dgamma / plane as f64;
            let k = sp.gamma[c] / s;
            for ((d, &gi), &vi) in du.channel_mut(c).iter_mut().zip(g).zip(vh) {
                *d = k * (gi - mg - vi * mgv);
            }
        }
        if i == 0 {
            break;
        }
        g_out = match rec.site {
            Site::Stem => enc.stem_jvp(trace, &du)?,
            Site::Boundary(k) => enc.stage_jvp(trace, k, &du)?,
        };
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn level_loss_grad(
    enc: &Encoder,
    trace: &ForwardTrace,
    params: &LacParams,
    x: &Tensor,
    l: usize,
    grad: &mut [f64],
) -> Result<f64> {
    let basis = SpatialBasis::compute_taped(enc, trace, params, l, true)?;
    let rec = synthesize_from_basis(trace, basis)?;
    let loss = reconstruction_loss(x, &rec.image);
    let dx = x.zip_map(&rec.image, |a, b| -sign(a - b));
    let n = params.num_params();
    let per_channel = par::map_range(rec.basis.entries.len(), |c| -> Result<Option<Vec<f64>>> {
        let e = &rec.basis.entries[c];
        let w = rec.weights[c];
        match &e.tape {
            Some(tape) if w != 0.0 => {
                let mut g = vec![0.0; n];
                cascade_backward(enc, trace, params, tape, &dx.scale(w), &mut g)?;
                Ok(Some(g))
            }
            _ => Ok(None),
        }
    });
    for g in per_channel {
        if let Some(g) = g? {
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    Ok(loss)
}

/// Exact reverse-mode loss gradient with respect to every LAC parameter.
pub fn lac_gradients(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, x: &Tensor) -> Result<LossGrad> {
    lac_gradients_for(enc, trace, params, x, Objective::SinglePath)
}

pub fn lac_gradients_for(
    enc: &Encoder,
    trace: &ForwardTrace,
    params: &LacParams,
    x: &Tensor,
    objective: Objective,
) -> Result<LossGrad> {
    let mut grad = vec![0.0; params.num_params()];
    let deepest = trace.depth() - 1;
    let levels: Vec<usize> = match objective {
        Objective::SinglePath => vec![deepest],
        Objective::MultiPath => (0..=deepest).collect(),
    };
    let mut loss = 0.0;
    for l in levels {
        loss += level_loss_grad(enc, trace, params, x, l, &mut grad)?;
    }
    Ok(LossGrad { loss, grad })
}

/// Loss only, for finite-difference checks.
pub fn objective_loss(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, x: &Tensor, objective: Objective) -> Result<f64> {
    let deepest = trace.depth() - 1;
    let levels: Vec<usize> = match objective {
        Objective::SinglePath => vec![deepest],
        Objective::MultiPath => (0..=deepest).collect(),
    };
    let mut loss = 0.0;
    for l in levels {
        let rec = crate::lac::synthesize(enc, trace, params, l)?;
        loss += reconstruction_loss(x, &rec.image);
    }
    Ok(loss)
}

/// Smallest `|X − X̂|` entry of the deepest reconstruction; FD checks need it away from 0.
pub fn min_abs_residual(enc: &Encoder, trace: &ForwardTrace, params: &LacParams, x: &Tensor) -> Result<f64> {
    let rec = crate::lac::synthesize(enc, trace, params, trace.depth() - 1)?;
    Ok(x.sub(&rec.image).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
}
