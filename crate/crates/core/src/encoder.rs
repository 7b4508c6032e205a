//! Frozen bias-free ReLU encoder with explicit stage structure.
//!
//! Layout for widths `[w₀, …, w_{L−1}]`:
//! `X → stem (stride 2) → ReLU = h_stem → intra₀ → ReLU = h₀`, then for each
//! `l ≥ 1`: `h_{l−1} → transition (stride 2) → ReLU → intra_l → ReLU = h_l`.
//! The stage Jacobian `J_l = ∂h_l/∂h_{l−1}` (with `h_{−1} = h_stem`) therefore
//! crosses at most one stride boundary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{conv2d, conv2d_adjoint, conv2d_adjoint_scatter, gap, relu, ConvLayer, Mask, Tensor};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    /// `[height, width]`
    pub input_size: [usize; 2],
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: [32, 32],
            widths: vec![8, 16, 32],
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.input_channels == 0 {
            return Err(Error::Invalid("encoder widths and input channels must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Invalid(format!("encoder kernel must be odd, got {}", self.kernel)));
        }
        let mut hw = self.input_size;
        for _ in 0..self.widths.len() {
            if hw[0] < 2 || hw[1] < 2 {
                return Err(Error::Invalid(format!(
                    "input size {:?} too small for {} stride-2 boundaries",
                    self.input_size,
                    self.widths.len()
                )));
            }
            hw = [hw[0].div_ceil(2), hw[1].div_ceil(2)];
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// Absent for stage 0, whose downsampling is done by the stem.
    pub transition: Option<ConvLayer>,
    pub intra: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    stem: ConvLayer,
    stages: Vec<Stage>,
}

fn he_layer<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> ConvLayer {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    ConvLayer::new(Tensor::random_normal(&[c_out, c_in, k, k], std, rng), stride, k / 2).expect("valid geometry")
}

/// Frozen He-scaled Gaussian weights drawn from `seed`.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    config.validate()?;
    let mut rng = crate::rng::stream(seed, "encoder");
    let k = config.kernel;
    let w = &config.widths;
    let stem = he_layer(config.input_channels, w[0], k, 2, &mut rng);
    let mut stages = Vec::with_capacity(w.len());
    for l in 0..w.len() {
        let transition = (l > 0).then(|| he_layer(w[l - 1], w[l], k, 2, &mut rng));
        let intra = he_layer(w[l], w[l], k, 1, &mut rng);
        stages.push(Stage { transition, intra });
    }
    Ok(Encoder {
        config: config.clone(),
        stem,
        stages,
    })
}

/// One recorded stage: optional post-transition activation and the stage output.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub mid: Option<(Tensor, Mask)>,
    pub h: Tensor,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub h_stem: Tensor,
    pub mask_stem: Mask,
    pub stages: Vec<StageTrace>,
}

/// A feature level: the stem output or a stage output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Stem,
    Stage(usize),
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Stem => write!(f, "stem"),
            Level::Stage(l) => write!(f, "{l}"),
        }
    }
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn h(&self, l: usize) -> &Tensor {
        &self.stages[l].h
    }

    pub fn level(&self, level: Level) -> &Tensor {
        match level {
            Level::Stem => &self.h_stem,
            Level::Stage(l) => &self.stages[l].h,
        }
    }

    pub fn deepest(&self) -> &Tensor {
        &self.stages[self.stages.len() - 1].h
    }

    /// Plain GAP of the deepest level.
    pub fn gap_features(&self) -> Vec<f64> {
        gap(self.deepest()).expect("rank-3 activations")
    }
}

/// Boolean grid over the input pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_len("pixel mask length", height * width, bits.len())?;
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    /// Pixels where any plane of a `[C, H, W]` tensor exceeds `tol` in magnitude.
    pub fn support(t: &Tensor, tol: f64) -> Self {
        let (c, h, w) = t.dims3().expect("rank-3 tensor");
        let mut m = Self::empty(h, w);
        for ch in 0..c {
            for (b, v) in m.bits.iter_mut().zip(t.channel(ch)) {
                *b |= v.abs() > tol;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn union_with(&mut self, other: &PixelMask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Pixels of `self` not in `other`.
    pub fn minus(&self, other: &PixelMask) -> PixelMask {
        PixelMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect(),
        }
    }
}

/// ℓ1 radius-1 dilation, clipped at the border.
pub fn dilate_one(mask: &PixelMask) -> PixelMask {
    let (h, w) = (mask.height, mask.width);
    PixelMask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            || (y > 0 && mask.get(y - 1, x))
            || (y + 1 < h && mask.get(y + 1, x))
            || (x > 0 && mask.get(y, x - 1))
            || (x + 1 < w && mask.get(y, x + 1))
    })
}

fn shape3(t: &Tensor) -> (usize, usize, usize) {
    t.dims3().expect("rank-3 activations")
}

impl Encoder {
    /// Assemble an encoder from explicit layers (used for constructed counterexamples).
    pub fn from_parts(config: EncoderConfig, stem: ConvLayer, stages: Vec<Stage>) -> Result<Self> {
        config.validate()?;
        check_len("stage count", config.depth(), stages.len())?;
        Ok(Self { config, stem, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn stem(&self) -> &ConvLayer {
        &self.stem
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let [h, w] = self.config.input_size;
        (self.config.input_channels, h, w)
    }

    /// Every layer in a fixed order: stem, then per stage (transition?, intra).
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut out = vec![&self.stem];
        for s in &self.stages {
            if let Some(t) = &s.transition {
                out.push(t);
            }
            out.push(&s.intra);
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        let (c, h, w) = x.dims3()?;
        let (ec, eh, ew) = self.input_shape();
        check_len("input channels", ec, c)?;
        check_len("input height", eh, h)?;
        check_len("input width", ew, w)?;
        let (h_stem, mask_stem) = relu(&conv2d(x, &self.stem)?);
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut prev = h_stem.clone();
        for s in &self.stages {
            let (mid, inner) = match &s.transition {
                Some(t) => {
                    let (a, m) = relu(&conv2d(&prev, t)?);
                    (Some((a.clone(), m)), a)
                }
                None => (None, prev),
            };
            let (h, mask) = relu(&conv2d(&inner, &s.intra)?);
            prev = h.clone();
            stages.push(StageTrace { mid, h, mask });
        }
        Ok(ForwardTrace {
            input: x.clone(),
            h_stem,
            mask_stem,
            stages,
        })
    }

    fn check_level(&self, l: usize) -> Result<()> {
        if l < self.stages.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "level",
                got: l,
                len: self.stages.len(),
            })
        }
    }

    fn input_of(trace: &ForwardTrace, l: usize) -> &Tensor {
        if l == 0 {
            &trace.h_stem
        } else {
            &trace.stages[l - 1].h
        }
    }

    /// `J_lᵀ g`, mapping level `l` to level `l − 1` (the stem for `l = 0`).
    pub fn stage_pullback(&self, trace: &ForwardTrace, l: usize, g: &Tensor) -> Result<Tensor> {
        self.check_level(l)?;
        self.stage_pullback_with(trace, l, g, conv2d_adjoint)
    }

    fn stage_pullback_with(
        &self,
        trace: &ForwardTrace,
        l: usize,
        g: &Tensor,
        adjoint: fn(&Tensor, &ConvLayer, (usize, usize, usize)) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let st = &trace.stages[l];
        let stage = &self.stages[l];
        let mut gm = g.clone();
        st.mask.apply(&mut gm);
        match (&stage.transition, &st.mid) {
            (Some(t), Some((mid, mid_mask))) => {
                let mut a = adjoint(&gm, &stage.intra, shape3(mid))?;
                mid_mask.apply(&mut a);
                adjoint(&a, t, shape3(Self::input_of(trace, l)))
            }
            _ => adjoint(&gm, &stage.intra, shape3(Self::input_of(trace, l))),
        }
    }

    /// Pullback from the stem activations to pixels.
    pub fn stem_pullback(&self, trace: &ForwardTrace, g: &Tensor) -> Result<Tensor> {
        let mut gm = g.clone();
        trace.mask_stem.apply(&mut gm);
        conv2d_adjoint(&gm, &self.stem, self.input_shape())
    }

    /// `J_l dx`, the forward linearisation paired with [`Self::stage_pullback`].
    pub fn stage_jvp(&self, trace: &ForwardTrace, l: usize, dx: &Tensor) -> Result<Tensor> {
        self.check_level(l)?;
        let st = &trace.stages[l];
        let stage = &self.stages[l];
        let inner = match (&stage.transition, &st.mid) {
            (Some(t), Some((_, mid_mask))) => {
                let mut a = conv2d(dx, t)?;
                mid_mask.apply(&mut a);
                a
            }
            _ => dx.clone(),
        };
        let mut out = conv2d(&inner, &stage.intra)?;
        st.mask.apply(&mut out);
        Ok(out)
    }

    pub fn stem_jvp(&self, trace: &ForwardTrace, dx: &Tensor) -> Result<Tensor> {
        let mut out = conv2d(dx, &self.stem)?;
        trace.mask_stem.apply(&mut out);
        Ok(out)
    }

    /// Channel-selective seed `e_c ⊙ h_l`.
    pub fn channel_seed(&self, trace: &ForwardTrace, l: usize, c: usize) -> Result<Tensor> {
        self.check_level(l)?;
        let h = trace.h(l);
        let (cn, _, _) = h.dims3()?;
        if c >= cn {
            return Err(Error::OutOfRange {
                what: "channel",
                got: c,
                len: cn,
            });
        }
        let mut seed = Tensor::zeros(h.shape());
        seed.channel_mut(c).copy_from_slice(h.channel(c));
        Ok(seed)
    }

    /// Pull an arbitrary level-`l` seed all the way to pixels.
    pub fn pullback_to_pixels(&self, trace: &ForwardTrace, l: usize, seed: &Tensor) -> Result<Tensor> {
        self.check_level(l)?;
        let mut g = seed.clone();
        for k in (0..=l).rev() {
            g = self.stage_pullback(trace, k, &g)?;
        }
        self.stem_pullback(trace, &g)
    }

    /// `∇_X ½‖h_{l,c}‖²`.
    pub fn raw_vjp(&self, trace: &ForwardTrace, l: usize, c: usize) -> Result<Tensor> {
        let seed = self.channel_seed(trace, l, c)?;
        self.pullback_to_pixels(trace, l, &seed)
    }

    /// Same map as [`Self::pullback_to_pixels`] (extended to the stem level) computed
    /// with the scatter-form adjoint, whose cost scales with the seed's support.
    pub fn sparse_pullback_to_pixels(&self, trace: &ForwardTrace, level: Level, seed: &Tensor) -> Result<Tensor> {
        let mut g = seed.clone();
        if let Level::Stage(l) = level {
            self.check_level(l)?;
            for k in (0..=l).rev() {
                g = self.stage_pullback_with(trace, k, &g, conv2d_adjoint_scatter)?;
            }
        }
        trace.mask_stem.apply(&mut g);
        conv2d_adjoint_scatter(&g, &self.stem, self.input_shape())
    }
}

/// `E_{l,c} = GAP(|h_{l,c}|) / Σ_c' GAP(|h_{l,c'}|)`, renormalised so the sum is 1.
pub fn simplex_measure(trace: &ForwardTrace, l: usize) -> Result<Vec<f64>> {
    if l >= trace.depth() {
        return Err(Error::OutOfRange {
            what: "level",
            got: l,
            len: trace.depth(),
        });
    }
    simplex_from_activations(trace.h(l))
}

pub fn simplex_from_activations(h: &Tensor) -> Result<Vec<f64>> {
    let g = gap(&h.map(f64::abs))?;
    let total: f64 = g.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all channels at this level are zero".into()));
    }
    let mut e: Vec<f64> = g.iter().map(|v| v / total).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    Ok(e)
}

/// Per-channel effective fields of one level, plus their union.
#[derive(Clone, Debug)]
pub struct LevelFields {
    pub level: Level,
    pub channels: Vec<PixelMask>,
}

impl LevelFields {
    pub fn union(&self) -> PixelMask {
        let (h, w) = (self.channels[0].height, self.channels[0].width);
        let mut u = PixelMask::empty(h, w);
        for m in &self.channels {
            u.union_with(m);
        }
        u
    }
}

/// Support threshold for Jacobian rows.
pub const EF_TOL: f64 = 1e-12;

/// Effective fields of every channel at `level`: union over active positions of
/// the support of the pixel-space Jacobian row of that position.
pub fn level_fields(enc: &Encoder, trace: &ForwardTrace, level: Level) -> Result<LevelFields> {
    let h = trace.level(level);
    let (c, hh, hw) = h.dims3()?;
    let (_, ih, iw) = enc.input_shape();
    let channels = par::map_range(c, |ch| -> Result<PixelMask> {
        let mut mask = PixelMask::empty(ih, iw);
        let act = h.channel(ch);
        for (pos, &v) in act.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            let mut seed = Tensor::zeros(&[c, hh, hw]);
            seed.data_mut()[ch * hh * hw + pos] = 1.0;
            let row = enc.sparse_pullback_to_pixels(trace, level, &seed)?;
            mask.union_with(&PixelMask::support(&row, EF_TOL));
        }
        Ok(mask)
    });
    Ok(LevelFields {
        level,
        channels: channels.into_iter().collect::<Result<_>>()?,
    })
}

pub fn effective_field(enc: &Encoder, trace: &ForwardTrace, l: usize, c: usize) -> Result<PixelMask> {
    enc.check_level(l)?;
    let h = trace.h(l);
    let (cn, hh, hw) = h.dims3()?;
    if c >= cn {
        return Err(Error::OutOfRange {
            what: "channel",
            got: c,
            len: cn,
        });
    }
    let (_, ih, iw) = enc.input_shape();
    let mut mask = PixelMask::empty(ih, iw);
    for (pos, &v) in h.channel(c).iter().enumerate() {
        if v > 0.0 {
            let mut seed = Tensor::zeros(&[cn, hh, hw]);
            seed.data_mut()[c * hh * hw + pos] = 1.0;
            let row = enc.sparse_pullback_to_pixels(trace, Level::Stage(l), &seed)?;
            mask.union_with(&PixelMask::support(&row, EF_TOL));
        }
    }
    Ok(mask)
}

/// Fields for the stem and every stage, computed once and shared by the checks.
#[derive(Clone, Debug)]
pub struct EffectiveFields {
    pub stem: LevelFields,
    pub stages: Vec<LevelFields>,
}

impl EffectiveFields {
    pub fn compute(enc: &Encoder, trace: &ForwardTrace) -> Result<Self> {
        Ok(Self {
            stem: level_fields(enc, trace, Level::Stem)?,
            stages: (0..trace.depth())
                .map(|l| level_fields(enc, trace, Level::Stage(l)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn active_union(&self, l: usize) -> PixelMask {
        self.stages[l].union()
    }

    /// Every field that can leak into the cascade for source stage `l`: the stem
    /// and all stages shallower than `l` must sit inside the level-`l` union.
    pub fn nested_check(&self, l: usize) -> NestedReport {
        let union = self.active_union(l);
        let mut violations = Vec::new();
        let mut violating = PixelMask::empty(union.height, union.width);
        let shallower = std::iter::once(&self.stem).chain(self.stages[..l].iter());
        for lf in shallower {
            for (c, m) in lf.channels.iter().enumerate() {
                let outside = m.minus(&union);
                if !outside.is_empty() {
                    violations.push(NestedViolation {
                        level: lf.level,
                        channel: c,
                        pixels: outside.count(),
                    });
                    violating.union_with(&outside);
                }
            }
        }
        NestedReport {
            level: l,
            holds: violations.is_empty(),
            union,
            violations,
            violating_pixels: violating,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NestedViolation {
    pub level: Level,
    pub channel: usize,
    pub pixels: usize,
}

#[derive(Clone, Debug)]
pub struct NestedReport {
    pub level: usize,
    pub holds: bool,
    pub union: PixelMask,
    pub violations: Vec<NestedViolation>,
    pub violating_pixels: PixelMask,
}

pub fn nested_ef_check(enc: &Encoder, trace: &ForwardTrace, l: usize) -> Result<NestedReport> {
    enc.check_level(l)?;
    let fields = EffectiveFields {
        stem: level_fields(enc, trace, Level::Stem)?,
        stages: (0..=l).map(|k| level_fields(enc, trace, Level::Stage(k))).collect::<Result<_>>()?,
    };
    Ok(fields.nested_check(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup() -> (Encoder, ForwardTrace) {
        let enc = build_encoder(&EncoderConfig::default(), 5).unwrap();
        let x = Tensor::random_normal(&[3, 32, 32], 1.0, &mut rng::stream(9, "test"));
        let tr = enc.forward(&x).unwrap();
        (enc, tr)
    }

    #[test]
    fn shapes_and_determinism() {
        let (enc, tr) = setup();
        assert_eq!(tr.h_stem.shape(), &[8, 16, 16]);
        assert_eq!(tr.h(0).shape(), &[8, 16, 16]);
        assert_eq!(tr.h(1).shape(), &[16, 8, 8]);
        assert_eq!(tr.h(2).shape(), &[32, 4, 4]);
        assert_eq!(enc, build_encoder(&EncoderConfig::default(), 5).unwrap());
        assert_ne!(enc, build_encoder(&EncoderConfig::default(), 6).unwrap());
        assert_eq!(enc.layers().len(), 6);
    }

    #[test]
    fn zero_input_zero_activations() {
        let enc = build_encoder(&EncoderConfig::default(), 1).unwrap();
        let tr = enc.forward(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(tr.stages.iter().all(|s| s.h.max_abs() == 0.0));
        assert!(simplex_measure(&tr, 2).is_err());
    }

    #[test]
    fn stem_is_positively_homogeneous() {
        let (enc, tr) = setup();
        let tr2 = enc.forward(&tr.input.scale(2.5)).unwrap();
        let diff = tr2.h_stem.sub(&tr.h_stem.scale(2.5)).max_abs();
        assert!(diff <= 1e-12 * tr2.h_stem.max_abs());
    }

    #[test]
    fn pullback_pairs_with_jvp() {
        let (enc, tr) = setup();
        let mut r = rng::stream(3, "test");
        for l in 0..3 {
            let input = if l == 0 { &tr.h_stem } else { tr.h(l - 1) };
            let dx = Tensor::random_normal(input.shape(), 1.0, &mut r);
            let g = Tensor::random_normal(tr.h(l).shape(), 1.0, &mut r);
            let lhs = enc.stage_jvp(&tr, l, &dx).unwrap().dot(&g);
            let rhs = dx.dot(&enc.stage_pullback(&tr, l, &g).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
        }
        assert_eq!(enc.stage_pullback(&tr, 1, &Tensor::zeros(&[16, 8, 8])).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn sparse_and_dense_pullbacks_agree() {
        let (enc, tr) = setup();
        let seed = enc.channel_seed(&tr, 2, 4).unwrap();
        let a = enc.pullback_to_pixels(&tr, 2, &seed).unwrap();
        let b = enc.sparse_pullback_to_pixels(&tr, Level::Stage(2), &seed).unwrap();
        assert!(a.sub(&b).max_abs() <= 1e-12 * a.max_abs().max(1.0));
    }

    #[test]
    fn simplex_cases() {
        let mut h = Tensor::zeros(&[3, 2, 2]);
        h.channel_mut(1).fill(2.0);
        assert_eq!(simplex_from_activations(&h).unwrap(), vec![0.0, 1.0, 0.0]);
        let h = Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(simplex_from_activations(&h).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn channel_out_of_range_is_reported() {
        let (enc, tr) = setup();
        let e = enc.raw_vjp(&tr, 2, 32).unwrap_err().to_string();
        assert!(e.contains("channel") && e.contains("0..32"), "{e}");
        assert!(enc.raw_vjp(&tr, 3, 0).is_err());
    }

    #[test]
    fn dilation_cases() {
        assert!(dilate_one(&PixelMask::empty(4, 4)).is_empty());
        let mut m = PixelMask::empty(4, 4);
        m.set(1, 1, true);
        assert_eq!(dilate_one(&m).count(), 5);
        let mut corner = PixelMask::empty(4, 4);
        corner.set(0, 0, true);
        assert_eq!(dilate_one(&corner).count(), 3);
        let d = dilate_one(&m);
        assert!(d.is_subset_of(&dilate_one(&d)));
    }

    #[test]
    fn single_deep_position_field_is_its_cone() {
        let (enc, tr) = setup();
        let h = tr.h(2);
        let pos = (0..16).find(|&p| h.channel(0)[p] > 0.0);
        if let Some(p) = pos {
            let mut seed = Tensor::zeros(&[32, 4, 4]);
            seed.data_mut()[p] = 1.0;
            let dense = enc.pullback_to_pixels(&tr, 2, &seed).unwrap();
            let sparse = enc.sparse_pullback_to_pixels(&tr, Level::Stage(2), &seed).unwrap();
            assert_eq!(PixelMask::support(&dense, EF_TOL), PixelMask::support(&sparse, EF_TOL));
        }
    }
}
