use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::PixelMask;
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    /// Area of the shape with size parameter `a`, in pixels.
    fn area(self, a: f64) -> f64 {
        match self {
            Shape::Disk => std::f64::consts::PI * a * a / 4.0,
            Shape::Square => a * a,
            Shape::Triangle => a * a / 2.0,
            Shape::Cross => 5.0 * a * a / 9.0,
        }
    }

    /// Membership of offset `(dy, dx)` from the centre for size `a`.
    fn contains(self, a: f64, dy: f64, dx: f64) -> bool {
        let r = a / 2.0;
        match self {
            Shape::Disk => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Triangle => {
                // apex up; height a, base a
                let t = (dy + r) / a;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Cross => {
                let arm = a / 6.0;
                (dy.abs() <= r && dx.abs() <= arm) || (dx.abs() <= r && dy.abs() <= arm)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub size: [usize; 2],
    pub background_basis: usize,
    pub shapes: Vec<Shape>,
    /// Texture frequency band per class, cycles per image width.
    pub texture_bands: Vec<[f64; 2]>,
    pub foreground_fraction: [f64; 2],
    pub background_amplitude: f64,
    pub foreground_amplitude: f64,
    /// Spread of the per-draw foreground colour around its class hue.
    pub color_jitter: f64,
    /// Constant added to the foreground texture before colouring.
    pub texture_offset: f64,
    /// Negate each draw with probability ½. LAC training applies its own flip
    /// augmentation, so this is only needed for symmetric analysis sets.
    pub sign_flip: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            size: [32, 32],
            background_basis: 6,
            shapes: vec![Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross],
            texture_bands: vec![[1.0, 2.0], [3.0, 4.0], [5.0, 6.5], [8.0, 10.0]],
            foreground_fraction: [0.1, 0.4],
            background_amplitude: 0.3,
            foreground_amplitude: 1.0,
            color_jitter: 0.2,
            texture_offset: 3.0,
            sign_flip: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid("scene needs at least 2 classes".into()));
        }
        if self.shapes.len() != self.num_classes || self.texture_bands.len() != self.num_classes {
            return Err(Error::Invalid(format!(
                "need one shape and one texture band per class ({} classes, {} shapes, {} bands)",
                self.num_classes,
                self.shapes.len(),
                self.texture_bands.len()
            )));
        }
        for (i, a) in self.shapes.iter().enumerate() {
            if self.shapes[..i].contains(a) {
                return Err(Error::Invalid(format!("shape {a:?} used by two classes")));
            }
        }
        let [lo, hi] = self.foreground_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Invalid(format!("foreground fraction band {lo}..{hi} is not inside (0, 1)")));
        }
        if self.color_jitter < 0.0 || self.background_amplitude < 0.0 {
            return Err(Error::Invalid("amplitudes and colour jitter must be non-negative".into()));
        }
        if self.size[0] < 8 || self.size[1] < 8 {
            return Err(Error::Invalid("scene size must be at least 8x8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    pub image: Tensor,
    pub foreground: PixelMask,
    pub label: usize,
}

/// Shared smooth background basis plus per-draw foreground objects.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    config: SceneConfig,
    seed: u64,
    basis: Vec<Tensor>,
}

impl SceneGenerator {
    pub fn new(config: &SceneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [h, w] = config.size;
        let mut r = rng::stream(seed, "scene-basis");
        let tau = std::f64::consts::TAU;
        let basis = (0..config.background_basis)
            .map(|_| {
                let fy = r.random_range(0..=2) as f64;
                let fx = r.random_range(0..=2) as f64;
                let phase = tau * r.random::<f64>();
                let color: Vec<f64> = (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                let mut t = Tensor::zeros(&[3, h, w]);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let arg = tau * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                            t.data_mut()[(c * h + y) * w + x] = color[c] * arg.cos();
                        }
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            seed,
            basis,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    /// Draw `index`; the label cycles through the classes so any prefix is balanced.
    pub fn sample(&self, index: u64) -> SceneSample {
        let cfg = &self.config;
        let label = (index % cfg.num_classes as u64) as usize;
        let mut r = rng::indexed(self.seed, "scene", index);
        let [h, w] = cfg.size;
        let mut img = Tensor::zeros(&[3, h, w]);
        for b in &self.basis {
            let a: f64 = cfg.background_amplitude * r.sample::<f64, _>(StandardNormal);
            img.axpy(a, b);
        }
        let (mask, _) = draw_mask(cfg, label, &mut r);
        let texture = texture(cfg, label, &mut r);
        let hue = class_hue(label, cfg.num_classes);
        let color: Vec<f64> = hue
            .iter()
            .map(|v| v + cfg.color_jitter * r.sample::<f64, _>(StandardNormal))
            .collect();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) {
                        img.data_mut()[(c * h + y) * w + x] =
                            cfg.foreground_amplitude * color[c] * (cfg.texture_offset + texture[y * w + x]);
                    }
                }
            }
        }
        let flip = cfg.sign_flip && r.random::<bool>();
        for c in 0..3 {
            let plane = img.channel_mut(c);
            let mu = plane.iter().sum::<f64>() / plane.len() as f64;
            for v in plane.iter_mut() {
                *v -= mu;
                if flip {
                    *v = -*v;
                }
            }
        }
        SceneSample {
            image: img,
            foreground: mask,
            label,
        }
    }

    pub fn dataset(&self, start: u64, count: usize) -> Vec<SceneSample> {
        crate::par::map_range(count, |i| self.sample(start + i as u64))
    }
}

/// Unit chroma vector (orthogonal to grey) at angle `2π k / K`, so every class
/// has a colour of equal strength and none is defined by the absence of chroma.
fn class_hue(label: usize, classes: usize) -> [f64; 3] {
    let a = std::f64::consts::TAU * label as f64 / classes as f64;
    let u = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let v = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    let (s, c) = a.sin_cos();
    [c * u[0] + s * v[0], c * u[1] + s * v[1], c * u[2] + s * v[2]]
}

fn draw_mask(cfg: &SceneConfig, label: usize, r: &mut ChaCha8Rng) -> (PixelMask, f64) {
    let [h, w] = cfg.size;
    let total = (h * w) as f64;
    let [lo, hi] = cfg.foreground_fraction;
    let shape = cfg.shapes[label];
    let mut last = (PixelMask::empty(h, w), 0.0);
    for _ in 0..64 {
        let target = lo + (hi - lo) * r.random::<f64>();
        let a = (target * total / shape.area(1.0)).sqrt();
        let half = a / 2.0;
        let cy = if h as f64 > a { half + (h as f64 - a) * r.random::<f64>() } else { h as f64 / 2.0 };
        let cx = if w as f64 > a { half + (w as f64 - a) * r.random::<f64>() } else { w as f64 / 2.0 };
        let m = PixelMask::from_fn(h, w, |y, x| shape.contains(a, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx));
        let frac = m.count() as f64 / total;
        if (lo..=hi).contains(&frac) {
            return (m, frac);
        }
        last = (m, frac);
    }
    last
}

fn texture(cfg: &SceneConfig, label: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let [h, w] = cfg.size;
    let [flo, fhi] = cfg.texture_bands[label];
    let f = flo + (fhi - flo) * r.random::<f64>();
    let theta = std::f64::consts::PI * r.random::<f64>();
    let phase = std::f64::consts::TAU * r.random::<f64>();
    let (s, c) = theta.sin_cos();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (std::f64::consts::TAU * f * (x * c + y * s) / w as f64 + phase).cos()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_zero_mean_and_band() {
        let cfg = SceneConfig::default();
        let g = SceneGenerator::new(&cfg, 3).unwrap();
        let a = g.sample(7);
        let b = g.sample(7);
        assert_eq!(a.image, b.image);
        assert_eq!(a.foreground, b.foreground);
        for i in 0..40 {
            let s = g.sample(i);
            for c in 0..3 {
                let m: f64 = s.image.channel(c).iter().sum::<f64>() / 1024.0;
                assert!(m.abs() <= 1e-12);
            }
            let frac = s.foreground.count() as f64 / 1024.0;
            assert!((0.1..=0.4).contains(&frac), "fraction {frac}");
            assert_eq!(s.label, (i % 4) as usize);
        }
    }

    #[test]
    fn rejects_duplicate_shapes() {
        let cfg = SceneConfig {
            shapes: vec![Shape::Disk, Shape::Disk, Shape::Triangle, Shape::Cross],
            ..SceneConfig::default()
        };
        assert!(SceneGenerator::new(&cfg, 0).is_err());
    }
}
