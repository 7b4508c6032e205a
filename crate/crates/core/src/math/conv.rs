use serde::{Deserialize, Serialize};

use super::tensor::{Mask, Tensor};
use crate::error::{check_len, Error, Result};

/// Bias-free 2-D convolution with explicit zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    kernel: Tensor,
    stride: usize,
    padding: usize,
}

/// Shape-only description of a [`ConvLayer`], used in configs and container headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, stride: usize, padding: usize) -> Result<Self> {
        check_len("kernel rank", 4, kernel.shape().len())?;
        let (kh, kw) = (kernel.shape()[2], kernel.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Invalid(format!("kernel must be odd-sized, got {kh}x{kw}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Invalid(format!("stride must be 1 or 2, got {stride}")));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            c_in: self.c_in(),
            c_out: self.c_out(),
            kernel: self.kernel_hw().0,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Same geometry, every kernel entry negated.
    pub fn negated(&self) -> ConvLayer {
        ConvLayer {
            kernel: self.kernel.scale(-1.0),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        let p2 = 2 * self.padding;
        if h + p2 < kh {
            return Err(Error::Shape {
                axis: "height (padded input smaller than kernel)",
                expected: kh,
                got: h + p2,
            });
        }
        if w + p2 < kw {
            return Err(Error::Shape {
                axis: "width (padded input smaller than kernel)",
                expected: kw,
                got: w + p2,
            });
        }
        Ok(((h + p2 - kh) / self.stride + 1, (w + p2 - kw) / self.stride + 1))
    }
}

pub fn conv2d(x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (ci, h, w) = x.dims3()?;
    check_len("input channels", layer.c_in(), ci)?;
    let (ho, wo) = layer.output_hw(h, w)?;
    let (kh, kw) = layer.kernel_hw();
    let (s, p) = (layer.stride as isize, layer.padding as isize);
    let co = layer.c_out();
    let k = layer.kernel.data();
    let xd = x.data();
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        let out_c = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ci {
            let xc = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[((o * ci + i) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out_c[oy * wo..(oy + 1) * wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *ov += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![co, ho, wo], out))
}

/// Upsample `g` by inserting `stride − 1` zeros between neighbours along each axis.
pub fn zero_insert(g: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = g.dims3()?;
    let (hu, wu) = ((h - 1) * stride + 1, (w - 1) * stride + 1);
    let mut u = vec![0.0; c * hu * wu];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                u[(ch * hu + y * stride) * wu + x * stride] = g.data()[(ch * h + y) * w + x];
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, hu, wu], u))
}

/// Transpose of [`conv2d`]: zero-insertion by the stride, then correlation with the
/// spatially flipped, channel-transposed kernel, cropped by the padding. Taps that
/// land on inserted zeros are skipped; they would only add exact zeros.
pub fn conv2d_adjoint(g: &Tensor, layer: &ConvLayer, input_shape: (usize, usize, usize)) -> Result<Tensor> {
    let (ci, h, w) = input_shape;
    check_len("input channels", layer.c_in(), ci)?;
    let (ho, wo) = layer.output_hw(h, w)?;
    let (gc, gh, gw) = g.dims3()?;
    check_len("gradient channels", layer.c_out(), gc)?;
    check_len("gradient height", ho, gh)?;
    check_len("gradient width", wo, gw)?;
    let s = layer.stride;
    let u = zero_insert(g, s)?;
    let (hu, wu) = (u.shape()[1], u.shape()[2]);
    let (kh, kw) = layer.kernel_hw();
    let p = layer.padding as isize;
    let co = layer.c_out();
    let k = layer.kernel.data();
    let ud = u.data();
    let mut out = vec![0.0; ci * h * w];
    for i in 0..ci {
        let out_c = &mut out[i * h * w..(i + 1) * h * w];
        for o in 0..co {
            let uc = &ud[o * hu * wu..(o + 1) * hu * wu];
            // x̄[y, x] += w[ky, kx] · u[y + p − ky, x + p − kx]
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = k[((o * ci + i) * kh + ky) * kw + kx];
                    for y in 0..h {
                        let r = y as isize + p - ky as isize;
                        if r < 0 || r >= hu as isize || r as usize % s != 0 {
                            continue;
                        }
                        let urow = &uc[r as usize * wu..(r as usize + 1) * wu];
                        let orow = &mut out_c[y * w..(y + 1) * w];
                        let shift = p - kx as isize;
                        // first x with x + shift >= 0 and on the stride lattice
                        let mut x = (-shift).max(0) as usize;
                        while (x as isize + shift) as usize % s != 0 {
                            x += 1;
                        }
                        while x < w {
                            let col = (x as isize + shift) as usize;
                            if col >= wu {
                                break;
                            }
                            orow[x] += wv * urow[col];
                            x += s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![ci, h, w], out))
}

/// Transpose of [`conv2d`] in scatter form: every nonzero entry of `g` deposits its
/// kernel footprint. Independent of [`conv2d_adjoint`] and cheap for sparse `g`.
pub fn conv2d_adjoint_scatter(g: &Tensor, layer: &ConvLayer, input_shape: (usize, usize, usize)) -> Result<Tensor> {
    let (ci, h, w) = input_shape;
    check_len("input channels", layer.c_in(), ci)?;
    let (ho, wo) = layer.output_hw(h, w)?;
    let (gc, gh, gw) = g.dims3()?;
    check_len("gradient channels", layer.c_out(), gc)?;
    check_len("gradient height", ho, gh)?;
    check_len("gradient width", wo, gw)?;
    let (kh, kw) = layer.kernel_hw();
    let (s, p) = (layer.stride as isize, layer.padding as isize);
    let k = layer.kernel.data();
    let mut out = vec![0.0; ci * h * w];
    for o in 0..gc {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g.data()[(o * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for i in 0..ci {
                    for ky in 0..kh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[(i * h + iy as usize) * w + ix as usize] +=
                                k[((o * ci + i) * kh + ky) * kw + kx] * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![ci, h, w], out))
}

pub fn relu(x: &Tensor) -> (Tensor, Mask) {
    let bits: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
    let mask = Mask::new(x.shape().to_vec(), bits).expect("mask shape follows tensor");
    (y, mask)
}

/// Zeroes `g` outside the mask; the subgradient at exactly zero is zero.
pub fn relu_backward(g: &Tensor, mask: &Mask) -> Tensor {
    let mut out = g.clone();
    mask.apply(&mut out);
    out
}

/// Per-channel spatial mean of a `[C, H, W]` tensor.
pub fn gap(x: &Tensor) -> Result<Vec<f64>> {
    let (c, _, _) = x.dims3()?;
    Ok((0..c).map(|ch| super::tensor::mean(x.channel(ch))).collect())
}

/// Orthogonal projection onto the zero-mean hyperplane (all entries form one group).
pub fn project_zero_mean(v: &Tensor) -> Tensor {
    let m = super::tensor::mean(v.data());
    v.map(|x| x - m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(co: usize, ci: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
        ConvLayer::new(Tensor::random_normal(&[co, ci, k, k], 1.0, rng), s, p).unwrap()
    }

    /// Sliding-window reference written independently of the production loop order.
    fn naive_conv(x: &Tensor, l: &ConvLayer) -> Tensor {
        let (ci, h, w) = x.dims3().unwrap();
        let (ho, wo) = l.output_hw(h, w).unwrap();
        let (kh, kw) = l.kernel_hw();
        let mut out = Tensor::zeros(&[l.c_out(), ho, wo]);
        for o in 0..l.c_out() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * l.stride + ky) as isize - l.padding as isize;
                                let ix = (ox * l.stride + kx) as isize - l.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let kv = l.kernel.data()[((o * ci + i) * kh + ky) * kw + kx];
                                    acc += kv * x.data()[(i * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn scalar_kernel() {
        let l = ConvLayer::new(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(), 1, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(conv2d(&x, &l).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_is_identity_both_ways() {
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let l = ConvLayer::new(k, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random_normal(&[1, 4, 4], 1.0, &mut rng);
        assert_eq!(conv2d(&x, &l).unwrap(), x);
        assert_eq!(conv2d_adjoint(&x, &l, (1, 4, 4)).unwrap(), x);
    }

    #[test]
    fn stride2_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = layer(3, 2, 3, 2, 1, &mut rng);
        let x = Tensor::random_normal(&[2, 8, 8], 1.0, &mut rng);
        let y = conv2d(&x, &l).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
        let r = naive_conv(&x, &l);
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dot_product_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p, k, h) in &[(1, 1, 3, 7), (2, 1, 3, 8), (2, 0, 3, 9), (2, 2, 5, 7), (1, 0, 1, 5)] {
            let l = layer(4, 3, k, s, p, &mut rng);
            let x = Tensor::random_normal(&[3, h, h], 1.0, &mut rng);
            let y0 = conv2d(&x, &l).unwrap();
            let y = Tensor::random_normal(y0.shape(), 1.0, &mut rng);
            let lhs = y0.dot(&y);
            let rhs = x.dot(&conv2d_adjoint(&y, &l, (3, h, h)).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * x.norm() * y.norm(), "s={s} p={p}");
            let a = conv2d_adjoint(&y, &l, (3, h, h)).unwrap();
            let b = conv2d_adjoint_scatter(&y, &l, (3, h, h)).unwrap();
            assert!(a.sub(&b).max_abs() <= 1e-12 * a.max_abs());
        }
    }

    #[test]
    fn nail_bed_support_on_stride_lattice() {
        // A single output delta pulled back through a 1x1 stride-2 kernel lands on the lattice only.
        let l = ConvLayer::new(Tensor::full(&[1, 1, 1, 1], 1.0), 2, 0).unwrap();
        let g = Tensor::full(&[1, 4, 4], 1.0);
        let back = conv2d_adjoint(&g, &l, (1, 8, 8)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let on = y % 2 == 0 && x % 2 == 0;
                assert_eq!(back.data()[y * 8 + x] != 0.0, on);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = layer(2, 3, 3, 1, 1, &mut rng);
        let x = Tensor::zeros(&[2, 4, 4]);
        let e = conv2d(&x, &l).unwrap_err().to_string();
        assert!(e.contains("input channels"), "{e}");
        let l = layer(2, 3, 5, 1, 0, &mut rng);
        let e = conv2d(&Tensor::zeros(&[3, 3, 8]), &l).unwrap_err().to_string();
        assert!(e.contains("height"), "{e}");
    }

    #[test]
    fn even_kernels_and_stride3_rejected() {
        assert!(ConvLayer::new(Tensor::zeros(&[1, 1, 2, 2]), 1, 0).is_err());
        assert!(ConvLayer::new(Tensor::zeros(&[1, 1, 3, 3]), 3, 0).is_err());
    }

    #[test]
    fn relu_sign_cases() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, m) = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(m.bits(), &[false, false, true]);
        let g = Tensor::full(&[3], 5.0);
        assert_eq!(relu_backward(&g, &m).data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn gap_and_projector() {
        let x = Tensor::new(vec![2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(gap(&x).unwrap(), vec![3.0, 0.0]);
        assert_eq!(gap(&x.map(f64::abs)).unwrap(), vec![3.0, 1.0]);
        let v = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(project_zero_mean(&v).data(), &[-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(project_zero_mean(&Tensor::full(&[5], 2.5)).max_abs(), 0.0);
    }
}
