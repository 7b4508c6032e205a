use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lacvis_core::covvol::{effective_rank, greedy_select, spearman, subset_logdet};
use lacvis_core::encoder::{build_encoder, dilate_one, EffectiveFields, EncoderConfig, PixelMask};
use lacvis_core::interference::{ecr, rank_descending};
use lacvis_core::io::{Container, Normalization, Section};
use lacvis_core::lac::{containment_violations, fv_decompose, groupnorm_strip, synthesize, LacParams};
use lacvis_core::math::{
    conv2d, conv2d_adjoint, project_zero_mean, relu, relu_backward, sym_eigen, ConvLayer, Matrix, SymMatrix, Tensor,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..64)
}

fn spd(seed: u64, n: usize) -> SymMatrix {
    let a = Matrix::random_normal(n, n, &mut rng(seed));
    let g = a.gram();
    SymMatrix::from_fn(n, |i, j| g.get(i, j) + if i == j { 0.05 } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_rejects_non_finite(v in vector(), at in 0usize..64, bad in prop::sample::select(vec![f64::NAN, f64::INFINITY, f64::NEG_INFINITY])) {
        let mut v = v;
        let i = at % v.len();
        v[i] = bad;
        prop_assert!(Tensor::new(vec![v.len()], v).is_err());
    }

    #[test]
    fn conv_adjoint_pairing(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]),
                            stride in 1usize..=2, pad in 0usize..3, h in 5usize..12, w in 5usize..12) {
        let mut r = rng(seed);
        let layer = ConvLayer::new(Tensor::random_normal(&[cout, cin, k, k], 1.0, &mut r), stride, pad).unwrap();
        let x = Tensor::random_normal(&[cin, h, w], 1.0, &mut r);
        let y0 = conv2d(&x, &layer).unwrap();
        let y = Tensor::random_normal(y0.shape(), 1.0, &mut r);
        let lhs = y0.dot(&y);
        let rhs = x.dot(&conv2d_adjoint(&y, &layer, (cin, h, w)).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn relu_mask_and_backward(v in vector(), g in vector()) {
        let n = v.len().min(g.len());
        let x = Tensor::new(vec![n], v[..n].to_vec()).unwrap();
        let gt = Tensor::new(vec![n], g[..n].to_vec()).unwrap();
        let (y, mask) = relu(&x);
        let back = relu_backward(&gt, &mask);
        for i in 0..n {
            prop_assert_eq!(mask.bits()[i], x.data()[i] > 0.0);
            prop_assert!(y.data()[i] >= 0.0);
            prop_assert_eq!(back.data()[i], if mask.bits()[i] { gt.data()[i] } else { 0.0 });
        }
    }

    #[test]
    fn zero_mean_projector(v in vector()) {
        let t = Tensor::new(vec![v.len()], v).unwrap();
        let p = project_zero_mean(&t);
        prop_assert!(p.data().iter().sum::<f64>().abs() <= 1e-12 * t.len() as f64 * t.max_abs().max(1.0));
        let pp = project_zero_mean(&p);
        prop_assert!(pp.sub(&p).max_abs() <= 1e-12 * t.max_abs().max(1.0));
    }

    #[test]
    fn strip_moments(v in vector(), gamma in 0.1f64..3.0, neg in any::<bool>(), beta in -2.0f64..2.0) {
        let t = Tensor::new(vec![v.len()], v).unwrap();
        prop_assume!(project_zero_mean(&t).max_abs() > 1e-6);
        let gamma = if neg { -gamma } else { gamma };
        let out = groupnorm_strip(&t, gamma, beta, 0.0).unwrap();
        let n = t.len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        prop_assert!((mean - beta).abs() <= 1e-12 * (1.0 + beta.abs() + gamma.abs()));
        let centred = out.map(|x| x - mean);
        prop_assert!((centred.norm() - gamma.abs() * n.sqrt()).abs() <= 1e-12 * gamma.abs() * n.sqrt() * 10.0);
        let dir = project_zero_mean(&t);
        let cos = centred.dot(&dir) / (centred.norm() * dir.norm());
        prop_assert!((cos - gamma.signum()).abs() <= 1e-12);
    }

    #[test]
    fn eigen_reconstructs(seed in any::<u64>(), n in 1usize..9) {
        let s = spd(seed, n);
        let e = sym_eigen(&s);
        prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let dense = s.to_dense();
        let scale = e.values[0].abs().max(1.0);
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| e.vectors.get(i, k) * e.values[k] * e.vectors.get(j, k)).sum();
                prop_assert!((r - dense.get(i, j)).abs() <= 1e-9 * scale);
            }
        }
    }

    /// Schur-complement pivots never increase and multiply to the subset determinant.
    #[test]
    fn greedy_pivots_nonincreasing(seed in any::<u64>(), n in 2usize..10, k in 1usize..10) {
        let s = spd(seed, n);
        let k = k.min(n);
        let sel = greedy_select(&s, k).unwrap();
        prop_assert!(sel.pivots.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-10)));
        let ld: f64 = sel.pivots.iter().map(|p| p.ln()).sum();
        prop_assert!((ld - subset_logdet(&s, &sel.indices)).abs() <= 1e-9 * ld.abs().max(1.0));
        let mut sorted = sel.indices.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn effective_rank_range(seed in any::<u64>(), n in 1usize..9) {
        let r = effective_rank(&spd(seed, n));
        prop_assert!(r >= 1.0 - 1e-12 && r <= n as f64 + 1e-9);
    }

    #[test]
    fn spearman_symmetric_bounded(a in vector(), b in vector()) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let r = spearman(a, b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - spearman(b, a)).abs() <= 1e-12);
    }

    #[test]
    fn rank_descending_is_sorted_permutation(v in vector()) {
        let order = rank_descending(&v);
        prop_assert!(order.windows(2).all(|w| v[w[0]] >= v[w[1]]));
        let mut seen = order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
    }

    #[test]
    fn ecr_is_a_fraction(seed in any::<u64>(), density in 0.0f64..1.0) {
        let mut r = rng(seed);
        let vs: Vec<Tensor> = (0..3).map(|_| Tensor::random_normal(&[2, 6, 5], 1.0, &mut r)).collect();
        let refs: Vec<&Tensor> = vs.iter().collect();
        let bits: Vec<bool> = (0..30).map(|i| ((i as f64 * 0.618_034 + seed as f64 * 1e-3).fract()) < density).collect();
        let m = PixelMask::from_bits(6, 5, bits).unwrap();
        for e in ecr(&refs, &m).unwrap() {
            prop_assert!((0.0..=1.0).contains(&e));
        }
        let full = ecr(&refs, &PixelMask::full(6, 5)).unwrap();
        prop_assert!(full.iter().all(|&e| (e - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn dilation_contains_mask(bits in prop::collection::vec(any::<bool>(), 48)) {
        let m = PixelMask::from_bits(6, 8, bits).unwrap();
        let d = dilate_one(&m);
        prop_assert!(m.is_subset_of(&d));
        prop_assert!(dilate_one(&d).count() >= d.count());
    }

    #[test]
    fn normalization_round_trip(v in vector()) {
        let t = Tensor::new(vec![v.len()], v).unwrap();
        let n = Normalization::of(&t);
        let step = n.max_abs.max(1e-300) / 127.5;
        for &x in t.data() {
            prop_assert!((n.decode(n.encode(x)) - x).abs() <= step / 2.0 + 1e-12);
        }
    }

    #[test]
    fn container_round_trip(tag in "[a-z_]{1,12}", values in prop::collection::vec(-1e6f64..1e6, 0..40), k in 0u32..1000) {
        let mut c = Container::default();
        c.sections.push(Section { tag: tag.clone(), header: serde_json::json!({ "k": k }), values: values.clone() });
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.section(&tag).unwrap().values.clone(), values);
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        let mut longer = bytes;
        longer.push(0);
        prop_assert!(Container::from_bytes(&longer).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Every synthesis stays inside the dilated active field union when the
    /// nested check holds, whatever the LAC parameters.
    #[test]
    fn containment_for_arbitrary_parameters(seed in any::<u64>(), level in 0usize..3) {
        let enc = build_encoder(&EncoderConfig::default(), seed).unwrap();
        let mut r = rng(seed ^ 0x5eed);
        let x = Tensor::random_normal(&[3, 32, 32], 1.0, &mut r);
        let trace = enc.forward(&x).unwrap();
        let fields = EffectiveFields::compute(&enc, &trace).unwrap();
        prop_assume!(fields.nested_check(level).holds);
        let mut p = LacParams::init(&enc, 1e-5);
        let flat: Vec<f64> = p.to_flat().iter().enumerate().map(|(i, v)| v + ((i * 7919) as f64).sin()).collect();
        p.set_flat(&flat).unwrap();
        let img = synthesize(&enc, &trace, &p, level).unwrap().image;
        prop_assert!(containment_violations(&img, &fields.active_union(level)).unwrap().is_empty());
        let d = fv_decompose(&enc, &trace, &p, level).unwrap();
        for (pl, b) in d.bound.iter().enumerate() {
            let inf = d.residual.channel(pl).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!((inf - b).abs() <= 1e-12 * b.max(1.0));
        }
    }
}
