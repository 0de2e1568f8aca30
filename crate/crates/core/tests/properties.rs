use proptest::prelude::*;

use edanet_core::analyzer::{effective_kernel, step_shapes};
use edanet_core::blocks::{make_eda_module, make_erf_module, make_non_asym_module, BlockKind};
use edanet_core::imageio::{read_ppm, write_ppm};
use edanet_core::netdef::{build_variant, parse_netspec, serialize_netspec, Variant};
use edanet_core::ops::{
    add, bilinear_resize, concat_channels, conv2d, max_pool2d, relu, transposed_conv2d, ConvGeometry,
};
use edanet_core::runtime::{Param, SplitMix64, WeightStore};
use edanet_core::schedmetrics::{class_weights, mean_iou, poly_lr};
use edanet_core::selftest::{dilation_trial, separability_trial, SEPARABILITY_TOLERANCE};
use edanet_core::{BlockSpec, Kernel, LabelMap, LayerSpec, Shape, Tensor};

fn random(seed: u64, shape: Shape) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::new(shape, (0..shape.numel()).map(|_| rng.next_symmetric(1.0)).collect()).unwrap()
}

fn random_kernel(seed: u64, o: usize, i: usize, kh: usize, kw: usize) -> Kernel {
    let mut rng = SplitMix64::new(seed);
    Kernel::new(o, i, kh, kw, (0..o * i * kh * kw).map(|_| rng.next_symmetric(1.0)).collect(), None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_law(
        h in 1usize..20, w in 1usize..20, kh in 1usize..5, kw in 1usize..5,
        stride in 1usize..4, dilation in 1usize..4, pad_h in 0usize..4, pad_w in 0usize..4,
        cin in 1usize..4, cout in 1usize..4, seed: u64,
    ) {
        let eh = dilation * (kh - 1) + 1;
        let ew = dilation * (kw - 1) + 1;
        prop_assume!(h + 2 * pad_h >= eh && w + 2 * pad_w >= ew);
        let x = random(seed, Shape::chw(cin, h, w));
        let k = random_kernel(seed ^ 1, cout, cin, kh, kw);
        let y = conv2d(&x, &k, ConvGeometry::new(stride, dilation, pad_h, pad_w)).unwrap();
        prop_assert_eq!(y.shape(), Shape::chw(cout, (h + 2 * pad_h - eh) / stride + 1, (w + 2 * pad_w - ew) / stride + 1));
    }

    #[test]
    fn conv_rejects_window_larger_than_input(h in 1usize..6, k in 2usize..8) {
        prop_assume!(k > h);
        let x = random(0, Shape::chw(1, h, h));
        prop_assert!(conv2d(&x, &random_kernel(1, 1, 1, k, k), ConvGeometry::unit()).is_err());
    }

    #[test]
    fn deconv_shape_law(h in 1usize..10, w in 1usize..10, k in 1usize..4, stride in 1usize..4, seed: u64) {
        let x = random(seed, Shape::chw(2, h, w));
        let y = transposed_conv2d(&x, &random_kernel(seed, 3, 2, k, k), stride).unwrap();
        prop_assert_eq!(y.shape(), Shape::chw(3, (h - 1) * stride + k, (w - 1) * stride + k));
    }

    #[test]
    fn max_pool_halves(h in 1usize..16, w in 1usize..16, seed: u64) {
        let x = random(seed, Shape::chw(2, 2 * h, 2 * w));
        let y = max_pool2d(&x, 2, 2, 0).unwrap();
        prop_assert_eq!(y.shape(), Shape::chw(2, h, w));
        for c in 0..2 {
            for yy in 0..h {
                for xx in 0..w {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x.at(0, c, 2 * yy + dy, 2 * xx + dx))
                        .fold(f32::NEG_INFINITY, f32::max);
                    prop_assert_eq!(y.at(0, c, yy, xx), m);
                }
            }
        }
    }

    #[test]
    fn resize_shape_and_constant(h in 1usize..12, w in 1usize..12, oh in 1usize..30, ow in 1usize..30, v in -5.0f32..5.0) {
        let x = Tensor::filled(Shape::chw(2, h, w), v).unwrap();
        let y = bilinear_resize(&x, oh, ow).unwrap();
        prop_assert_eq!(y.shape(), Shape::chw(2, oh, ow));
        prop_assert!(y.data().iter().all(|&u| u == v));
        let r = random(h as u64, Shape::chw(1, h, w));
        prop_assert_eq!(bilinear_resize(&r, h, w).unwrap(), r);
    }

    #[test]
    fn concat_keeps_first_operand(ca in 1usize..6, cb in 1usize..6, h in 1usize..6, w in 1usize..6, seed: u64) {
        let a = random(seed, Shape::chw(ca, h, w));
        let b = random(seed ^ 7, Shape::chw(cb, h, w));
        let c = concat_channels(&a, &b).unwrap();
        prop_assert_eq!(c.shape(), Shape::chw(ca + cb, h, w));
        prop_assert_eq!(c.slice_channels(0, ca).unwrap(), a);
        prop_assert_eq!(c.slice_channels(ca, ca + cb).unwrap(), b);
    }

    #[test]
    fn additive_identity_and_relu(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed: u64) {
        let x = random(seed, Shape::chw(c, h, w));
        prop_assert_eq!(add(&x, &Tensor::zeros(x.shape()).unwrap()).unwrap(), x.clone());
        let r = relu(&x);
        prop_assert!(r.data().iter().zip(x.data()).all(|(a, b)| *a == b.max(0.0)));
    }

    #[test]
    fn separable_kernels_factor(seed: u64, five: bool) {
        let mut rng = SplitMix64::new(seed);
        let err = separability_trial(&mut rng, if five { 5 } else { 3 }).unwrap();
        prop_assert!(err <= SEPARABILITY_TOLERANCE, "relative error {}", err);
    }

    #[test]
    fn dilation_is_zero_insertion(seed: u64, r in 1usize..6, n in prop::sample::select(vec![1usize, 2, 3, 5])) {
        let mut rng = SplitMix64::new(seed);
        prop_assert!(dilation_trial(&mut rng, n, r).unwrap());
        prop_assert_eq!(effective_kernel(n, r), r * (n - 1) + 1);
    }

    #[test]
    fn conv_is_pure(seed: u64) {
        let x = random(seed, Shape::chw(3, 9, 11));
        let k = random_kernel(seed ^ 3, 4, 3, 3, 3);
        let g = ConvGeometry::new(1, 2, 2, 2);
        let a = conv2d(&x, &k, g).unwrap();
        let b = conv2d(&x, &k, g).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn dense_modules_grow_by_growth(cin in 1usize..300, growth in 1usize..64, dilation in 1usize..20) {
        for spec in [BlockSpec::eda(cin, growth, dilation), BlockSpec::eda_non_asym(cin, growth, dilation)] {
            prop_assert_eq!(spec.out_channels - spec.in_channels, growth);
            let layer = LayerSpec::block("m", spec);
            let shapes = step_shapes(&layer, Shape::chw(cin, 8, 8)).unwrap();
            prop_assert_eq!(*shapes.last().unwrap(), Shape::chw(cin + growth, 8, 8));
        }
    }

    #[test]
    fn dense_weight_counts(cin in 1usize..500, dilation in 1usize..17) {
        prop_assert_eq!(make_eda_module("m", cin, 40, dilation).unwrap().conv_weight_count(), cin * 40 + 4 * 3 * 40 * 40);
        prop_assert_eq!(make_non_asym_module("m", cin, 40, dilation).unwrap().conv_weight_count(), cin * 40 + 2 * 9 * 40 * 40);
    }

    #[test]
    fn asymmetric_pair_is_two_thirds(width in 1usize..512) {
        let pair = make_erf_module("e", width, 1).unwrap().conv_weight_count() / 2;
        let square = 9 * width * width;
        prop_assert_eq!(3 * pair, 2 * square);
    }

    #[test]
    fn downsampling_halves(cin in 1usize..64, cout in 1usize..64, h in 1usize..16, w in 1usize..16) {
        prop_assume!(cin != cout);
        let layer = LayerSpec::block("ds", BlockSpec::downsample(cin, cout));
        let shapes = step_shapes(&layer, Shape::chw(cin, 2 * h, 2 * w)).unwrap();
        prop_assert_eq!(*shapes.last().unwrap(), Shape::chw(cout, h, w));
        prop_assert_eq!(BlockSpec::downsample(cin, cout).kind, BlockKind::Downsample);
    }

    #[test]
    fn class_weights_decrease(mut p in prop::collection::vec(0.0f64..=1.0, 2..20)) {
        p.sort_by(f64::total_cmp);
        let w = class_weights(&p, 1.12).unwrap();
        prop_assert!(w.iter().all(|&x| x > 0.0));
        for (i, pair) in w.windows(2).enumerate() {
            if p[i] < p[i + 1] {
                prop_assert!(pair[0] > pair[1]);
            }
        }
    }

    #[test]
    fn poly_lr_monotone_and_linear(base in 1e-6f64..1.0, max in 1u64..10_000, a in 0u64..10_000, b in 0u64..10_000) {
        let (lo, hi) = (a.min(b) % (max + 1), a.max(b) % (max + 1));
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        prop_assert!(poly_lr(base, hi, max, 0.9).unwrap() <= poly_lr(base, lo, max, 0.9).unwrap());
        let scaled = poly_lr(3.0 * base, lo, max, 0.9).unwrap();
        prop_assert!((scaled - 3.0 * poly_lr(base, lo, max, 0.9).unwrap()).abs() <= 1e-12 * scaled.max(1e-300));
    }

    #[test]
    fn iou_ignores_pixel_order_and_class_names(
        pairs in prop::collection::vec((0u32..4, 0u32..4), 1..64),
        rotation in 0usize..64,
        shift in 0u32..4,
    ) {
        let n = pairs.len();
        let pred = LabelMap::new(1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
        let gt = LabelMap::new(1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
        let base = mean_iou(&pred, &gt, 4, None).unwrap();

        let mut rotated = pairs.clone();
        rotated.rotate_left(rotation % n);
        let rp = LabelMap::new(n, 1, rotated.iter().map(|p| p.0).collect()).unwrap();
        let rg = LabelMap::new(n, 1, rotated.iter().map(|p| p.1).collect()).unwrap();
        let permuted = mean_iou(&rp, &rg, 4, None).unwrap();
        prop_assert_eq!(&base, &permuted);

        let relabel = |l: u32| (l + shift) % 4;
        let lp = LabelMap::new(1, n, pairs.iter().map(|p| relabel(p.0)).collect()).unwrap();
        let lg = LabelMap::new(1, n, pairs.iter().map(|p| relabel(p.1)).collect()).unwrap();
        let renamed = mean_iou(&lp, &lg, 4, None).unwrap();
        for c in 0..4u32 {
            prop_assert_eq!(base.per_class[c as usize], renamed.per_class[relabel(c) as usize]);
        }
        prop_assert!((base.mean.unwrap() - renamed.mean.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn netspec_round_trips(v in prop::sample::select(Variant::ALL.to_vec()), classes in 1usize..64, fold: bool) {
        let net = build_variant(v, classes).unwrap();
        let net = if fold { net.without_batch_norm() } else { net };
        let text = serialize_netspec(&net);
        let back = parse_netspec(&text).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(serialize_netspec(&back), text);
    }

    #[test]
    fn weight_files_round_trip(entries in prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(any::<u32>(), 0..20), 0..8)) {
        let mut store = WeightStore::new();
        for (name, bits) in &entries {
            let data: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).collect();
            store.insert(name.clone(), Param::new(vec![data.len()], data).unwrap());
        }
        let bytes = store.to_bytes().unwrap();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn ppm_round_trips(w in 1usize..12, h in 1usize..12, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend((0..w * h * 3).map(|_| (rng.next_u64() >> 56) as u8));
        prop_assert_eq!(write_ppm(&read_ppm(&bytes).unwrap()).unwrap(), bytes);
    }
}
