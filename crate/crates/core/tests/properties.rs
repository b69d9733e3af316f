use proptest::prelude::*;
use syq_core::inference::{pack_codes, unpack_codes};
use syq_core::subgroups::scale_codes;
use syq_core::{
    apply_diagonal_scale, build_subgroups, complexity_report, compute_threshold, init_scales, is_symmetric,
    layerwise_scale, matrix_to_weights, quantize_activation, quantize_weights, reshape_to_matrix, ste_weight_grad,
    ActQuantConfig, Codebook, Granularity, LayerKind, LayerShape, QuantMode, ScaleVector, ScalingMethod, Tensor4,
};

fn conv_shape() -> impl Strategy<Value = LayerShape> {
    (1usize..5, 1usize..4, 1usize..5, 1usize..6).prop_map(|(k, i, n, f)| LayerShape::conv(k, i, n, f).unwrap())
}

fn granularity() -> impl Strategy<Value = Granularity> {
    prop_oneof![
        Just(Granularity::Pixel),
        Just(Granularity::Row),
        Just(Granularity::Layer)
    ]
}

fn mode() -> impl Strategy<Value = QuantMode> {
    prop_oneof![Just(QuantMode::Binary), Just(QuantMode::Ternary)]
}

fn weights_for(shape: LayerShape) -> impl Strategy<Value = (LayerShape, Vec<f64>)> {
    prop::collection::vec(-2.0f64..2.0, shape.z() as usize).prop_map(move |w| (shape, w))
}

proptest! {
    #[test]
    fn codes_follow_sign_and_mask(w in prop::collection::vec(-3.0f64..3.0, 1..200), m in mode()) {
        let eta = compute_threshold(&w, m).unwrap();
        let mq = quantize_weights(&w, eta).unwrap();
        for ((&v, &q), &mask) in w.iter().zip(&mq.q).zip(&mq.mask) {
            prop_assert_eq!(mask == 1, v.abs() >= eta);
            let sign = if v < 0.0 { -1 } else { 1 };
            prop_assert_eq!(q, sign * mask as i8);
            prop_assert!(m.code_base().contains(&q));
        }
        if m == QuantMode::Binary {
            prop_assert_eq!(mq.zero_count(), 0);
        }
    }

    #[test]
    fn realized_codebooks_are_symmetric(
        (shape, w) in conv_shape().prop_flat_map(weights_for),
        g in granularity(),
        m in mode(),
    ) {
        let sg = build_subgroups(&shape, LayerKind::Conv, g).unwrap();
        let alpha = init_scales(&w, &sg).unwrap();
        let mq = quantize_weights(&w, compute_threshold(&w, m).unwrap()).unwrap();
        let w_hat = scale_codes(&mq.q, &alpha, &sg).unwrap();
        for members in sg.members() {
            let codes: Vec<i8> = members.iter().map(|&j| mq.q[j]).collect();
            if !(codes.contains(&1) && codes.contains(&-1)) {
                continue;
            }
            let book = Codebook::new(members.iter().map(|&j| w_hat[j]).collect()).unwrap();
            prop_assert!(is_symmetric(&book), "{:?}", book.values());
        }
    }

    #[test]
    fn pack_unpack_is_a_bijection(codes in prop::collection::vec(prop_oneof![Just(-1i8), Just(0), Just(1)], 0..300)) {
        let packed = pack_codes(&codes).unwrap();
        prop_assert_eq!(packed.len(), codes.len().div_ceil(4));
        prop_assert_eq!(unpack_codes(&packed, codes.len()).unwrap(), codes);
    }

    #[test]
    fn matrix_reshape_round_trips((shape, w) in conv_shape().prop_flat_map(weights_for), g in granularity()) {
        let dims = shape.conv_weight_dims();
        let t = Tensor4::new(dims, w).unwrap();
        let m = reshape_to_matrix(&t, g).unwrap();
        prop_assert_eq!(m.rows(), g.group_count(shape.k));
        prop_assert_eq!(matrix_to_weights(&m, dims, g).unwrap(), t);
    }

    #[test]
    fn diagonal_scaling_matches_per_weight_scaling(
        (shape, w) in conv_shape().prop_flat_map(weights_for),
        g in granularity(),
        m in mode(),
    ) {
        let sg = build_subgroups(&shape, LayerKind::Conv, g).unwrap();
        let alpha = init_scales(&w, &sg).unwrap();
        let mq = quantize_weights(&w, compute_threshold(&w, m).unwrap()).unwrap();
        let dims = shape.conv_weight_dims();
        let q = Tensor4::new(dims, mq.q.iter().map(|&c| c as f64).collect()).unwrap();
        let scaled = apply_diagonal_scale(&reshape_to_matrix(&q, g).unwrap(), &alpha).unwrap();
        let back = matrix_to_weights(&scaled, dims, g).unwrap();
        let direct = scale_codes(&mq.q, &alpha, &sg).unwrap();
        prop_assert_eq!(back.as_slice(), direct.as_slice());
    }

    #[test]
    fn doubling_alpha_doubles_weight_gradient(
        (shape, w) in conv_shape().prop_flat_map(weights_for),
        g in granularity(),
    ) {
        let sg = build_subgroups(&shape, LayerKind::Conv, g).unwrap();
        let alpha = init_scales(&w, &sg).unwrap();
        let doubled = ScaleVector::new(alpha.as_slice().iter().map(|a| 2.0 * a).collect()).unwrap();
        let upstream: Vec<f64> = w.iter().map(|v| v.sin()).collect();
        let a = ste_weight_grad(&upstream, &alpha, &sg).unwrap();
        let b = ste_weight_grad(&upstream, &doubled, &sg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn layerwise_scale_is_homogeneous(w in prop::collection::vec(-5.0f64..5.0, 1..100), c in -4.0f64..4.0) {
        let scaled: Vec<f64> = w.iter().map(|v| c * v).collect();
        let lhs = layerwise_scale(&scaled);
        let rhs = c.abs() * layerwise_scale(&w);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn activation_quantizer_properties(x in prop::collection::vec(-2.0f64..20.0, 1..100), k in 1u8..=8, f_off in 0u8..=8) {
        let cfg = ActQuantConfig::new(k, k.saturating_sub(f_off)).unwrap();
        let q = quantize_activation(&x, &cfg);
        prop_assert_eq!(quantize_activation(&q, &cfg), q.clone());
        let half_step = cfg.step() / 2.0;
        for (&v, &g) in x.iter().zip(&q) {
            prop_assert!((0.0..=cfg.upper_bound()).contains(&g));
            if (0.0..=cfg.upper_bound()).contains(&v) {
                prop_assert!((g - v).abs() <= half_step);
            }
        }
        let mut sorted = x.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let qs = quantize_activation(&sorted, &cfg);
        prop_assert!(qs.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn symmetric_methods_share_op_count(shape in conv_shape(), n4 in 1usize..8) {
        let shape = LayerShape::conv(shape.k, shape.i, 4 * n4, shape.f).unwrap();
        let scalars: Vec<u64> = [ScalingMethod::Layer, ScalingMethod::Row, ScalingMethod::Pixel, ScalingMethod::Grouping]
            .iter()
            .map(|&m| complexity_report(&shape, m).unwrap().scalars)
            .collect();
        prop_assert!(scalars.windows(2).all(|p| p[0] <= p[1]), "{:?}", scalars);
        for m in ScalingMethod::ALL {
            let r = complexity_report(&shape, m).unwrap();
            let want = if m.is_symmetric() { shape.p() } else { shape.p() + shape.z() };
            prop_assert_eq!(r.ops, want);
        }
    }
}
