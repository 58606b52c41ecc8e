use coalesce::census::fit_power_law;
use coalesce::continuation::*;
use coalesce::detect::*;
use coalesce::linalg::*;
use coalesce::pencil::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spd(n: usize, entries: &[f64], shift: f64) -> SymMatrix {
    let m = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
    SymMatrix::new(&m * m.transpose() + DMatrix::identity(n, n) * shift)
}

fn sym(n: usize, entries: &[f64]) -> SymMatrix {
    SymMatrix::new(DMatrix::from_fn(n, n, |i, j| entries[i * n + j]))
}

fn pencil_strategy() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (2usize..=8).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-1.0..1.0f64, n * n),
            prop::collection::vec(-1.0..1.0f64, n * n),
        )
    })
}

proptest! {
    #[test]
    fn decode_recovers_odd_counts(counts in prop::collection::vec(0u32..6, 1..12)) {
        let d = signature_from_counts(&counts);
        prop_assert_eq!(d.iter().filter(|&&s| s < 0).count() % 2, 0);
        let flags = decode_signature(&d).unwrap();
        let odd: Vec<bool> = counts.iter().map(|c| c % 2 == 1).collect();
        prop_assert_eq!(flags, odd);
    }

    #[test]
    fn cholesky_reconstructs((n, m, _) in pencil_strategy()) {
        let b = spd(n, &m, 0.1);
        let l = cholesky(&b).unwrap();
        let back = l.l() * l.l().transpose();
        prop_assert!((back - b.as_matrix()).amax() <= 1e-12 * b.as_matrix().amax());
    }

    #[test]
    fn sqrt_squares_back((n, m, _) in pencil_strategy()) {
        let b = spd(n, &m, 0.1);
        let s = spd_sqrt(&b).unwrap();
        let sq = s.as_matrix() * s.as_matrix();
        prop_assert!((sq - b.as_matrix()).amax() <= 1e-11 * b.as_matrix().amax());
        prop_assert!(cholesky(&s).is_ok());
    }

    #[test]
    fn generalized_decomposition_is_consistent((n, m, a) in pencil_strategy()) {
        let b = spd(n, &m, 0.5);
        let a = sym(n, &a);
        let e = gen_eig_ordered(&a, &b).unwrap();
        let v = &e.vectors;
        let orth = v.transpose() * b.as_matrix() * v - DMatrix::<f64>::identity(n, n);
        prop_assert!(orth.amax() <= 1e-11);
        let res = a.as_matrix() * v - b.as_matrix() * v * DMatrix::from_diagonal(&e.values);
        prop_assert!(res.amax() <= 1e-11 * (1.0 + e.values.amax()) * b.as_matrix().amax());
        prop_assert!(e.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sign_correction_recovers_flips(
        (n, m, a) in pencil_strategy(),
        flips in prop::collection::vec(any::<bool>(), 8),
        noise in prop::collection::vec(-1e-3..1e-3f64, 64),
    ) {
        let b = spd(n, &m, 0.5);
        let v = gen_eig_ordered(&sym(n, &a), &b).unwrap().vectors;
        let s0: Vec<f64> = flips[..n].iter().map(|&f| if f { -1.0 } else { 1.0 }).collect();
        let pred = &v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s0.clone()))
            + DMatrix::from_fn(n, n, |i, j| noise[i * 8 + j]);
        let sc = sign_correct(&v, &b, &pred, 0.1).unwrap();
        prop_assert_eq!(sc.signs, s0);
    }

    #[test]
    fn prediction_parts_have_their_symmetry((n, m, a) in pencil_strategy(), da in prop::collection::vec(-1e-2..1e-2f64, 64)) {
        let b = spd(n, &m, 0.5);
        let a0 = sym(n, &a);
        let e = gen_eig_ordered(&a0, &b).unwrap();
        prop_assume!(!e.degenerate);
        let state = EigenPoint { t: 0.0, v: e.vectors, lambda: e.values, h_next: 0.1 };
        let a1 = SymMatrix::new(a0.as_matrix() + DMatrix::from_fn(n, n, |i, j| da[i * 8 + j]));
        let b1 = b.scale(1.01);
        let pred = predict(&state, &a1, &b1).unwrap();
        prop_assert!((&pred.h + pred.h.transpose()).amax() == 0.0);
        prop_assert!(pred.h.diagonal().amax() == 0.0);
        prop_assert!((&pred.p - pred.p.transpose()).amax() <= 1e-15);
    }

    #[test]
    fn fit_is_scale_consistent(p in 0.5..3.0f64, c in 0.01..2.0f64, k in 0.1..10.0f64,
                               wiggle in prop::collection::vec(-0.05..0.05f64, 6)) {
        let pts: Vec<(f64, f64)> = wiggle.iter().enumerate()
            .map(|(i, w)| { let n = 10.0 + 5.0 * i as f64; (n, c * n.powf(p) * (1.0 + w)) })
            .collect();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(n, y)| (n, k * y)).collect();
        let f = fit_power_law(&pts).unwrap();
        let g = fit_power_law(&scaled).unwrap();
        prop_assert!((f.p - g.p).abs() <= 1e-10);
        prop_assert!((g.c / f.c - k).abs() <= 1e-10 * k);
        prop_assert!((f.rmsd - g.rmsd).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_boxes_conserve_parity(eps in -0.2..0.2f64, x0 in -0.6..-0.1f64, y0 in -0.6..-0.1f64,
                                   w in 0.3..0.8f64, h in 0.3..0.8f64, sx in 0.2..0.8f64, sy in 0.2..0.8f64) {
        let p = analytic_ci_pencil(eps);
        let cfg = ContinuationConfig::default();
        let parent = Rect::new(x0, x0 + w, y0, y0 + h);
        let (mx, my) = (x0 + sx * w, y0 + sy * h);
        let children = [
            Rect::new(x0, mx, y0, my), Rect::new(mx, x0 + w, y0, my),
            Rect::new(x0, mx, my, y0 + h), Rect::new(mx, x0 + w, my, y0 + h),
        ];
        let Ok((ps, _)) = box_signature(&p, &parent, &cfg) else { return Ok(()); };
        let mut acc = false;
        for c in &children {
            let Ok((s, _)) = box_signature(&p, c, &cfg) else { return Ok(()); };
            acc ^= s.pair_flags[0];
        }
        prop_assert_eq!(acc, ps.pair_flags[0]);
        let (cx, cy) = p.intersection();
        prop_assert_eq!(ps.pair_flags[0], parent.contains(cx, cy));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sgplus_loops_are_involutions(seed in 0u64..1000, cx in 0.5..2.5f64, cy in 0.5..5.5f64, r in 0.05..0.4f64) {
        let real = sgplus_generate(6, 5, 0.45, seed).unwrap();
        let cfg = ContinuationConfig::default();
        let once = LoopPath::circle(cx, cy, r);
        let Ok(single) = trace_loop(&real, &once, &cfg) else { return Ok(()); };
        prop_assert_eq!(single.d.iter().filter(|&&s| s < 0).count() % 2, 0);
        let det0 = single.trace.start.v.determinant().signum();
        prop_assert!(single.trace.points.iter().all(|p| p.v.determinant().signum() == det0));
        let twice = trace_loop(&real, &once.repeated(2), &cfg).unwrap();
        prop_assert!(twice.d.iter().all(|&s| s == 1));
    }
}
