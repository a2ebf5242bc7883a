use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use relate::datagen::{
    fit_whitening_samples, gen_shifted_dots, gen_shifted_dots_1d, normalize, seeded_rng, shift_image, Label, Shape,
};
use relate::energy_isa::symmetric_orthonormalize;
use relate::infer::flow_from_warp;
use relate::spectral::{detector_response, make_2d_shift, make_cyclic_shift, shared_eigenbasis, DetectorBank};
use relate::tensor_core::{expand_factored, oracle_encode, FactoredParams};
use relate::training::NormConstraint;

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn gaussian_mat(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generators_are_deterministic(seed in any::<u64>(), h in 3usize..8, w in 3usize..8, n in 1usize..20) {
        let a = gen_shifted_dots(n, h, w, 0.3, 1, true, seed).unwrap();
        let b = gen_shifted_dots(n, h, w, 0.3, 1, true, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shift_labels_describe_the_pairs(seed in any::<u64>(), h in 3usize..9, w in 3usize..9, wrap in any::<bool>()) {
        let m = (h.min(w) - 1).min(2);
        let batch = gen_shifted_dots(15, h, w, 0.4, m, wrap, seed).unwrap();
        let labels = batch.labels.as_ref().unwrap();
        for (a, label) in labels.iter().enumerate() {
            let Label::Shift { dx, dy } = *label else { panic!("unexpected label {label:?}") };
            prop_assert!(dx.unsigned_abs() as usize <= m && dy.unsigned_abs() as usize <= m);
            let x = batch.x.column(a);
            // index-level oracle: y[r, c] = x[r - dy, c - dx]
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    let (sr, sc) = (r - dy, c - dx);
                    let expect = if wrap {
                        x[(sr.rem_euclid(h as i64) * w as i64 + sc.rem_euclid(w as i64)) as usize]
                    } else if (0..h as i64).contains(&sr) && (0..w as i64).contains(&sc) {
                        x[(sr * w as i64 + sc) as usize]
                    } else {
                        0.0
                    };
                    prop_assert_eq!(batch.y[((r * w as i64 + c) as usize, a)], expect);
                }
            }
        }
    }

    #[test]
    fn one_dimensional_labels_have_no_vertical_part(seed in any::<u64>(), n in 4usize..20) {
        let batch = gen_shifted_dots_1d(10, n, 0.3, 2, true, seed).unwrap();
        for (a, l) in batch.labels.as_ref().unwrap().iter().enumerate() {
            let Label::Shift { dx, dy } = *l else { panic!() };
            prop_assert_eq!(dy, 0);
            let x: Vec<f64> = batch.x.column(a).iter().copied().collect();
            let y = shift_image(&x, 1, n, dx, 0, true);
            let got: Vec<f64> = batch.y.column(a).iter().copied().collect();
            prop_assert_eq!(y, got);
        }
    }

    #[test]
    fn normalize_is_idempotent(seed in any::<u64>(), h in 2usize..7, w in 2usize..7) {
        let batch = gen_shifted_dots(10, h, w, 0.5, 1, true, seed).unwrap();
        let (once, report) = normalize(&batch);
        let (twice, _) = normalize(&once);
        for a in 0..once.len() {
            let col = once.x.column(a);
            if report.degenerate_x.contains(&a) {
                prop_assert!(col.iter().all(|&v| v == 0.0));
                continue;
            }
            prop_assert!(col.mean().abs() < 1e-12);
            prop_assert!((col.norm() - 1.0).abs() < 1e-12);
        }
        prop_assert!((&once.x - &twice.x).amax() < 1e-12);
        prop_assert!((&once.y - &twice.y).amax() < 1e-12);
    }

    #[test]
    fn whitening_inverts_on_retained_subspace(seed in any::<u64>(), dim in 3usize..10, keep in 0.5f64..1.0) {
        let mut rng = seeded_rng(seed);
        let mix = gaussian_mat(&mut rng, dim, dim);
        let samples = mix * gaussian_mat(&mut rng, dim, 400);
        let t = fit_whitening_samples(&samples, keep).unwrap();
        prop_assert!(t.retained_variance >= keep - 1e-12);
        let k = t.components();
        let round = &t.projection * &t.inverse_projection;
        prop_assert!((round - DMatrix::<f64>::identity(k, k)).amax() < 1e-8);
        let white = t.whiten(&samples);
        for row in white.row_iter() {
            let mean = row.mean();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            prop_assert!((var - 1.0).abs() < 0.05, "component variance {var}");
        }
    }

    #[test]
    fn encoding_is_bilinear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = seeded_rng(seed);
        let (i, j, k, f) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..6));
        let mut p = FactoredParams::random(&mut rng, i, j, k, f, 1.0, 1.0);
        p.bias_z.fill(0.0);
        let w = expand_factored(&p).unwrap();
        let (x1, x2, y) = (gaussian_vec(&mut rng, i), gaussian_vec(&mut rng, i), gaussian_vec(&mut rng, j));
        let mixed = oracle_encode(&w, &(&x1 * a + &x2 * b), &y).unwrap();
        let split = oracle_encode(&w, &x1, &y).unwrap() * a + oracle_encode(&w, &x2, &y).unwrap() * b;
        prop_assert!((mixed - split).amax() < 1e-9);
        let (y1, y2) = (gaussian_vec(&mut rng, j), gaussian_vec(&mut rng, j));
        let mixed = oracle_encode(&w, &x1, &(&y1 * a + &y2 * b)).unwrap();
        let split = oracle_encode(&w, &x1, &y1).unwrap() * a + oracle_encode(&w, &x1, &y2).unwrap() * b;
        prop_assert!((mixed - split).amax() < 1e-9);
    }

    #[test]
    fn factored_encoding_matches_dense_tensor(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let (i, j, k, f) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..5), rng.random_range(1..7));
        let p = FactoredParams::random(&mut rng, i, j, k, f, 1.0, 1.0);
        let (x, y) = (gaussian_vec(&mut rng, i), gaussian_vec(&mut rng, j));
        let fx = p.factor_x(&x).unwrap();
        let fy = p.factor_y(&y).unwrap();
        let factored = &p.wz * fx.component_mul(&fy) + &p.bias_z;
        let dense = oracle_encode(&expand_factored(&p).unwrap(), &x, &y).unwrap();
        prop_assert!((factored - dense).amax() < 1e-10);
    }

    #[test]
    fn norm_constraint_equalizes_filter_norms(seed in any::<u64>(), tied in any::<bool>(), avg in 0.1f64..3.0) {
        let mut rng = seeded_rng(seed);
        let (i, f, std) = (rng.random_range(2..10), rng.random_range(1..10), rng.random_range(0.01..2.0));
        let mut p = FactoredParams::random(&mut rng, i, i, 3, f, std, 0.1);
        if tied {
            p.wy = p.wx.clone();
        }
        let mut nc = NormConstraint { running_avg: avg, decay: 0.95 };
        nc.apply(&mut p, tied, &mut rng);
        for col in p.wx.column_iter().chain(p.wy.column_iter()) {
            prop_assert!((col.norm() - nc.running_avg).abs() <= 0.01 * nc.running_avg);
        }
    }

    #[test]
    fn symmetric_orthonormalization_gives_orthonormal_columns(seed in any::<u64>(), n in 2usize..10, extra in 0usize..6) {
        let mut rng = seeded_rng(seed);
        let w = gaussian_mat(&mut rng, n + extra, n);
        let q = symmetric_orthonormalize(&w).unwrap();
        prop_assert!((q.tr_mul(&q) - DMatrix::<f64>::identity(n, n)).amax() < 1e-9);
    }

    #[test]
    fn commuting_shifts_share_a_diagonalizing_basis(n in 2usize..13, s1 in 0usize..12, s2 in 0usize..12) {
        let warps = [make_cyclic_shift(n, s1 % n).unwrap(), make_cyclic_shift(n, s2 % n).unwrap()];
        let eig = shared_eigenbasis(&warps).unwrap();
        for w in &warps {
            prop_assert!(eig.offdiagonal_residual(w) < 1e-6);
        }
    }

    #[test]
    fn detector_response_obeys_cauchy_schwarz(seed in any::<u64>(), n in 3usize..12, theta in -3.2f64..3.2) {
        let eig = shared_eigenbasis(&[make_cyclic_shift(n, 1).unwrap()]).unwrap();
        let bank = DetectorBank::from_subspaces(&eig.subspace_pairing, &[theta]).unwrap();
        let mut rng = seeded_rng(seed);
        let (x, y) = (gaussian_vec(&mut rng, n), gaussian_vec(&mut rng, n));
        let r = detector_response(&bank, &x, &y).unwrap().r;
        for (d, s) in eig.subspace_pairing.iter().enumerate() {
            let bound = s.captured_energy(&x).sqrt() * s.captured_energy(&y).sqrt();
            prop_assert!(r[d].abs() <= bound + 1e-10, "detector {d}: {} > {bound}", r[d]);
        }
    }

    #[test]
    fn detectors_ignore_inputs_outside_their_subspace(seed in any::<u64>(), n in 3usize..12, theta in -3.2f64..3.2) {
        let eig = shared_eigenbasis(&[make_cyclic_shift(n, 1).unwrap()]).unwrap();
        let mut rng = seeded_rng(seed);
        let y = gaussian_vec(&mut rng, n);
        for s in &eig.subspace_pairing {
            let bank = DetectorBank::from_subspaces(std::slice::from_ref(s), &[theta]).unwrap();
            let mut x = gaussian_vec(&mut rng, n);
            x -= &s.real * s.real.dot(&x);
            if let Some(im) = &s.imag {
                x -= im * im.dot(&x);
            }
            let r = detector_response(&bank, &x, &y).unwrap().r;
            prop_assert!(r[0].abs() < 1e-10);
        }
    }

    #[test]
    fn pure_shift_flow_is_uniform(h in 2usize..8, w in 2usize..8, sr in 0usize..8, sc in 0usize..8) {
        let (sr, sc) = (sr % h, sc % w);
        prop_assume!(2 * sr != h && 2 * sc != w);
        let l = make_2d_shift(h, w, sr, sc).unwrap().matrix;
        let flow = flow_from_warp(&l, Shape::image(h, w), true);
        let minimal = |s: usize, n: usize| if 2 * s < n { s as f64 } else { s as f64 - n as f64 };
        prop_assert!(flow.uniformity() >= 0.8);
        prop_assert_eq!(flow.median_displacement(), (minimal(sc, w), minimal(sr, h)));
    }
}
