use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use relate::datagen::{seeded_rng, PairBatch, Shape};
use relate::energy_isa::{self, block_pooling, EnergyModel, IsaConfig};
use relate::gae::{self, GaeModel};

fn gaussian(rng: &mut impl rand::Rng, r: usize, c: usize) -> DMatrix<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    DMatrix::from_fn(r, c, |_, _| n.sample(rng))
}

fn random_model(seed: u64, i: usize, j: usize, f: usize, k: usize) -> EnergyModel {
    let mut rng = seeded_rng(seed);
    let filters = gaussian(&mut rng, i + j, f);
    let pooling = gaussian(&mut rng, k, f).map(f64::abs);
    let bias = gaussian(&mut rng, k, 1).column(0).into_owned();
    EnergyModel::new(filters, i, pooling, bias).unwrap()
}

#[test]
fn response_is_twice_cross_plus_quadratic() {
    let m = random_model(1, 7, 5, 6, 3);
    let mut rng = seeded_rng(2);
    for _ in 0..1000 {
        let x = gaussian(&mut rng, 7, 1).column(0).into_owned();
        let y = gaussian(&mut rng, 5, 1).column(0).into_owned();
        let r = energy_isa::energy_response(&m, &x, &y).unwrap();
        let e = energy_isa::expand_energy(&m, &x, &y).unwrap();
        let rebuilt = &m.bias_z + &e.cross * 2.0 + &e.quadratic;
        for k in 0..3 {
            assert!((r[k] - rebuilt[k]).abs() <= 1e-12 * r[k].abs().max(1.0));
        }
    }
}

#[test]
fn cross_term_is_gated_pre_activation() {
    let m = random_model(3, 6, 6, 5, 4);
    let g = GaeModel::from_params(m.to_gated(), false).unwrap();
    let mut rng = seeded_rng(4);
    for _ in 0..50 {
        let x = gaussian(&mut rng, 6, 1).column(0).into_owned();
        let y = gaussian(&mut rng, 6, 1).column(0).into_owned();
        let cross = energy_isa::expand_energy(&m, &x, &y).unwrap().cross;
        let pre = gae::encode(&g, &x, &y).unwrap().pre_activation - &m.bias_z;
        assert!((cross - pre).amax() < 1e-12);
    }
}

/// Orthonormal real/imaginary parts of a random unit complex direction.
fn quadrature(rng: &mut impl rand::Rng, n: usize) -> (DVector<f64>, DVector<f64>) {
    let q = gaussian(rng, n, 2).qr().q();
    (q.column(0).into_owned(), q.column(1).into_owned())
}

#[test]
fn pooled_quadrature_pair_ignores_phase() {
    let mut rng = seeded_rng(5);
    let n = 9;
    for _ in 0..20 {
        let (ur, ui) = quadrature(&mut rng, n);
        let (vr, vi) = quadrature(&mut rng, n);
        let mut filters = DMatrix::zeros(2 * n, 2);
        filters.view_mut((0, 0), (n, 1)).copy_from(&ur);
        filters.view_mut((n, 0), (n, 1)).copy_from(&vr);
        filters.view_mut((0, 1), (n, 1)).copy_from(&ui);
        filters.view_mut((n, 1), (n, 1)).copy_from(&vi);
        let m = EnergyModel::new(filters, n, block_pooling(1, 2), DVector::zeros(1)).unwrap();
        let a: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
        let b: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
        let c: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
        let d: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
        let base = energy_isa::energy_response(&m, &(&ur * a + &ui * b), &(&vr * c + &vi * d)).unwrap()[0];
        for step in 1..12 {
            let phi = step as f64 * 0.5;
            let (s, co) = phi.sin_cos();
            // the same rotation of the in-subspace coordinates of both images
            let x = &ur * (co * a - s * b) + &ui * (s * a + co * b);
            let y = &vr * (co * c - s * d) + &vi * (s * c + co * d);
            let r = energy_isa::energy_response(&m, &x, &y).unwrap()[0];
            assert!((r - base).abs() < 1e-8, "{r} vs {base}");
        }
    }
}

fn white_batch(seed: u64, dim: usize, n: usize) -> PairBatch {
    let mut rng = seeded_rng(seed);
    PairBatch::new(
        gaussian(&mut rng, dim, n),
        gaussian(&mut rng, dim, n),
        Shape::image(1, dim),
        Shape::image(1, dim),
        None,
    )
    .unwrap()
}

#[test]
fn isa_gradient_matches_finite_differences() {
    let mut m = random_model(6, 5, 5, 6, 3);
    m.pooling = block_pooling(3, 2);
    let v = white_batch(7, 5, 40).concatenated().x;
    let (gw, gp) = energy_isa::isa_gradients(&m, &v);
    let h = 1e-6;
    for r in 0..10 {
        for c in 0..6 {
            let mut p = m.clone();
            p.filters[(r, c)] += h;
            let plus = energy_isa::isa_objective(&p, &v);
            p.filters[(r, c)] -= 2.0 * h;
            let minus = energy_isa::isa_objective(&p, &v);
            let num = (plus - minus) / (2.0 * h);
            assert!(gae::relative_error(gw[(r, c)], num) < 1e-6);
        }
    }
    for k in 0..3 {
        for c in 0..6 {
            let mut p = m.clone();
            p.pooling[(k, c)] += h;
            let plus = energy_isa::isa_objective(&p, &v);
            p.pooling[(k, c)] -= 2.0 * h;
            let minus = energy_isa::isa_objective(&p, &v);
            assert!(gae::relative_error(gp[(k, c)], (plus - minus) / (2.0 * h)) < 1e-6);
        }
    }
}

#[test]
fn filters_stay_orthonormal_during_training() {
    let b = white_batch(8, 8, 300);
    for learn_pooling in [false, true] {
        let mut m = EnergyModel::random(8, 8, 8, 2, 9).unwrap();
        let cfg = IsaConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 50,
            learn_pooling,
            ..Default::default()
        };
        for seed in 0..4 {
            energy_isa::train_isa(&mut m, &b, &IsaConfig { seed, ..cfg.clone() }, &mut |_| {}).unwrap();
            assert!(m.orthonormality_error() < 1e-8);
            assert!(m.pooling.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn single_input_models_train_on_x_alone() {
    let b = white_batch(10, 12, 200);
    let mut m = EnergyModel::random(12, 0, 6, 2, 1).unwrap();
    let rep = energy_isa::train_isa(&mut m, &b, &IsaConfig { epochs: 3, ..Default::default() }, &mut |_| {}).unwrap();
    assert_eq!(rep.epoch_losses.len(), 3);
    assert!(m.orthonormality_error() < 1e-8);
}
