//! Factored gated autoencoder.
//!
//! Encoding multiplies the factor responses of both images,
//! `z = σ(Wz·(Wxᵀx ⊙ Wyᵀy) + b_z)`, and decoding runs the same factors
//! the other way, `ŷ = Wy·(Wxᵀx ⊙ Wzᵀz) + b_y`. Training minimizes the
//! sum of both reconstruction directions.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::{seeded_rng, PairBatch};
use crate::error::{Error, Result};
use crate::tensor_core::{sigmoid, FactoredParams, MappingCode};
use crate::training::{corrupt, mean_filter_norm, ordered_fanout, Momentum, NormConstraint, Objective, TraceRecord, TrainConfig, TrainReport};

pub const INIT_STD_XY: f64 = 0.01;
pub const INIT_STD_Z: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GaeModel {
    pub params: FactoredParams,
    /// `Wy` mirrors `Wx`; gradients of both roles accumulate into one matrix.
    pub tied_xy: bool,
    pub norm_running_avg: f64,
    pub config: Option<TrainConfig>,
}

impl GaeModel {
    pub fn new(i: usize, j: usize, k: usize, f: usize, tied_xy: bool, seed: u64) -> Result<Self> {
        if i == 0 || j == 0 || k == 0 || f == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if tied_xy && i != j {
            return Err(Error::InvalidArgument(format!(
                "tied filters need equal input sizes, got I = {i}, J = {j}"
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut params = FactoredParams::random(&mut rng, i, j, k, f, INIT_STD_XY, INIT_STD_Z);
        if tied_xy {
            params.wy.copy_from(&params.wx);
        }
        Self::from_params(params, tied_xy)
    }

    pub fn from_params(params: FactoredParams, tied_xy: bool) -> Result<Self> {
        params.validate()?;
        if tied_xy && params.wx != params.wy {
            return Err(Error::InvalidArgument("tied model needs Wx == Wy".into()));
        }
        let avg = mean_filter_norm(&params, tied_xy);
        Ok(GaeModel {
            params,
            tied_xy,
            norm_running_avg: if avg > 0.0 { avg } else { 1.0 },
            config: None,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.params.dims()
    }
}

/// Mapping code of one pair.
pub fn encode(model: &GaeModel, x: &DVector<f64>, y: &DVector<f64>) -> Result<MappingCode> {
    let p = &model.params;
    let h = p.factor_x(x)?.component_mul(&p.factor_y(y)?);
    Ok(MappingCode::from_pre_activation(&p.wz * h + &p.bias_z))
}

/// Prediction of `y` from `x` under code `z` (linear output).
pub fn decode(model: &GaeModel, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let p = &model.params;
    let g = p.factor_x(x)?.component_mul(&p.factor_z(z)?);
    Ok(&p.wy * g + &p.bias_y)
}

/// Prediction of `x` from `y` under code `z`: `decode` with the roles of
/// `Wx` and `Wy` swapped.
pub fn decode_reverse(model: &GaeModel, y: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let p = &model.params;
    let g = p.factor_y(y)?.component_mul(&p.factor_z(z)?);
    Ok(&p.wx * g + &p.bias_x)
}

/// Corrupted inputs and clean targets for one evaluation of the objective.
struct Views<'a> {
    x_in: &'a DMatrix<f64>,
    y_in: &'a DMatrix<f64>,
    x_target: &'a DMatrix<f64>,
    y_target: &'a DMatrix<f64>,
}

fn add_bias(mut m: DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        col += b;
    }
    m
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()))
}

/// Summed (not averaged) objective and its gradient over pairs `range`.
fn chunk_objective(
    p: &FactoredParams,
    views: &Views,
    range: std::ops::Range<usize>,
    cfg: &TrainConfig,
    with_grad: bool,
) -> (f64, Option<FactoredParams>) {
    let cols = |m: &DMatrix<f64>| m.columns(range.start, range.len()).into_owned();
    let (xi, yi) = (cols(views.x_in), cols(views.y_in));
    let (xt, yt) = (cols(views.x_target), cols(views.y_target));
    let symmetric = cfg.objective == Objective::Symmetric;
    let lambda = cfg.sparsity_weight;

    let fx = p.wx.tr_mul(&xi);
    let fy = p.wy.tr_mul(&yi);
    let h = fx.component_mul(&fy);
    let a = add_bias(&p.wz * &h, &p.bias_z);
    let z = a.map(sigmoid);
    let fz = p.wz.tr_mul(&z);
    let gy = fx.component_mul(&fz);
    let ey = add_bias(&p.wy * &gy, &p.bias_y) - &yt;
    let mut loss = ey.norm_squared() + lambda * z.sum();
    let (gx, ex) = if symmetric {
        let gx = fy.component_mul(&fz);
        let ex = add_bias(&p.wx * &gx, &p.bias_x) - &xt;
        loss += ex.norm_squared();
        (gx, ex)
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    };
    if !with_grad {
        return (loss, None);
    }

    let mut g = p.zeros_like();
    let dy = &ey * 2.0;
    g.bias_y = row_sums(&dy);
    g.wy = &dy * gy.transpose();
    let dgy = p.wy.tr_mul(&dy);
    let mut dfx = dgy.component_mul(&fz);
    let mut dfz = dgy.component_mul(&fx);
    let mut dfy = DMatrix::zeros(fy.nrows(), fy.ncols());
    if symmetric {
        let dx = &ex * 2.0;
        g.bias_x = row_sums(&dx);
        g.wx = &dx * gx.transpose();
        let dgx = p.wx.tr_mul(&dx);
        dfy += dgx.component_mul(&fz);
        dfz += dgx.component_mul(&fy);
    }
    // Wzᵀz feeds decoding; Wz·h feeds encoding
    g.wz = &z * dfz.transpose();
    let mut dz = &p.wz * &dfz;
    dz.add_scalar_mut(lambda);
    let da = dz.component_mul(&z.map(|v| v * (1.0 - v)));
    g.bias_z = row_sums(&da);
    g.wz += &da * h.transpose();
    let dh = p.wz.tr_mul(&da);
    dfx += dh.component_mul(&fy);
    dfy += dh.component_mul(&fx);
    g.wx += &xi * dfx.transpose();
    g.wy += &yi * dfy.transpose();
    (loss, Some(g))
}

fn objective_with_views(
    model: &GaeModel,
    views: &Views,
    cfg: &TrainConfig,
    with_grad: bool,
) -> (f64, Option<FactoredParams>) {
    let n = views.x_in.ncols();
    let p = &model.params;
    let (loss, grad) = ordered_fanout(
        n,
        |r| chunk_objective(p, views, r, cfg, with_grad),
        |(l1, g1), (l2, g2)| {
            let g = match (g1, g2) {
                (Some(mut a), Some(b)) => {
                    a.axpy(1.0, &b);
                    Some(a)
                }
                _ => None,
            };
            (l1 + l2, g)
        },
    )
    .unwrap_or((0.0, None));
    let scale = 1.0 / n as f64;
    let grad = grad.map(|mut g| {
        g.scale(scale);
        if model.tied_xy {
            let wy = std::mem::replace(&mut g.wy, DMatrix::zeros(0, 0));
            g.wx += wy;
            g.wy = g.wx.clone();
        }
        g
    });
    (loss * scale, grad)
}

fn check_batch(model: &GaeModel, batch: &PairBatch) -> Result<()> {
    let (i, j, _, _) = model.dims();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Error::check_dim("batch x", i, batch.x_dim())?;
    Error::check_dim("batch y", j, batch.y_dim())
}

/// Inputs as seen by [`loss`] and [`gradients`]: masked copies drawn from
/// `config.seed`, or the clean data when corruption is off.
pub fn corrupted_inputs(batch: &PairBatch, cfg: &TrainConfig) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = seeded_rng(cfg.seed);
    let x = corrupt(&batch.x, cfg.corruption_level, &mut rng);
    let y = corrupt(&batch.y, cfg.corruption_level, &mut rng);
    (x, y)
}

/// Mean over pairs of `‖y − ŷ‖² + ‖x − x̂‖² + λ·Σ_k z_k` (the second term
/// only for the symmetric objective). With corruption enabled the inputs
/// are masked with a pattern drawn from `config.seed`.
pub fn loss(model: &GaeModel, batch: &PairBatch, config: &TrainConfig) -> Result<f64> {
    check_batch(model, batch)?;
    let (xc, yc) = corrupted_inputs(batch, config);
    let views = Views {
        x_in: &xc,
        y_in: &yc,
        x_target: &batch.x,
        y_target: &batch.y,
    };
    Ok(objective_with_views(model, &views, config, false).0)
}

/// Exact gradient of [`loss`] with respect to every parameter. For a tied
/// model the `wx` and `wy` entries both hold the combined gradient of the
/// shared filters.
pub fn gradients(model: &GaeModel, batch: &PairBatch, config: &TrainConfig) -> Result<FactoredParams> {
    check_batch(model, batch)?;
    let (xc, yc) = corrupted_inputs(batch, config);
    let views = Views {
        x_in: &xc,
        y_in: &yc,
        x_target: &batch.x,
        y_target: &batch.y,
    };
    Ok(objective_with_views(model, &views, config, true).1.expect("gradient requested"))
}

/// Minibatch SGD with momentum. Reports every update to `callback`.
pub fn train(
    model: &mut GaeModel,
    batch: &PairBatch,
    config: &TrainConfig,
    callback: &mut dyn FnMut(&TraceRecord),
) -> Result<TrainReport> {
    train_from_epoch(model, batch, config, 0, callback)
}

/// Like [`train`], numbering epochs from `first_epoch` (used when resuming).
pub fn train_from_epoch(
    model: &mut GaeModel,
    batch: &PairBatch,
    config: &TrainConfig,
    first_epoch: usize,
    callback: &mut dyn FnMut(&TraceRecord),
) -> Result<TrainReport> {
    config.validate()?;
    check_batch(model, batch)?;
    let mut eval_cfg = config.clone();
    eval_cfg.corruption_level = 0.0;
    let mut report = TrainReport {
        initial_loss: loss(model, batch, &eval_cfg)?,
        ..Default::default()
    };
    // distinct stream per resumed segment, still a pure function of the seed
    let mut rng = seeded_rng(config.seed ^ (first_epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut momentum = Momentum::new(&model.params);
    let mut norm = NormConstraint {
        running_avg: model.norm_running_avg,
        decay: config.norm_decay,
    };
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in first_epoch..first_epoch + config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let sub = batch.select(idx);
            let xc = corrupt(&sub.x, config.corruption_level, &mut rng);
            let yc = corrupt(&sub.y, config.corruption_level, &mut rng);
            let views = Views {
                x_in: &xc,
                y_in: &yc,
                x_target: &sub.x,
                y_target: &sub.y,
            };
            let (l, grad) = objective_with_views(model, &views, config, true);
            let grad = grad.expect("gradient requested");
            let grad_norm = grad.norm();
            momentum.step(&mut model.params, &grad, config.learning_rate, config.momentum);
            if model.tied_xy {
                model.params.wy.copy_from(&model.params.wx);
            }
            if config.norm_constraint && config.learning_rate > 0.0 {
                norm.apply(&mut model.params, model.tied_xy, &mut rng);
            }
            if !l.is_finite() || !model.params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss {l}, gradient norm {grad_norm}"),
                });
            }
            let rec = TraceRecord {
                epoch,
                batch: b,
                loss: l,
                grad_norm,
            };
            callback(&rec);
            report.records.push(rec);
            epoch_loss += l;
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches as f64);
    }
    model.norm_running_avg = norm.running_avg;
    model.config = Some(config.clone());
    Ok(report)
}

/// Batched mapping codes (columns) for every pair.
pub fn encode_batch(model: &GaeModel, batch: &PairBatch) -> Result<DMatrix<f64>> {
    check_batch(model, batch)?;
    let p = &model.params;
    let h = p.wx.tr_mul(&batch.x).component_mul(&p.wy.tr_mul(&batch.y));
    Ok(add_bias(&p.wz * h, &p.bias_z).map(sigmoid))
}

/// Relative error used by the gradient checks. The floor keeps entries
/// that are zero up to rounding from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between [`gradients`] and central differences of
/// [`loss`] over every parameter. Tied filters are perturbed jointly.
pub fn finite_difference_check(model: &GaeModel, batch: &PairBatch, config: &TrainConfig, h: f64) -> Result<f64> {
    let analytic = gradients(model, batch, config)?;
    let grads: Vec<f64> = analytic.values().copied().collect();
    let nx = model.params.wx.len();
    let ny = model.params.wy.len();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (idx, &g) in grads.iter().enumerate() {
        // wy entries of a tied model are not free parameters
        if model.tied_xy && (nx..nx + ny).contains(&idx) {
            continue;
        }
        let eval = |probe: &mut GaeModel, delta: f64| -> Result<f64> {
            *probe.params.values_mut().nth(idx).unwrap() += delta;
            if probe.tied_xy && idx < nx {
                *probe.params.values_mut().nth(nx + idx).unwrap() += delta;
            }
            loss(probe, batch, config)
        };
        let plus = eval(&mut probe, h)?;
        let minus = eval(&mut probe, -2.0 * h)?;
        eval(&mut probe, h)?;
        probe.params = model.params.clone();
        worst = worst.max(relative_error(g, (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

/// One configuration of the standard gradient-check sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckCase {
    pub tied: bool,
    pub sparsity_weight: f64,
    pub corruption_level: f64,
    pub seed: u64,
    pub max_rel_error: f64,
}

/// Sweeps tied/untied, λ ∈ {0, 0.01} and denoising on/off on random
/// 8×8-pixel models with F = 6, K = 4, `repeats` seeds each.
pub fn gradcheck_suite(repeats: u64) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    for seed in 0..repeats {
        for tied in [false, true] {
            for lambda in [0.0, 0.01] {
                for corruption in [0.0, 0.3] {
                    let s = seed * 8 + tied as u64 * 4 + (lambda > 0.0) as u64 * 2 + (corruption > 0.0) as u64;
                    let mut rng = seeded_rng(s);
                    let model = random_model(&mut rng, 64, 64, 4, 6, tied);
                    let batch = gradcheck_batch(&mut rng, 64, 5);
                    let cfg = TrainConfig {
                        sparsity_weight: lambda,
                        corruption_level: corruption,
                        seed: s,
                        ..Default::default()
                    };
                    cases.push(GradCheckCase {
                        tied,
                        sparsity_weight: lambda,
                        corruption_level: corruption,
                        seed: s,
                        max_rel_error: finite_difference_check(&model, &batch, &cfg, FD_STEP)?,
                    });
                }
            }
        }
    }
    Ok(cases)
}

fn gradcheck_batch<R: Rng>(rng: &mut R, dim: usize, n: usize) -> PairBatch {
    use crate::datagen::Shape;
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 0.5).unwrap();
    let x = DMatrix::from_fn(dim, n, |_, _| normal.sample(rng));
    let y = DMatrix::from_fn(dim, n, |_, _| normal.sample(rng));
    let side = (dim as f64).sqrt() as usize;
    let shape = if side * side == dim { Shape::image(side, side) } else { Shape::image(1, dim) };
    PairBatch::new(x, y, shape, shape, None).expect("consistent batch")
}

/// Random model for tests and gradient checks, with non-trivial biases.
pub fn random_model<R: Rng>(rng: &mut R, i: usize, j: usize, k: usize, f: usize, tied: bool) -> GaeModel {
    use rand_distr::{Distribution, Normal};
    let n = Normal::new(0.0, 0.5).unwrap();
    let mut p = FactoredParams::random(rng, i, j, k, f, 0.5, 0.5);
    for v in p.bias_x.iter_mut().chain(p.bias_y.iter_mut()).chain(p.bias_z.iter_mut()) {
        *v = n.sample(rng);
    }
    if tied {
        p.wy.copy_from(&p.wx);
    }
    GaeModel::from_params(p, tied).expect("valid random model")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_shifted_dots, Shape};

    fn one(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn zero_y_gives_sigmoid_of_bias() {
        let mut rng = seeded_rng(1);
        let m = random_model(&mut rng, 4, 5, 3, 6, false);
        let code = encode(&m, &DVector::from_element(4, 1.0), &DVector::zeros(5)).unwrap();
        assert_eq!(code.pre_activation, m.params.bias_z);
        for k in 0..3 {
            assert_eq!(code.z[k], sigmoid(m.params.bias_z[k]));
        }
    }

    #[test]
    fn scalar_case() {
        let mut p = FactoredParams::zeros(1, 1, 1, 1);
        p.wx.fill(1.0);
        p.wy.fill(1.0);
        p.wz.fill(1.0);
        let m = GaeModel::from_params(p, false).unwrap();
        let code = encode(&m, &one(2.0), &one(3.0)).unwrap();
        assert_eq!(code.pre_activation[0], 6.0);
    }

    #[test]
    fn zero_x_decodes_to_bias() {
        let mut rng = seeded_rng(2);
        let m = random_model(&mut rng, 4, 5, 3, 6, false);
        let out = decode(&m, &DVector::zeros(4), &DVector::from_element(3, 0.4)).unwrap();
        assert_eq!(out, m.params.bias_y);
    }

    #[test]
    fn dimension_checks() {
        let mut rng = seeded_rng(3);
        let m = random_model(&mut rng, 4, 5, 3, 6, false);
        assert!(encode(&m, &DVector::zeros(5), &DVector::zeros(5)).is_err());
        assert!(decode(&m, &DVector::zeros(4), &DVector::zeros(4)).is_err());
        assert!(GaeModel::new(4, 5, 2, 2, true, 0).is_err());
    }

    #[test]
    fn loss_with_zero_mapping_filters_is_bias_error() {
        let mut rng = seeded_rng(4);
        let mut m = random_model(&mut rng, 9, 9, 3, 5, false);
        m.params.wz.fill(0.0);
        let b = gen_shifted_dots(7, 3, 3, 0.4, 1, true, 5).unwrap();
        let cfg = TrainConfig::default();
        let l = loss(&m, &b, &cfg).unwrap();
        let mut expected = 0.0;
        for a in 0..b.len() {
            expected += (b.y.column(a) - &m.params.bias_y).norm_squared();
            expected += (b.x.column(a) - &m.params.bias_x).norm_squared();
        }
        expected /= b.len() as f64;
        assert!((l - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn predictive_objective_drops_reverse_term() {
        let mut rng = seeded_rng(6);
        let m = random_model(&mut rng, 4, 4, 2, 3, false);
        let b = gen_shifted_dots(5, 2, 2, 0.5, 1, true, 1).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.objective = Objective::Predictive;
        let mut expected = 0.0;
        for a in 0..b.len() {
            let x = b.x.column(a).into_owned();
            let y = b.y.column(a).into_owned();
            let z = encode(&m, &x, &y).unwrap().z;
            expected += (decode(&m, &x, &z).unwrap() - y).norm_squared();
        }
        expected /= b.len() as f64;
        assert!((loss(&m, &b, &cfg).unwrap() - expected).abs() < 1e-12);
        let g = gradients(&m, &b, &cfg).unwrap();
        assert!(g.bias_x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_reconstruction_has_zero_gradient() {
        // x = y = 0 and zero biases: every reconstruction is exact
        let mut rng = seeded_rng(7);
        let mut m = random_model(&mut rng, 4, 4, 2, 3, false);
        m.params.bias_x.fill(0.0);
        m.params.bias_y.fill(0.0);
        let b = PairBatch::from_pairs(&[(vec![0.0; 4], vec![0.0; 4])], Shape::image(2, 2), Shape::image(2, 2), None).unwrap();
        let g = gradients(&m, &b, &TrainConfig { sparsity_weight: 0.0, ..Default::default() }).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let b = gen_shifted_dots(40, 4, 4, 0.3, 1, true, 2).unwrap();
        let mut m = GaeModel::new(16, 16, 3, 8, false, 4).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 10,
            ..Default::default()
        };
        let rep = train(&mut m, &b, &cfg, &mut |_| {}).unwrap();
        assert_eq!(m.params, before);
        assert!(rep.epoch_losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
    }

    #[test]
    fn divergence_is_detected() {
        let b = gen_shifted_dots(20, 4, 4, 0.5, 1, true, 2).unwrap();
        let mut m = GaeModel::new(16, 16, 3, 8, false, 4).unwrap();
        m.params.wx.fill(1e150);
        let cfg = TrainConfig {
            learning_rate: 1e10,
            norm_constraint: false,
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train(&mut m, &b, &cfg, &mut |_| {}), Err(Error::Divergence { .. })));
    }
}
