//! Factored gated Boltzmann machine over binary units, trained with
//! single-step contrastive divergence on the conditional `p(y, z | x)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::{seeded_rng, PairBatch};
use crate::error::{Error, Result};
use crate::infer::infer_code;
use crate::tensor_core::{sigmoid, FactoredParams};
use crate::training::{mean_filter_norm, ordered_fanout, Momentum, NormConstraint, TraceRecord, TrainConfig, TrainReport};

/// Initial std of `Wx`, `Wy`. Larger than the autoencoder's: CD-1 on
/// binary units barely moves filters that start near zero.
pub const INIT_STD_XY: f64 = 0.05;
/// Initial std of `Wz`.
pub const INIT_STD_Z: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GbmModel {
    pub params: FactoredParams,
    pub norm_running_avg: f64,
}

impl GbmModel {
    pub fn new(i: usize, j: usize, k: usize, f: usize, seed: u64) -> Result<Self> {
        if i == 0 || j == 0 || k == 0 || f == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        Self::from_params(FactoredParams::random(&mut rng, i, j, k, f, INIT_STD_XY, INIT_STD_Z))
    }

    pub fn from_params(params: FactoredParams) -> Result<Self> {
        params.validate()?;
        let avg = mean_filter_norm(&params, false);
        Ok(GbmModel {
            params,
            norm_running_avg: if avg > 0.0 { avg } else { 1.0 },
        })
    }
}

/// `E(x, y, z) = Σ_f (Wxᵀx)_f (Wyᵀy)_f (Wzᵀz)_f + b_xᵀx + b_yᵀy + b_zᵀz`,
/// with `p(y, z | x) ∝ exp(E)`.
pub fn energy(model: &GbmModel, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
    let p = &model.params;
    let three_way = p.factor_x(x)?.component_mul(&p.factor_y(y)?).dot(&p.factor_z(z)?);
    Ok(three_way + p.bias_x.dot(x) + p.bias_y.dot(y) + p.bias_z.dot(z))
}

pub fn p_z_given_xy(model: &GbmModel, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(infer_code(&model.params, x, y)?.z)
}

pub fn p_y_given_xz(model: &GbmModel, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let p = &model.params;
    let g = p.factor_x(x)?.component_mul(&p.factor_z(z)?);
    Ok((&p.wy * g + &p.bias_y).map(sigmoid))
}

/// Log of the unnormalized marginal `Σ_z exp E(x, y, z)`, summed out
/// analytically over the binary mapping units.
pub fn free_energy(model: &GbmModel, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let p = &model.params;
    let pre = infer_code(p, x, y)?.pre_activation;
    let softplus = |a: f64| if a > 0.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() };
    Ok(p.bias_x.dot(x) + p.bias_y.dot(y) + pre.iter().map(|&a| softplus(a)).sum::<f64>())
}

/// Thresholds every patch at its own median: pixels strictly above it
/// become 1, the rest 0.
pub fn binarize_median(batch: &PairBatch) -> PairBatch {
    fn binarize(m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            let mut sorted: Vec<f64> = col.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let med = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            col.apply(|v| *v = if *v > med { 1.0 } else { 0.0 });
        }
        out
    }
    let mut out = batch.clone();
    out.x = binarize(&batch.x);
    out.y = binarize(&batch.y);
    out
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

/// `∂E/∂θ` summed over the columns of `(x, y, z)`.
fn energy_statistics(p: &FactoredParams, x: &DMatrix<f64>, y: &DMatrix<f64>, z: &DMatrix<f64>) -> FactoredParams {
    let fx = p.wx.tr_mul(x);
    let fy = p.wy.tr_mul(y);
    let fz = p.wz.tr_mul(z);
    let mut s = p.zeros_like();
    s.wx = x * fy.component_mul(&fz).transpose();
    s.wy = y * fx.component_mul(&fz).transpose();
    s.wz = z * fx.component_mul(&fy).transpose();
    s.bias_x = row_sums(x);
    s.bias_y = row_sums(y);
    s.bias_z = row_sums(z);
    s
}

/// Uniform draws for one CD-1 step over `n` pairs, drawn up front so the
/// result does not depend on how the work is split.
pub struct Cd1Noise {
    pub z: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Cd1Noise {
    pub fn draw<R: Rng>(rng: &mut R, j: usize, k: usize, n: usize) -> Self {
        Cd1Noise {
            z: DMatrix::from_fn(k, n, |_, _| rng.random::<f64>()),
            y: DMatrix::from_fn(j, n, |_, _| rng.random::<f64>()),
        }
    }
}

fn bernoulli(p: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    p.zip_map(u, |p, u| if u < p { 1.0 } else { 0.0 })
}

/// Summary of one CD-1 step.
pub struct Cd1Step {
    /// Mean over pairs of positive minus negative statistics: an estimate
    /// of the gradient of `log p(y, z | x)`.
    pub gradient: FactoredParams,
    /// Mean `‖y − ŷ‖²` of the one-step mean-field reconstructions.
    pub reconstruction_error: f64,
}

/// One step of contrastive divergence. The positive phase uses the data
/// with `p(z | x, y)`; the chain samples `z₀`, then `y₁`, then takes
/// `p(z | x, y₁)`, always with `x` clamped. Negative statistics use the
/// probabilities of `y₁` and `z₁`.
pub fn cd1_gradient(model: &GbmModel, batch: &PairBatch, noise: &Cd1Noise) -> Result<Cd1Step> {
    let (i, j, k, _) = model.params.dims();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Error::check_dim("batch x", i, batch.x_dim())?;
    Error::check_dim("batch y", j, batch.y_dim())?;
    Error::check_dim("noise columns", batch.len(), noise.z.ncols())?;
    Error::check_dim("noise rows", k, noise.z.nrows())?;
    let p = &model.params;
    let chunk = |r: std::ops::Range<usize>| {
        let cols = |m: &DMatrix<f64>| m.columns(r.start, r.len()).into_owned();
        let (x, y) = (cols(&batch.x), cols(&batch.y));
        let fx = p.wx.tr_mul(&x);
        let z0p = add_bias(&p.wz * fx.component_mul(&p.wy.tr_mul(&y)), &p.bias_z).map(sigmoid);
        let z0 = bernoulli(&z0p, &cols(&noise.z));
        let y1p = add_bias(&p.wy * fx.component_mul(&p.wz.tr_mul(&z0)), &p.bias_y).map(sigmoid);
        let y1 = bernoulli(&y1p, &cols(&noise.y));
        let z1p = add_bias(&p.wz * fx.component_mul(&p.wy.tr_mul(&y1)), &p.bias_z).map(sigmoid);
        let mut g = energy_statistics(p, &x, &y, &z0p);
        g.axpy(-1.0, &energy_statistics(p, &x, &y1p, &z1p));
        (g, (y - y1p).norm_squared())
    };
    let (mut gradient, err) = ordered_fanout(batch.len(), chunk, |(mut g1, e1), (g2, e2)| {
        g1.axpy(1.0, &g2);
        (g1, e1 + e2)
    })
    .expect("non-empty batch");
    let n = batch.len() as f64;
    gradient.scale(1.0 / n);
    Ok(Cd1Step {
        gradient,
        reconstruction_error: err / n,
    })
}

/// Mean one-step mean-field reconstruction error `‖y − E[y₁]‖²` with the
/// hidden units at their conditional means (no sampling).
pub fn reconstruction_error(model: &GbmModel, batch: &PairBatch) -> Result<f64> {
    let mut total = 0.0;
    for a in 0..batch.len() {
        let x = batch.x.column(a).into_owned();
        let y = batch.y.column(a).into_owned();
        let z = p_z_given_xy(model, &x, &y)?;
        total += (p_y_given_xz(model, &x, &z)? - y).norm_squared();
    }
    Ok(total / batch.len() as f64)
}

/// CD-1 training with momentum and the filter-norm constraint. Trace
/// records carry the reconstruction error of each minibatch as `loss`.
pub fn train(
    model: &mut GbmModel,
    batch: &PairBatch,
    config: &TrainConfig,
    callback: &mut dyn FnMut(&TraceRecord),
) -> Result<TrainReport> {
    train_from_epoch(model, batch, config, 0, callback)
}

pub fn train_from_epoch(
    model: &mut GbmModel,
    batch: &PairBatch,
    config: &TrainConfig,
    first_epoch: usize,
    callback: &mut dyn FnMut(&TraceRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut report = TrainReport {
        initial_loss: reconstruction_error(model, batch)?,
        ..Default::default()
    };
    let (_, j, k, _) = model.params.dims();
    let mut rng = seeded_rng(config.seed ^ (first_epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut momentum = Momentum::new(&model.params);
    let mut norm = NormConstraint {
        running_avg: model.norm_running_avg,
        decay: config.norm_decay,
    };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in first_epoch..first_epoch + config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let sub = batch.select(idx);
            let noise = Cd1Noise::draw(&mut rng, j, k, sub.len());
            let step = cd1_gradient(model, &sub, &noise)?;
            let grad_norm = step.gradient.norm();
            momentum.ascend(&mut model.params, &step.gradient, config.learning_rate, config.momentum);
            if config.norm_constraint && config.learning_rate > 0.0 {
                norm.apply(&mut model.params, false, &mut rng);
            }
            if !model.params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("gradient norm {grad_norm}"),
                });
            }
            let rec = TraceRecord {
                epoch,
                batch: b,
                loss: step.reconstruction_error,
                grad_norm,
            };
            callback(&rec);
            report.records.push(rec);
            total += step.reconstruction_error;
            count += 1;
        }
        report.epoch_losses.push(total / count as f64);
    }
    model.norm_running_avg = norm.running_avg;
    Ok(report)
}
