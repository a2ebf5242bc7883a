//! Energy model over a concatenated pair: linear filters, squaring, and
//! pooling, trained ISA-style with orthonormal filters.
//!
//! A hidden unit responds with `z_k = Σ_f P[k,f]·(w^xᵀx + w^yᵀy)²`. Since
//! `(a + b)² = 2ab + a² + b²`, the response is twice a gated cross term
//! plus quadratic terms that see only one image each.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{seeded_rng, PairBatch};
use crate::error::{Error, Result};
use crate::tensor_core::FactoredParams;
use crate::training::{ordered_fanout, TraceRecord, TrainReport};

/// Smoothing inside the square root of the sparsity penalty.
pub const ISA_EPSILON: f64 = 1e-8;

/// Whitened data is expected to have covariance within this distance
/// (max entry) of the identity.
const WHITENESS_TOL: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    /// `(I + J) × F`; rows `0..I` act on `x`, rows `I..` on `y`.
    pub filters: DMatrix<f64>,
    pub dim_x: usize,
    /// Nonnegative `K × F`.
    pub pooling: DMatrix<f64>,
    pub bias_z: DVector<f64>,
}

impl EnergyModel {
    pub fn new(filters: DMatrix<f64>, dim_x: usize, pooling: DMatrix<f64>, bias_z: DVector<f64>) -> Result<Self> {
        if dim_x > filters.nrows() {
            return Err(Error::InvalidArgument(format!(
                "x block of {dim_x} rows exceeds the {} filter rows",
                filters.nrows()
            )));
        }
        Error::check_dim("pooling factors", filters.ncols(), pooling.ncols())?;
        Error::check_dim("bias_z", pooling.nrows(), bias_z.len())?;
        if pooling.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("pooling weights must be nonnegative".into()));
        }
        if filters.iter().chain(pooling.iter()).chain(bias_z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("energy model contains non-finite values".into()));
        }
        Ok(EnergyModel {
            filters,
            dim_x,
            pooling,
            bias_z,
        })
    }

    /// Random orthonormal filters with block-diagonal pooling over
    /// consecutive groups of `subspace_size` factors.
    pub fn random(dim_x: usize, dim_y: usize, factors: usize, subspace_size: usize, seed: u64) -> Result<Self> {
        let dim = dim_x + dim_y;
        if factors == 0 || factors > dim {
            return Err(Error::InvalidArgument(format!(
                "need 1..={dim} orthonormal filters, got {factors}"
            )));
        }
        if subspace_size == 0 || factors % subspace_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "{factors} factors do not split into subspaces of size {subspace_size}"
            )));
        }
        let mut rng = seeded_rng(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let w = DMatrix::from_fn(dim, factors, |_, _| n.sample(&mut rng));
        let filters = symmetric_orthonormalize(&w)?;
        let k = factors / subspace_size;
        let pooling = block_pooling(k, subspace_size);
        Self::new(filters, dim_x, pooling, DVector::zeros(k))
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_y(&self) -> usize {
        self.filters.nrows() - self.dim_x
    }

    pub fn num_factors(&self) -> usize {
        self.filters.ncols()
    }

    pub fn num_units(&self) -> usize {
        self.pooling.nrows()
    }

    pub fn filters_x(&self) -> DMatrix<f64> {
        self.filters.rows(0, self.dim_x).into_owned()
    }

    pub fn filters_y(&self) -> DMatrix<f64> {
        self.filters.rows(self.dim_x, self.dim_y()).into_owned()
    }

    /// The same filters and pooling read as a factored gated model.
    pub fn to_gated(&self) -> FactoredParams {
        let mut p = FactoredParams::zeros(self.dim_x, self.dim_y(), self.num_units(), self.num_factors());
        p.wx = self.filters_x();
        p.wy = self.filters_y();
        p.wz = self.pooling.clone();
        p.bias_z = self.bias_z.clone();
        p
    }

    pub fn from_gated(params: &FactoredParams) -> Result<Self> {
        let (i, j, _, f) = params.dims();
        let mut filters = DMatrix::zeros(i + j, f);
        filters.rows_mut(0, i).copy_from(&params.wx);
        filters.rows_mut(i, j).copy_from(&params.wy);
        Self::new(filters, i, params.wz.clone(), params.bias_z.clone())
    }

    /// Largest entry of `|WᵀW − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.filters.tr_mul(&self.filters);
        (g - DMatrix::identity(self.num_factors(), self.num_factors())).amax()
    }
}

pub fn block_pooling(units: usize, subspace_size: usize) -> DMatrix<f64> {
    DMatrix::from_fn(units, units * subspace_size, |k, f| {
        if f / subspace_size == k {
            1.0
        } else {
            0.0
        }
    })
}

/// `W (WᵀW)^{-1/2}`: the orthonormal matrix closest to `W`.
pub fn symmetric_orthonormalize(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(w.tr_mul(w));
    let min = eig.eigenvalues.min();
    if min <= 1e-14 * eig.eigenvalues.max().max(1.0) {
        return Err(Error::DegenerateData("filters are linearly dependent".into()));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let q = &eig.eigenvectors;
    let out = w * (q * inv_sqrt * q.transpose());
    // one Newton–Schulz polish step removes eigensolver round-off
    let g = out.tr_mul(&out);
    let n = g.nrows();
    Ok(&out * (DMatrix::identity(n, n) * 1.5 - g * 0.5))
}

fn stacked(model: &EnergyModel, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim("x", model.dim_x(), x.len())?;
    Error::check_dim("y", model.dim_y(), y.len())?;
    let mut v = DVector::zeros(model.filters.nrows());
    v.rows_mut(0, x.len()).copy_from(x);
    v.rows_mut(x.len(), y.len()).copy_from(y);
    Ok(v)
}

/// `z_k = b_k + Σ_f P[k,f]·(w^x_fᵀx + w^y_fᵀy)²`.
pub fn energy_response(model: &EnergyModel, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let s = model.filters.tr_mul(&stacked(model, x, y)?);
    Ok(&model.pooling * s.map(|v| v * v) + &model.bias_z)
}

/// The two parts of the energy response.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyExpansion {
    /// `Σ_f P[k,f]·(w^x_fᵀx)(w^y_fᵀy)`, the gated-model pre-activation
    /// without bias.
    pub cross: DVector<f64>,
    /// `Σ_f P[k,f]·((w^x_fᵀx)² + (w^y_fᵀy)²)`.
    pub quadratic: DVector<f64>,
}

/// Splits the response so that `response = bias + 2·cross + quadratic`.
pub fn expand_energy(model: &EnergyModel, x: &DVector<f64>, y: &DVector<f64>) -> Result<EnergyExpansion> {
    Error::check_dim("x", model.dim_x(), x.len())?;
    Error::check_dim("y", model.dim_y(), y.len())?;
    let a = model.filters_x().tr_mul(x);
    let b = model.filters_y().tr_mul(y);
    Ok(EnergyExpansion {
        cross: &model.pooling * a.component_mul(&b),
        quadratic: &model.pooling * (a.map(|v| v * v) + b.map(|v| v * v)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsaConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub subspace_size: usize,
    /// Learn the pooling matrix (kept nonnegative, rows summing to the
    /// subspace size) instead of keeping it block-diagonal.
    pub learn_pooling: bool,
    pub seed: u64,
}

impl Default for IsaConfig {
    fn default() -> Self {
        IsaConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 10,
            batch_size: 100,
            subspace_size: 2,
            learn_pooling: false,
            seed: 0,
        }
    }
}

impl IsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.subspace_size == 0 {
            return Err(Error::InvalidArgument("batch_size and subspace_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of `Σ_k √(ε + z_k)` over the samples (columns) of `v`.
pub fn isa_objective(model: &EnergyModel, v: &DMatrix<f64>) -> f64 {
    let s = model.filters.tr_mul(v);
    let z = &model.pooling * s.map(|a| a * a);
    z.map(|zk| (ISA_EPSILON + zk).sqrt()).sum() / v.ncols() as f64
}

/// Gradients of [`isa_objective`] with respect to the filters and pooling.
pub fn isa_gradients(model: &EnergyModel, v: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (w, p) = (&model.filters, &model.pooling);
    let (gw, gp) = ordered_fanout(
        v.ncols(),
        |r| {
            let vc = v.columns(r.start, r.len());
            let s = w.tr_mul(&vc);
            let sq = s.map(|a| a * a);
            let z = p * &sq;
            let inv = z.map(|zk| 0.5 / (ISA_EPSILON + zk).sqrt());
            let g = p.tr_mul(&inv).component_mul(&s) * 2.0;
            (vc * g.transpose(), inv * sq.transpose())
        },
        |(a1, b1), (a2, b2)| (a1 + a2, b1 + b2),
    )
    .expect("non-empty data");
    let n = v.ncols() as f64;
    (gw / n, gp / n)
}

fn renormalize_pooling(p: &mut DMatrix<f64>, row_sum: f64) {
    p.apply(|v| *v = v.max(0.0));
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row *= row_sum / s;
        }
    }
}

fn check_whiteness(v: &DMatrix<f64>) {
    let (d, n) = v.shape();
    if n < 2 || d > 2048 {
        return;
    }
    let cov = v * v.transpose() / n as f64;
    let dev = (cov - DMatrix::identity(d, d)).amax();
    if dev > WHITENESS_TOL {
        warn!("ISA input does not look whitened (covariance deviates from identity by {dev:.3})");
    }
}

/// Projected gradient descent on the ISA objective over the concatenated
/// pairs of `batch`, re-orthonormalizing the filters after every step.
pub fn train_isa(
    model: &mut EnergyModel,
    batch: &PairBatch,
    config: &IsaConfig,
    callback: &mut dyn FnMut(&TraceRecord),
) -> Result<TrainReport> {
    train_isa_from_epoch(model, batch, config, 0, callback)
}

/// Like [`train_isa`], numbering epochs from `first_epoch` (used when resuming).
pub fn train_isa_from_epoch(
    model: &mut EnergyModel,
    batch: &PairBatch,
    config: &IsaConfig,
    first_epoch: usize,
    callback: &mut dyn FnMut(&TraceRecord),
) -> Result<TrainReport> {
    config.validate()?;
    Error::check_dim("batch x", model.dim_x(), batch.x_dim())?;
    if model.dim_y() > 0 {
        Error::check_dim("batch y", model.dim_y(), batch.y_dim())?;
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let data = if model.dim_y() > 0 {
        batch.concatenated().x
    } else {
        batch.x.clone()
    };
    check_whiteness(&data);
    let mut report = TrainReport {
        initial_loss: isa_objective(model, &data),
        ..Default::default()
    };
    let mut rng = seeded_rng(config.seed ^ (first_epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut vw = DMatrix::zeros(model.filters.nrows(), model.filters.ncols());
    let mut vp = DMatrix::zeros(model.pooling.nrows(), model.pooling.ncols());
    let row_sum = config.subspace_size as f64;
    let mut order: Vec<usize> = (0..data.ncols()).collect();
    for epoch in first_epoch..first_epoch + config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let v = data.select_columns(idx);
            let loss = isa_objective(model, &v);
            let (gw, gp) = isa_gradients(model, &v);
            let grad_norm = (gw.norm_squared() + gp.norm_squared()).sqrt();
            vw = vw * config.momentum - gw * config.learning_rate;
            model.filters += &vw;
            model.filters = symmetric_orthonormalize(&model.filters).map_err(|e| Error::Divergence {
                epoch,
                batch: b,
                detail: e.to_string(),
            })?;
            if config.learn_pooling {
                vp = vp * config.momentum - gp * config.learning_rate;
                model.pooling += &vp;
                renormalize_pooling(&mut model.pooling, row_sum);
            }
            if !loss.is_finite() || model.filters.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("objective {loss}, gradient norm {grad_norm}"),
                });
            }
            let rec = TraceRecord {
                epoch,
                batch: b,
                loss,
                grad_norm,
            };
            callback(&rec);
            report.records.push(rec);
            total += loss;
            count += 1;
        }
        report.epoch_losses.push(total / count as f64);
    }
    Ok(report)
}
