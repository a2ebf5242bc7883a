//! Training plumbing shared by the gated models: configuration, momentum
//! SGD state, the filter-norm constraint and deterministic batch fan-out.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::FactoredParams;

/// Pairs per parallel work item. Fixed so that the reduction order (and
/// therefore every bit of the result) does not depend on the thread count.
pub const FANOUT_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Reconstruct `y` from `x` and `x` from `y`.
    #[default]
    Symmetric,
    /// Reconstruct `y` from `x` only.
    Predictive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the L1 penalty on mapping-unit activities.
    pub sparsity_weight: f64,
    /// Fraction of input pixels zeroed (denoising); targets stay clean.
    pub corruption_level: f64,
    pub norm_constraint: bool,
    /// Decay of the running average of filter norms.
    pub norm_decay: f64,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 100,
            sparsity_weight: 0.0,
            corruption_level: 0.0,
            norm_constraint: true,
            norm_decay: 0.95,
            objective: Objective::Symmetric,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.sparsity_weight >= 0.0) {
            return bad(format!("sparsity weight must be non-negative, got {}", self.sparsity_weight));
        }
        if !(0.0..1.0).contains(&self.corruption_level) {
            return bad(format!("corruption level must lie in [0, 1), got {}", self.corruption_level));
        }
        if !(0.0..1.0).contains(&self.norm_decay) {
            return bad(format!("norm decay must lie in [0, 1), got {}", self.norm_decay));
        }
        Ok(())
    }
}

/// One line of the JSON-lines loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-batch objective before the first update.
    pub initial_loss: f64,
    /// Mean minibatch objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub records: Vec<TraceRecord>,
}

/// Heavy-ball momentum: `v ← μ·v − η·g; θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    velocity: FactoredParams,
}

impl Momentum {
    pub fn new(like: &FactoredParams) -> Self {
        Momentum {
            velocity: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut FactoredParams, grad: &FactoredParams, lr: f64, momentum: f64) {
        self.velocity.scale(momentum);
        self.velocity.axpy(-lr, grad);
        params.axpy(1.0, &self.velocity);
    }

    /// Ascent variant for likelihood gradients.
    pub fn ascend(&mut self, params: &mut FactoredParams, grad: &FactoredParams, lr: f64, momentum: f64) {
        self.velocity.scale(momentum);
        self.velocity.axpy(lr, grad);
        params.axpy(1.0, &self.velocity);
    }
}

pub(crate) fn column_norms(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    m.column_iter().map(|c| c.norm())
}

pub(crate) fn mean_filter_norm(params: &FactoredParams, tied: bool) -> f64 {
    let mut sum: f64 = column_norms(&params.wx).sum();
    let mut count = params.wx.ncols();
    if !tied {
        sum += column_norms(&params.wy).sum::<f64>();
        count += params.wy.ncols();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn renormalize<R: Rng>(m: &mut DMatrix<f64>, target: f64, rng: &mut R) {
    for mut col in m.column_iter_mut() {
        let mut norm = col.norm();
        if norm < 1e-12 {
            col.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            norm = col.norm();
        }
        col *= target / norm;
    }
}

/// Running average of the mean filter norm; after each update every
/// column of `Wx` and `Wy` is rescaled to the average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConstraint {
    pub running_avg: f64,
    pub decay: f64,
}

impl NormConstraint {
    pub fn apply<R: Rng>(&mut self, params: &mut FactoredParams, tied: bool, rng: &mut R) {
        let current = mean_filter_norm(params, tied);
        if current.is_finite() && current > 0.0 {
            self.running_avg = self.decay * self.running_avg + (1.0 - self.decay) * current;
        }
        renormalize(&mut params.wx, self.running_avg, rng);
        if tied {
            params.wy.copy_from(&params.wx);
        } else {
            renormalize(&mut params.wy, self.running_avg, rng);
        }
    }
}

/// Splits `0..n` into fixed chunks, evaluates them in parallel and folds
/// the results strictly in index order.
pub(crate) fn ordered_fanout<T, F, G>(n: usize, eval: F, mut fold: G) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
    G: FnMut(T, T) -> T,
{
    let ranges: Vec<_> = (0..n)
        .step_by(FANOUT_CHUNK)
        .map(|s| s..(s + FANOUT_CHUNK).min(n))
        .collect();
    let parts: Vec<T> = ranges.into_par_iter().map(|r| eval(r)).collect();
    let mut it = parts.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, p| fold(acc, p)))
}

/// Zero-masking corruption: each entry is kept with probability `1 − level`.
pub(crate) fn corrupt<R: Rng>(m: &DMatrix<f64>, level: f64, rng: &mut R) -> DMatrix<f64> {
    if level <= 0.0 {
        return m.clone();
    }
    m.map(|v| if rng.random::<f64>() < level { 0.0 } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::seeded_rng;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.corruption_level = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.sparsity_weight = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn renormalization_hits_running_average() {
        let mut rng = seeded_rng(1);
        let mut p = FactoredParams::random(&mut rng, 10, 10, 3, 7, 1.0, 1.0);
        p.wx.column_mut(2).fill(0.0);
        let mut nc = NormConstraint { running_avg: 2.0, decay: 0.95 };
        nc.apply(&mut p, false, &mut rng);
        for n in column_norms(&p.wx).chain(column_norms(&p.wy)) {
            assert!((n - nc.running_avg).abs() < 1e-12 * nc.running_avg);
        }
    }

    #[test]
    fn fanout_is_ordered() {
        let total = ordered_fanout(100, |r| vec![r.start], |mut a, b| {
            a.extend(b);
            a
        })
        .unwrap();
        assert_eq!(total, vec![0, 32, 64, 96]);
    }
}
