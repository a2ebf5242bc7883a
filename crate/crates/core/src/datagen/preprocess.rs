use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::PairBatch;
use crate::error::{Error, Result};

/// Fraction of total variance kept by PCA whitening unless told otherwise.
pub const DEFAULT_RETAINED_VARIANCE: f64 = 0.95;

const DEGENERATE_NORM: f64 = 1e-12;

/// Pairs whose `x` or `y` had no contrast left after DC removal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizeReport {
    pub degenerate_x: Vec<usize>,
    pub degenerate_y: Vec<usize>,
}

impl NormalizeReport {
    pub fn is_clean(&self) -> bool {
        self.degenerate_x.is_empty() && self.degenerate_y.is_empty()
    }
}

/// DC-centers a vector and scales it to unit norm. Returns `false` (and
/// leaves zeros) when nothing but the DC component was present.
pub fn normalize_in_place(v: &mut [f64]) -> bool {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|p| *p -= mean);
    let norm = v.iter().map(|p| p * p).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        v.iter_mut().for_each(|p| *p = 0.0);
        return false;
    }
    v.iter_mut().for_each(|p| *p /= norm);
    true
}

fn normalize_columns(m: &mut DMatrix<f64>) -> Vec<usize> {
    let mut bad = Vec::new();
    for (a, mut col) in m.column_iter_mut().enumerate() {
        if !normalize_in_place(col.as_mut_slice()) {
            bad.push(a);
        }
    }
    bad
}

/// Contrast normalization of every `x` and `y`: zero mean, unit norm.
pub fn normalize(batch: &PairBatch) -> (PairBatch, NormalizeReport) {
    let mut out = batch.clone();
    let degenerate_x = normalize_columns(&mut out.x);
    let degenerate_y = normalize_columns(&mut out.y);
    (
        out,
        NormalizeReport {
            degenerate_x,
            degenerate_y,
        },
    )
}

/// [`normalize`] followed by a gain of `√dim`, so every non-degenerate
/// patch has zero mean and unit per-pixel variance. Gated models start
/// from small filters and learn much faster on this scale.
pub fn standardize(batch: &PairBatch) -> (PairBatch, NormalizeReport) {
    let (mut out, report) = normalize(batch);
    let (gx, gy) = ((out.x_dim() as f64).sqrt(), (out.y_dim() as f64).sqrt());
    out.x *= gx;
    out.y *= gy;
    (out, report)
}

/// PCA whitening fitted on a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    /// `k × I`; maps centered data to unit-variance components.
    pub projection: DMatrix<f64>,
    /// `I × k`; maps components back to pixel space.
    pub inverse_projection: DMatrix<f64>,
    /// Fraction of total variance actually kept (at least the requested one).
    pub retained_variance: f64,
}

impl WhiteningTransform {
    pub fn components(&self) -> usize {
        self.projection.nrows()
    }

    pub fn whiten(&self, samples: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = samples.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        &self.projection * centered
    }

    pub fn unwhiten(&self, components: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.inverse_projection * components;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        out
    }
}

/// Fits PCA whitening to the columns of `samples`, keeping the leading
/// eigen-directions that explain `retained_variance` of the total variance.
pub fn fit_whitening_samples(samples: &DMatrix<f64>, retained_variance: f64) -> Result<WhiteningTransform> {
    if !(retained_variance > 0.0 && retained_variance <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retained variance must lie in (0, 1], got {retained_variance}"
        )));
    }
    let (dim, n) = samples.shape();
    if n == 0 {
        return Err(Error::DegenerateData("cannot fit whitening on an empty batch".into()));
    }
    if n < dim {
        warn!("fitting whitening on {n} samples of dimension {dim}; covariance is rank deficient");
    }
    let mean = samples.column_mean();
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = (&centered * centered.transpose()) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= f64::EPSILON * dim as f64 {
        return Err(Error::DegenerateData("batch has no variance to whiten".into()));
    }
    // Directions with negligible variance would blow up under whitening.
    let floor = total * 1e-12;
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &idx in &order {
        let val = eig.eigenvalues[idx];
        if val <= floor {
            break;
        }
        kept.push(idx);
        acc += val;
        if acc / total >= retained_variance - 1e-12 {
            break;
        }
    }
    let k = kept.len();
    let mut projection = DMatrix::zeros(k, dim);
    let mut inverse_projection = DMatrix::zeros(dim, k);
    for (row, &idx) in kept.iter().enumerate() {
        let sd = eig.eigenvalues[idx].sqrt();
        let vec = eig.eigenvectors.column(idx);
        for d in 0..dim {
            projection[(row, d)] = vec[d] / sd;
            inverse_projection[(d, row)] = vec[d] * sd;
        }
    }
    Ok(WhiteningTransform {
        mean,
        projection,
        inverse_projection,
        retained_variance: (acc / total).min(1.0),
    })
}

/// Fits whitening on the images of a batch. When `x` and `y` live in the
/// same space both are used as samples, otherwise only `x`.
pub fn fit_whitening(batch: &PairBatch, retained_variance: f64) -> Result<WhiteningTransform> {
    if batch.is_empty() {
        return Err(Error::DegenerateData("cannot fit whitening on an empty batch".into()));
    }
    if batch.x_dim() == batch.y_dim() && batch.x != batch.y {
        let n = batch.len();
        let mut all = DMatrix::zeros(batch.x_dim(), 2 * n);
        all.columns_mut(0, n).copy_from(&batch.x);
        all.columns_mut(n, n).copy_from(&batch.y);
        fit_whitening_samples(&all, retained_variance)
    } else {
        fit_whitening_samples(&batch.x, retained_variance)
    }
}

/// Whitens both sides of a batch. The resulting shapes are flat
/// (`1 × k`) since components no longer correspond to pixels.
pub fn apply_whitening(batch: &PairBatch, transform: &WhiteningTransform) -> Result<PairBatch> {
    let dim = transform.mean.len();
    Error::check_dim("whitening input", dim, batch.x_dim())?;
    Error::check_dim("whitening input", dim, batch.y_dim())?;
    let shape = super::Shape::image(1, transform.components());
    PairBatch::new(
        transform.whiten(&batch.x),
        transform.whiten(&batch.y),
        shape,
        shape,
        batch.labels.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_shifted_dots, seeded_rng, Shape};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_patch_is_flagged() {
        let b = PairBatch::from_pairs(
            &[(vec![2.0; 4], vec![1.0, 0.0, 0.0, 0.0])],
            Shape::image(2, 2),
            Shape::image(2, 2),
            None,
        )
        .unwrap();
        let (n, report) = normalize(&b);
        assert_eq!(report.degenerate_x, vec![0]);
        assert!(report.degenerate_y.is_empty());
        assert!(n.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_patches_have_zero_mean_unit_norm() {
        let b = gen_shifted_dots(30, 7, 7, 0.3, 2, true, 1).unwrap();
        let (n, _) = normalize(&b);
        for col in n.x.column_iter().chain(n.y.column_iter()) {
            if col.norm() == 0.0 {
                continue;
            }
            assert!(col.mean().abs() < 1e-12);
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
        let (again, _) = normalize(&n);
        assert!((again.x - n.x).amax() < 1e-12);
    }

    #[test]
    fn standardized_patches_have_unit_pixel_variance() {
        let b = gen_shifted_dots(10, 5, 5, 0.3, 2, true, 2).unwrap();
        let (s, _) = standardize(&b);
        for col in s.x.column_iter() {
            let var = col.norm_squared() / 25.0;
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn whitening_rejects_zero_data() {
        let z = DMatrix::zeros(3, 10);
        assert!(matches!(fit_whitening_samples(&z, 0.95), Err(Error::DegenerateData(_))));
        assert!(fit_whitening_samples(&DMatrix::zeros(3, 0), 0.95).is_err());
    }

    #[test]
    fn correlated_gaussian_is_whitened() {
        let mut rng = seeded_rng(11);
        let n = 10_000;
        let mut s = DMatrix::zeros(2, n);
        for a in 0..n {
            let u: f64 = StandardNormal.sample(&mut rng);
            let v: f64 = StandardNormal.sample(&mut rng);
            s[(0, a)] = 3.0 * u + 1.0;
            s[(1, a)] = 2.0 * u + 0.5 * v - 2.0;
        }
        let t = fit_whitening_samples(&s, 1.0).unwrap();
        assert_eq!(t.components(), 2);
        let w = t.whiten(&s);
        // independent sample covariance
        let mut cov = [[0.0; 2]; 2];
        let means: Vec<f64> = (0..2).map(|r| w.row(r).iter().sum::<f64>() / n as f64).collect();
        for a in 0..n {
            for r in 0..2 {
                for c in 0..2 {
                    cov[r][c] += (w[(r, a)] - means[r]) * (w[(c, a)] - means[c]) / n as f64;
                }
            }
        }
        for r in 0..2 {
            for c in 0..2 {
                let target = if r == c { 1.0 } else { 0.0 };
                assert!((cov[r][c] - target).abs() < 0.05, "cov[{r}][{c}] = {}", cov[r][c]);
            }
        }
        let ident = &t.projection * &t.inverse_projection;
        assert!((ident - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn unwhitening_recovers_retained_energy() {
        let b = gen_shifted_dots(400, 6, 6, 0.3, 1, true, 4).unwrap();
        let (b, _) = normalize(&b);
        let t = fit_whitening(&b, 0.8).unwrap();
        let rec = t.unwhiten(&t.whiten(&b.x));
        let mut centered = b.x.clone();
        let mut rec_c = rec.clone();
        for (mut c, mut r) in centered.column_iter_mut().zip(rec_c.column_iter_mut()) {
            c -= &t.mean;
            r -= &t.mean;
        }
        // fitted on x and y together; check the pooled energy ratio
        let rec_y = t.unwhiten(&t.whiten(&b.y));
        let mut cy = b.y.clone();
        let mut ry = rec_y.clone();
        for (mut c, mut r) in cy.column_iter_mut().zip(ry.column_iter_mut()) {
            c -= &t.mean;
            r -= &t.mean;
        }
        let ratio = (rec_c.norm_squared() + ry.norm_squared()) / (centered.norm_squared() + cy.norm_squared());
        assert!((ratio - t.retained_variance).abs() < 0.01, "{ratio} vs {}", t.retained_variance);
        assert!(t.retained_variance >= 0.8);
    }
}
