//! Inference on trained gated models: per-pixel flow read off the inferred
//! warp, and transfer of an inferred transformation to new inputs.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::datagen::{Label, PairBatch, Shape};
use crate::error::{Error, Result};
use crate::tensor_core::{FactoredParams, MappingCode};

/// Largest patch (in pixels) for which a full warp is materialized.
pub const MAX_FLOW_PIXELS: usize = 1024;

/// Pixels below this fraction of the strongest confidence are ignored by
/// the summary statistics.
pub const CONFIDENCE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct FlowOptions {
    /// Threshold the code at 0.5 before building the warp.
    pub binarize: bool,
    /// Report displacements modulo the patch size, choosing the shortest
    /// representative (appropriate for wraparound data).
    pub wrap: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            binarize: false,
            wrap: true,
        }
    }
}

/// Displacement `(dx, dy)` (columns, rows) of every input pixel, row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<i64>,
    pub dy: Vec<i64>,
    /// Warp weight at the chosen output position.
    pub confidence: Vec<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl FlowField {
    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    /// Pixels (optionally restricted to `rows`) whose confidence reaches
    /// [`CONFIDENCE_FRACTION`] of the maximum.
    pub fn confident_pixels(&self, rows: std::ops::Range<usize>) -> Vec<usize> {
        let in_rows = |p: &usize| rows.contains(&(p / self.width));
        let max = (0..self.len())
            .filter(in_rows)
            .map(|p| self.confidence[p])
            .fold(f64::NEG_INFINITY, f64::max);
        (0..self.len())
            .filter(in_rows)
            .filter(|&p| self.confidence[p] >= CONFIDENCE_FRACTION * max)
            .collect()
    }

    /// Componentwise median displacement of the confident pixels in `rows`.
    pub fn median_in_rows(&self, rows: std::ops::Range<usize>) -> (f64, f64) {
        let pixels = self.confident_pixels(rows);
        if pixels.is_empty() {
            return (0.0, 0.0);
        }
        let mut dx: Vec<f64> = pixels.iter().map(|&p| self.dx[p] as f64).collect();
        let mut dy: Vec<f64> = pixels.iter().map(|&p| self.dy[p] as f64).collect();
        (median(&mut dx), median(&mut dy))
    }

    pub fn median_displacement(&self) -> (f64, f64) {
        self.median_in_rows(0..self.height)
    }

    /// Fraction of confident pixels whose displacement equals the rounded
    /// median displacement.
    pub fn uniformity(&self) -> f64 {
        let pixels = self.confident_pixels(0..self.height);
        if pixels.is_empty() {
            return 0.0;
        }
        let (mx, my) = self.median_displacement();
        let (mx, my) = (mx.round() as i64, my.round() as i64);
        let agree = pixels.iter().filter(|&&p| self.dx[p] == mx && self.dy[p] == my).count();
        agree as f64 / pixels.len() as f64
    }
}

fn check_model(params: &FactoredParams) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::InvalidArgument("model parameters are not finite".into()));
    }
    Ok(())
}

/// Mapping code of a pair; the shared encoding path of every gated model.
pub fn infer_code(params: &FactoredParams, x: &DVector<f64>, y: &DVector<f64>) -> Result<MappingCode> {
    let h = params.factor_x(x)?.component_mul(&params.factor_y(y)?);
    Ok(MappingCode::from_pre_activation(&params.wz * h + &params.bias_z))
}

fn signed_offset(d: i64, n: usize, wrap: bool) -> i64 {
    if !wrap {
        return d;
    }
    let n = n as i64;
    let m = d.rem_euclid(n);
    if m > n / 2 {
        m - n
    } else {
        m
    }
}

/// Flow field of the transformation inferred from `(x, y)`: for every input
/// pixel, the output pixel it is most strongly connected to in the warp
/// `L = Wy·diag(Wzᵀz)·Wxᵀ`. Ties go to the smallest displacement, then to
/// the earliest output pixel.
pub fn infer_flow(
    params: &FactoredParams,
    x: &DVector<f64>,
    y: &DVector<f64>,
    shape: Shape,
    options: FlowOptions,
) -> Result<FlowField> {
    check_model(params)?;
    let (ni, nj, _, _) = params.dims();
    if ni != nj {
        return Err(Error::InvalidArgument(format!(
            "flow needs equal input and output sizes, got {ni} and {nj}"
        )));
    }
    if ni > MAX_FLOW_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "patch of {ni} pixels exceeds the flow limit of {MAX_FLOW_PIXELS}"
        )));
    }
    Error::check_dim("flow shape", ni, shape.frame_len())?;
    let mut code = infer_code(params, x, y)?.z;
    if options.binarize {
        code.apply(|v| *v = if *v > 0.5 { 1.0 } else { 0.0 });
    }
    let l = params.warp(&code)?.matrix;
    Ok(flow_from_warp(&l, shape, options.wrap))
}

/// Per-pixel argmax displacement of an explicit warp (`L[j, i]` maps input
/// pixel `i` to output pixel `j`).
pub fn flow_from_warp(l: &DMatrix<f64>, shape: Shape, wrap: bool) -> FlowField {
    let (h, w) = (shape.height, shape.width);
    let n = l.ncols();
    let mut field = FlowField {
        height: h,
        width: w,
        dx: vec![0; n],
        dy: vec![0; n],
        confidence: vec![0.0; n],
    };
    for i in 0..n {
        let (ri, ci) = ((i / w) as i64, (i % w) as i64);
        let col = l.column(i);
        let max = col.max();
        let mut best: Option<(i64, i64, i64)> = None;
        for j in 0..l.nrows() {
            if col[j] != max {
                continue;
            }
            let dx = signed_offset((j % w) as i64 - ci, w, wrap);
            let dy = signed_offset((j / w) as i64 - ri, h, wrap);
            let mag = dx * dx + dy * dy;
            if best.is_none_or(|(m, _, _)| mag < m) {
                best = Some((mag, dx, dy));
            }
        }
        let (_, dx, dy) = best.expect("non-empty column");
        field.dx[i] = dx;
        field.dy[i] = dy;
        field.confidence[i] = max;
    }
    field
}

/// Applies the transformation inferred from a source pair to a new input.
pub fn analogy(
    params: &FactoredParams,
    x_src: &DVector<f64>,
    y_src: &DVector<f64>,
    x_new: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_model(params)?;
    let z = infer_code(params, x_src, y_src)?.z;
    decode_with_code(params, x_new, &z)
}

pub fn decode_with_code(params: &FactoredParams, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let g = params.factor_x(x)?.component_mul(&params.factor_z(z)?);
    Ok(&params.wy * g + &params.bias_y)
}

/// Pearson correlation of two vectors (0 when either is constant).
pub fn correlation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let ca = a.add_scalar(-ma);
    let cb = b.add_scalar(-mb);
    let denom = ca.norm() * cb.norm();
    if denom == 0.0 {
        0.0
    } else {
        ca.dot(&cb) / denom
    }
}

/// Mean cosine similarity of codes within and across transformation labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodeClustering {
    pub within: f64,
    pub across: f64,
}

impl CodeClustering {
    pub fn gap(&self) -> f64 {
        self.within - self.across
    }
}

pub fn code_clustering(params: &FactoredParams, batch: &PairBatch) -> Result<CodeClustering> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("code clustering needs labelled pairs".into()))?;
    let codes: Vec<DVector<f64>> = (0..batch.len())
        .map(|a| {
            let z = infer_code(params, &batch.x.column(a).into_owned(), &batch.y.column(a).into_owned())?.z;
            let n = z.norm();
            Ok(if n > 0.0 { z / n } else { z })
        })
        .collect::<Result<_>>()?;
    let same = |a: &Label, b: &Label| a == b;
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..codes.len() {
        for b in a + 1..codes.len() {
            let c = codes[a].dot(&codes[b]);
            if same(&labels[a], &labels[b]) {
                within += c;
                nw += 1;
            } else {
                across += c;
                na += 1;
            }
        }
    }
    if nw == 0 || na == 0 {
        return Err(Error::DegenerateData(
            "need at least two pairs per label and at least two labels".into(),
        ));
    }
    Ok(CodeClustering {
        within: within / nw as f64,
        across: across / na as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::seeded_rng;
    use crate::spectral::make_2d_shift;
    use crate::tensor_core::{expand_factored, warp_from_code};

    #[test]
    fn shift_warp_gives_uniform_flow() {
        let l = make_2d_shift(5, 6, 1, 4).unwrap().matrix;
        let f = flow_from_warp(&l, Shape::image(5, 6), true);
        assert!(f.dx.iter().all(|&d| d == -2));
        assert!(f.dy.iter().all(|&d| d == 1));
        assert_eq!(f.uniformity(), 1.0);
        assert_eq!(f.median_displacement(), (-2.0, 1.0));
    }

    #[test]
    fn identity_has_zero_flow() {
        let l = DMatrix::identity(9, 9);
        let f = flow_from_warp(&l, Shape::image(3, 3), true);
        assert!(f.dx.iter().chain(&f.dy).all(|&d| d == 0));
    }

    #[test]
    fn ties_prefer_small_displacement() {
        // pixel 0 connects equally to itself and to pixel 2
        let mut l = DMatrix::zeros(4, 4);
        l[(2, 0)] = 1.0;
        l[(0, 0)] = 1.0;
        l[(1, 1)] = 1.0;
        l[(3, 2)] = 1.0;
        l[(2, 3)] = 1.0;
        let f = flow_from_warp(&l, Shape::image(1, 4), false);
        assert_eq!(f.dx[0], 0);
        assert_eq!(f.dx[2], 1);
    }

    #[test]
    fn wrapped_offsets_are_minimal() {
        assert_eq!(signed_offset(4, 5, true), -1);
        assert_eq!(signed_offset(-4, 5, true), 1);
        assert_eq!(signed_offset(2, 4, true), 2);
        assert_eq!(signed_offset(-3, 5, false), -3);
    }

    #[test]
    fn factored_warp_matches_dense_slices() {
        let mut rng = seeded_rng(2);
        let p = FactoredParams::random(&mut rng, 6, 6, 3, 5, 1.0, 1.0);
        let z = DVector::from_vec(vec![0.2, 0.9, 0.5]);
        let dense = warp_from_code(&expand_factored(&p).unwrap(), &z).unwrap();
        assert!((p.warp(&z).unwrap().matrix - dense.matrix).amax() < 1e-12);
    }

    #[test]
    fn zero_code_analogy_gives_bias() {
        let mut rng = seeded_rng(3);
        let mut p = FactoredParams::random(&mut rng, 4, 4, 2, 3, 1.0, 1.0);
        p.bias_y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = DVector::from_element(4, 1.0);
        let out = decode_with_code(&p, &x, &DVector::zeros(2)).unwrap();
        assert_eq!(out, p.bias_y);
    }

    #[test]
    fn non_finite_model_is_rejected() {
        let mut p = FactoredParams::zeros(4, 4, 2, 2);
        p.wx[(0, 0)] = f64::NAN;
        let v = DVector::zeros(4);
        assert!(infer_flow(&p, &v, &v, Shape::image(2, 2), FlowOptions::default()).is_err());
        assert!(analogy(&p, &v, &v, &v).is_err());
    }

    #[test]
    fn correlation_basics() {
        let a = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!((correlation(&a, &(&a * 2.0)) - 1.0).abs() < 1e-12);
        assert!((correlation(&a, &(-&a)) + 1.0).abs() < 1e-12);
        assert_eq!(correlation(&a, &DVector::from_element(3, 1.0)), 0.0);
    }
}
