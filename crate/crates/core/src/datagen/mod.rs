//! Synthetic relational data: random-dot image pairs related by known
//! transformations, plus the usual patch preprocessing.
//!
//! Images are vectorized row-major. A batch keeps its samples as the columns
//! of two matrices so that models can process a whole minibatch with a few
//! matrix products.

mod container;
mod preprocess;

pub use container::{read_batch, write_batch, BatchManifest, GeneratorSpec};
pub use preprocess::{
    apply_whitening, fit_whitening, fit_whitening_samples, normalize, normalize_in_place, standardize,
    NormalizeReport, WhiteningTransform, DEFAULT_RETAINED_VARIANCE,
};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of frames in the moving-dot movie experiment.
pub const DEFAULT_MOVIE_FRAMES: usize = 10;

/// Deterministic generator used everywhere a seed is accepted.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Geometry of one vectorized sample: `frames` images of `height × width`
/// pixels stored one after the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn image(height: usize, width: usize) -> Self {
        Shape {
            frames: 1,
            height,
            width,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A single vectorized image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl Patch {
    pub fn new(pixels: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("patch dimensions must be positive".into()));
        }
        Error::check_dim("patch pixels", height * width, pixels.len())?;
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("patch contains non-finite values".into()));
        }
        Ok(Patch {
            pixels,
            height,
            width,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Ground-truth description of how `y` was produced from `x`.
///
/// Shift vectors are `(dx, dy)`: `dx` moves content along columns, `dy` along
/// rows, so `y[r, c] = x[r - dy, c - dx]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Label {
    Shift { dx: i64, dy: i64 },
    SplitShift { top: (i64, i64), bottom: (i64, i64) },
    Rotation { angle: f64 },
    Motion { vx: i64, vy: i64 },
}

impl Label {
    pub(crate) fn tag(&self) -> u32 {
        match self {
            Label::Shift { .. } => 1,
            Label::SplitShift { .. } => 2,
            Label::Rotation { .. } => 3,
            Label::Motion { .. } => 4,
        }
    }

    pub(crate) fn record_len(tag: u32) -> Option<usize> {
        match tag {
            1 => Some(2),
            2 => Some(4),
            3 => Some(1),
            4 => Some(2),
            _ => None,
        }
    }

    pub(crate) fn to_record(self) -> Vec<f64> {
        match self {
            Label::Shift { dx, dy } => vec![dx as f64, dy as f64],
            Label::SplitShift { top, bottom } => {
                vec![top.0 as f64, top.1 as f64, bottom.0 as f64, bottom.1 as f64]
            }
            Label::Rotation { angle } => vec![angle],
            Label::Motion { vx, vy } => vec![vx as f64, vy as f64],
        }
    }

    pub(crate) fn from_record(tag: u32, rec: &[f64]) -> Option<Label> {
        let int = |v: f64| v as i64;
        match (tag, rec) {
            (1, [dx, dy]) => Some(Label::Shift {
                dx: int(*dx),
                dy: int(*dy),
            }),
            (2, [a, b, c, d]) => Some(Label::SplitShift {
                top: (int(*a), int(*b)),
                bottom: (int(*c), int(*d)),
            }),
            (3, [angle]) => Some(Label::Rotation { angle: *angle }),
            (4, [vx, vy]) => Some(Label::Motion {
                vx: int(*vx),
                vy: int(*vy),
            }),
            _ => None,
        }
    }

    /// Speed and direction (radians, atan2(vy, vx)) of a motion label.
    pub fn speed_direction(&self) -> Option<(f64, f64)> {
        match *self {
            Label::Motion { vx, vy } => {
                let (vx, vy) = (vx as f64, vy as f64);
                Some((vx.hypot(vy), vy.atan2(vx)))
            }
            _ => None,
        }
    }
}

/// Paired training data. Column `α` of `x` and `y` holds pair `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x_shape: Shape,
    pub y_shape: Shape,
    pub labels: Option<Vec<Label>>,
}

impl PairBatch {
    pub fn new(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        x_shape: Shape,
        y_shape: Shape,
        labels: Option<Vec<Label>>,
    ) -> Result<Self> {
        Error::check_dim("x rows", x_shape.len(), x.nrows())?;
        Error::check_dim("y rows", y_shape.len(), y.nrows())?;
        Error::check_dim("pair count", x.ncols(), y.ncols())?;
        if let Some(labels) = &labels {
            Error::check_dim("label count", x.ncols(), labels.len())?;
        }
        Ok(PairBatch {
            x,
            y,
            x_shape,
            y_shape,
            labels,
        })
    }

    /// Builds a batch from vectors; all `x` (and all `y`) must share a length.
    pub fn from_pairs(
        pairs: &[(Vec<f64>, Vec<f64>)],
        x_shape: Shape,
        y_shape: Shape,
        labels: Option<Vec<Label>>,
    ) -> Result<Self> {
        let n = pairs.len();
        let mut x = DMatrix::zeros(x_shape.len(), n);
        let mut y = DMatrix::zeros(y_shape.len(), n);
        for (a, (px, py)) in pairs.iter().enumerate() {
            Error::check_dim("x length", x_shape.len(), px.len())?;
            Error::check_dim("y length", y_shape.len(), py.len())?;
            x.column_mut(a).copy_from_slice(px);
            y.column_mut(a).copy_from_slice(py);
        }
        PairBatch::new(x, y, x_shape, y_shape, labels)
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn y_dim(&self) -> usize {
        self.y.nrows()
    }

    /// Pair `alpha` as two patches (movie frames are stacked vertically).
    pub fn pair(&self, alpha: usize) -> (Patch, Patch) {
        let as_patch = |m: &DMatrix<f64>, s: Shape| Patch {
            pixels: m.column(alpha).iter().copied().collect(),
            height: s.frames * s.height,
            width: s.width,
        };
        (as_patch(&self.x, self.x_shape), as_patch(&self.y, self.y_shape))
    }

    pub fn label(&self, alpha: usize) -> Option<Label> {
        self.labels.as_ref().map(|l| l[alpha])
    }

    /// Sub-batch with the given pair indices, in order.
    pub fn select(&self, indices: &[usize]) -> PairBatch {
        PairBatch {
            x: self.x.select_columns(indices),
            y: self.y.select_columns(indices),
            x_shape: self.x_shape,
            y_shape: self.y_shape,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Pairs `(x, y)` turned into a single concatenated sample `[x; y]`,
    /// stored tied (`y` equals `x`). Used for energy models on image pairs.
    pub fn concatenated(&self) -> PairBatch {
        let n = self.len();
        let (i, j) = (self.x_dim(), self.y_dim());
        let mut v = DMatrix::zeros(i + j, n);
        v.view_mut((0, 0), (i, n)).copy_from(&self.x);
        v.view_mut((i, 0), (j, n)).copy_from(&self.y);
        let shape = Shape {
            frames: self.x_shape.frames + self.y_shape.frames,
            height: self.x_shape.height,
            width: self.x_shape.width,
        };
        PairBatch {
            x: v.clone(),
            y: v,
            x_shape: shape,
            y_shape: shape,
            labels: self.labels.clone(),
        }
    }
}

/// Interpolation used by the rotation generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

fn check_geometry(height: usize, width: usize, dot_density: f64) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch dimensions must be positive, got {height}x{width}"
        )));
    }
    if !(dot_density > 0.0 && dot_density < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dot density must lie in (0, 1), got {dot_density}"
        )));
    }
    Ok(())
}

/// Single bright pixels on a dark background, each on with probability `density`.
pub fn random_dots<R: Rng>(rng: &mut R, len: usize, density: f64) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 })
        .collect()
}

/// Translates an image by `(dx, dy)`: `out[r, c] = src[r - dy, c - dx]`,
/// either cyclically or with zeros shifted in.
pub fn shift_image(src: &[f64], height: usize, width: usize, dx: i64, dy: i64, wrap: bool) -> Vec<f64> {
    let (h, w) = (height as i64, width as i64);
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let (mut sr, mut sc) = (r - dy, c - dx);
            if wrap {
                sr = sr.rem_euclid(h);
                sc = sc.rem_euclid(w);
            } else if sr < 0 || sr >= h || sc < 0 || sc >= w {
                continue;
            }
            out[(r * w + c) as usize] = src[(sr * w + sc) as usize];
        }
    }
    out
}

fn draw_shift<R: Rng>(rng: &mut R, max_shift: usize) -> (i64, i64) {
    let m = max_shift as i64;
    (rng.random_range(-m..=m), rng.random_range(-m..=m))
}

/// Pairs of random-dot images where `y` is `x` translated by a shift drawn
/// uniformly from `[-max_shift, max_shift]²`.
pub fn gen_shifted_dots(
    num_pairs: usize,
    height: usize,
    width: usize,
    dot_density: f64,
    max_shift: usize,
    wraparound: bool,
    seed: u64,
) -> Result<PairBatch> {
    check_geometry(height, width, dot_density)?;
    if max_shift >= height.min(width) {
        return Err(Error::InvalidArgument(format!(
            "max_shift {max_shift} must be below min(height, width) = {}",
            height.min(width)
        )));
    }
    let mut rng = seeded_rng(seed);
    let shape = Shape::image(height, width);
    let mut pairs = Vec::with_capacity(num_pairs);
    let mut labels = Vec::with_capacity(num_pairs);
    for _ in 0..num_pairs {
        let x = random_dots(&mut rng, shape.len(), dot_density);
        let (dx, dy) = draw_shift(&mut rng, max_shift);
        let y = shift_image(&x, height, width, dx, dy, wraparound);
        pairs.push((x, y));
        labels.push(Label::Shift { dx, dy });
    }
    PairBatch::from_pairs(&pairs, shape, shape, Some(labels))
}

/// One-dimensional variant: `length`-pixel signals (height 1) shifted
/// horizontally by a value drawn uniformly from `[-max_shift, max_shift]`.
pub fn gen_shifted_dots_1d(
    num_pairs: usize,
    length: usize,
    dot_density: f64,
    max_shift: usize,
    wraparound: bool,
    seed: u64,
) -> Result<PairBatch> {
    check_geometry(1, length, dot_density)?;
    if max_shift >= length {
        return Err(Error::InvalidArgument(format!(
            "max_shift {max_shift} must be below the signal length {length}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let shape = Shape::image(1, length);
    let m = max_shift as i64;
    let mut pairs = Vec::with_capacity(num_pairs);
    let mut labels = Vec::with_capacity(num_pairs);
    for _ in 0..num_pairs {
        let x = random_dots(&mut rng, length, dot_density);
        let dx = rng.random_range(-m..=m);
        let y = shift_image(&x, 1, length, dx, 0, wraparound);
        pairs.push((x, y));
        labels.push(Label::Shift { dx, dy: 0 });
    }
    PairBatch::from_pairs(&pairs, shape, shape, Some(labels))
}

/// Applies independent cyclic shifts to the top and bottom halves.
pub fn split_shift_image(
    src: &[f64],
    height: usize,
    width: usize,
    top: (i64, i64),
    bottom: (i64, i64),
) -> Vec<f64> {
    let half = height / 2 * width;
    let mut out = shift_image(&src[..half], height / 2, width, top.0, top.1, true);
    out.extend(shift_image(&src[half..], height - height / 2, width, bottom.0, bottom.1, true));
    out
}

/// Split-screen translations: the two halves move independently.
pub fn gen_splitscreen_dots(
    num_pairs: usize,
    height: usize,
    width: usize,
    dot_density: f64,
    max_shift: usize,
    seed: u64,
) -> Result<PairBatch> {
    check_geometry(height, width, dot_density)?;
    if height % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "split-screen data needs an even height, got {height}"
        )));
    }
    if max_shift >= (height / 2).min(width) {
        return Err(Error::InvalidArgument(format!(
            "max_shift {max_shift} must be below min(height/2, width) = {}",
            (height / 2).min(width)
        )));
    }
    let mut rng = seeded_rng(seed);
    let shape = Shape::image(height, width);
    let mut pairs = Vec::with_capacity(num_pairs);
    let mut labels = Vec::with_capacity(num_pairs);
    for _ in 0..num_pairs {
        let x = random_dots(&mut rng, shape.len(), dot_density);
        let top = draw_shift(&mut rng, max_shift);
        let bottom = draw_shift(&mut rng, max_shift);
        let y = split_shift_image(&x, height, width, top, bottom);
        pairs.push((x, y));
        labels.push(Label::SplitShift { top, bottom });
    }
    PairBatch::from_pairs(&pairs, shape, shape, Some(labels))
}

/// Rotates an image about its center. Output pixel `(r, c)` samples the
/// source at the inverse-rotated location; samples outside the image are 0.
///
/// With `(u, v) = (c - cc, r - cr)` the source point is
/// `(cos a·u + sin a·v, -sin a·u + cos a·v)`, so a quarter turn maps
/// `y[r, c] = x[n - 1 - c, r]` on an `n × n` patch.
pub fn rotate_image(src: &[f64], height: usize, width: usize, angle: f64, interp: Interpolation) -> Vec<f64> {
    let (cr, cc) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let fetch = |r: i64, col: i64| -> f64 {
        if r < 0 || col < 0 || r >= height as i64 || col >= width as i64 {
            0.0
        } else {
            src[r as usize * width + col as usize]
        }
    };
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        for col in 0..width {
            let (u, v) = (col as f64 - cc, r as f64 - cr);
            let sc = c * u + s * v + cc;
            let sr = -s * u + c * v + cr;
            out[r * width + col] = match interp {
                Interpolation::Nearest => fetch(sr.round() as i64, sc.round() as i64),
                Interpolation::Bilinear => {
                    let (r0, c0) = (sr.floor(), sc.floor());
                    let (fr, fc) = (sr - r0, sc - c0);
                    let (r0, c0) = (r0 as i64, c0 as i64);
                    (1.0 - fr) * (1.0 - fc) * fetch(r0, c0)
                        + (1.0 - fr) * fc * fetch(r0, c0 + 1)
                        + fr * (1.0 - fc) * fetch(r0 + 1, c0)
                        + fr * fc * fetch(r0 + 1, c0 + 1)
                }
            };
        }
    }
    out
}

/// Pairs where `y` is `x` rotated about the patch center by an angle drawn
/// uniformly from `[-max_angle, max_angle]`.
pub fn gen_rotated_pairs(
    num_pairs: usize,
    height: usize,
    width: usize,
    dot_density: f64,
    max_angle: f64,
    interp: Interpolation,
    seed: u64,
) -> Result<PairBatch> {
    check_geometry(height, width, dot_density)?;
    if !(max_angle > 0.0 && max_angle <= std::f64::consts::PI) {
        return Err(Error::InvalidArgument(format!(
            "max_angle must lie in (0, pi], got {max_angle}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let shape = Shape::image(height, width);
    let mut pairs = Vec::with_capacity(num_pairs);
    let mut labels = Vec::with_capacity(num_pairs);
    for _ in 0..num_pairs {
        let x = random_dots(&mut rng, shape.len(), dot_density);
        let angle = rng.random_range(-max_angle..=max_angle);
        let y = rotate_image(&x, height, width, angle, interp);
        pairs.push((x, y));
        labels.push(Label::Rotation { angle });
    }
    PairBatch::from_pairs(&pairs, shape, shape, Some(labels))
}

/// Movies of dots drifting at a constant integer velocity with wraparound.
/// Each sample concatenates all frames; `y` equals `x` (tied configuration).
/// Velocity components are drawn uniformly from `[-speed_range, speed_range]`.
pub fn gen_dot_movies(
    num_movies: usize,
    height: usize,
    width: usize,
    num_frames: usize,
    dot_density: f64,
    speed_range: usize,
    seed: u64,
) -> Result<PairBatch> {
    check_geometry(height, width, dot_density)?;
    if num_frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "movies need at least 2 frames, got {num_frames}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let shape = Shape {
        frames: num_frames,
        height,
        width,
    };
    let mut pairs = Vec::with_capacity(num_movies);
    let mut labels = Vec::with_capacity(num_movies);
    for _ in 0..num_movies {
        let first = random_dots(&mut rng, shape.frame_len(), dot_density);
        let (vx, vy) = draw_shift(&mut rng, speed_range);
        let mut movie = Vec::with_capacity(shape.len());
        for t in 0..num_frames as i64 {
            movie.extend(shift_image(&first, height, width, vx * t, vy * t, true));
        }
        pairs.push((movie.clone(), movie));
        labels.push(Label::Motion { vx, vy });
    }
    PairBatch::from_pairs(&pairs, shape, shape, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_identity() {
        let b = gen_shifted_dots(20, 9, 9, 0.2, 0, true, 3).unwrap();
        assert_eq!(b.x, b.y);
        for l in b.labels.unwrap() {
            assert_eq!(l, Label::Shift { dx: 0, dy: 0 });
        }
    }

    #[test]
    fn generators_reject_bad_arguments() {
        assert!(gen_shifted_dots(1, 0, 9, 0.2, 0, true, 0).is_err());
        assert!(gen_shifted_dots(1, 9, 9, 1.0, 0, true, 0).is_err());
        assert!(gen_shifted_dots(1, 9, 9, 0.0, 0, true, 0).is_err());
        assert!(gen_shifted_dots(1, 9, 9, 0.1, 9, true, 0).is_err());
        assert!(gen_splitscreen_dots(1, 9, 9, 0.1, 1, 0).is_err());
        assert!(gen_rotated_pairs(1, 9, 9, 0.1, 0.0, Interpolation::Bilinear, 0).is_err());
        assert!(gen_rotated_pairs(1, 9, 9, 0.1, 4.0, Interpolation::Bilinear, 0).is_err());
        assert!(gen_dot_movies(1, 8, 8, 1, 0.1, 1, 0).is_err());
    }

    #[test]
    fn zero_padded_shift_drops_content() {
        let mut x = vec![0.0; 9];
        x[2] = 1.0; // row 0, col 2
        let y = shift_image(&x, 3, 3, 1, 0, false);
        assert!(y.iter().all(|&v| v == 0.0));
        let y = shift_image(&x, 3, 3, 1, 0, true);
        assert_eq!(y[0], 1.0);
    }

    #[test]
    fn split_screen_without_shift_is_identity() {
        let b = gen_splitscreen_dots(10, 8, 8, 0.2, 0, 1).unwrap();
        assert_eq!(b.x, b.y);
    }

    #[test]
    fn zero_angle_rotation_is_identity() {
        let mut rng = seeded_rng(5);
        let x = random_dots(&mut rng, 121, 0.3);
        let y = rotate_image(&x, 11, 11, 0.0, Interpolation::Bilinear);
        assert_eq!(x, y);
    }

    #[test]
    fn half_turn_of_centered_dot_is_identity() {
        let mut x = vec![0.0; 121];
        x[60] = 1.0;
        let y = rotate_image(&x, 11, 11, std::f64::consts::PI, Interpolation::Bilinear);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn static_movies_repeat_first_frame() {
        let b = gen_dot_movies(5, 6, 6, 10, 0.2, 0, 9).unwrap();
        for a in 0..b.len() {
            let col = b.x.column(a);
            for t in 1..10 {
                for p in 0..36 {
                    assert_eq!(col[t * 36 + p], col[p]);
                }
            }
        }
        assert_eq!(b.x_shape.frames, DEFAULT_MOVIE_FRAMES);
    }

    #[test]
    fn motion_label_speed_direction() {
        let (s, d) = Label::Motion { vx: 0, vy: 2 }.speed_direction().unwrap();
        assert_eq!(s, 2.0);
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }
}
