//! Orthogonal warps, their shared invariant subspaces, and the subspace
//! rotation detectors built from them.
//!
//! A set of commuting orthogonal warps is simultaneously diagonalized by a
//! unitary basis. Each complex eigenvector `u = (v_R + i·v_I)/√2` spans a
//! two-dimensional real subspace on which every warp acts as a planar
//! rotation. Projections use the Hermitian inner product, so for `y = L·x`
//! and `L·u = λ·u` the coefficient `u*y` equals `λ·u*x`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use log::warn;
use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::datagen::seeded_rng;
use crate::error::{Error, Result};

type C64 = Complex<f64>;

const COMMUTE_TOL: f64 = 1e-8;
const OFFDIAG_TOL: f64 = 1e-6;
const CLUSTER_TOL: f64 = 1e-7;
const BASIS_SEED: u64 = 0x5eed_ba51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    CyclicShift,
    Permutation,
    RotationOrthogonalized,
    Custom,
}

/// A linear map on vectorized images, `y = L·x` (`L` is `J × I`).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpMatrix {
    pub matrix: DMatrix<f64>,
    pub kind: WarpKind,
}

impl WarpMatrix {
    pub fn new(matrix: DMatrix<f64>, kind: WarpKind) -> Self {
        WarpMatrix { matrix, kind }
    }

    pub fn identity(n: usize) -> Self {
        WarpMatrix::new(DMatrix::identity(n, n), WarpKind::Permutation)
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim("warp input", self.matrix.ncols(), x.len())?;
        Ok(&self.matrix * x)
    }

    /// `max |LᵀL − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.matrix.ncols();
        (self.matrix.tr_mul(&self.matrix) - DMatrix::<f64>::identity(n, n)).amax()
    }

    pub fn compose(&self, other: &WarpMatrix) -> WarpMatrix {
        let kind = if self.kind == other.kind { self.kind } else { WarpKind::Custom };
        WarpMatrix::new(&self.matrix * &other.matrix, kind)
    }

    /// Nearest orthogonal matrix (polar factor `U·Vᵀ` of the SVD).
    pub fn orthogonalized(&self) -> WarpMatrix {
        let svd = self.matrix.clone().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        WarpMatrix::new(u * vt, WarpKind::RotationOrthogonalized)
    }
}

/// Cyclic shift of an `n`-vector: `(L·x)[i] = x[(i − s) mod n]`.
pub fn make_cyclic_shift(n: usize, s: usize) -> Result<WarpMatrix> {
    if n == 0 || s >= n {
        return Err(Error::InvalidArgument(format!("shift {s} out of range for n = {n}")));
    }
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, (i + n - s) % n)] = 1.0;
    }
    Ok(WarpMatrix::new(m, WarpKind::CyclicShift))
}

/// Cyclic shift of an `h × w` image by `sr` rows and `sc` columns:
/// `y[r, c] = x[r − sr, c − sc]` with wraparound.
pub fn make_2d_shift(h: usize, w: usize, sr: usize, sc: usize) -> Result<WarpMatrix> {
    if h == 0 || w == 0 || sr >= h || sc >= w {
        return Err(Error::InvalidArgument(format!(
            "shift ({sr}, {sc}) out of range for a {h}x{w} image"
        )));
    }
    let n = h * w;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..h {
        for c in 0..w {
            let src = ((r + h - sr) % h) * w + (c + w - sc) % w;
            m[(r * w + c, src)] = 1.0;
        }
    }
    Ok(WarpMatrix::new(m, WarpKind::CyclicShift))
}

/// Independent cyclic shifts of the top and bottom halves of an image
/// (`(sr, sc)` per half); block diagonal.
pub fn make_split_shift(h: usize, w: usize, top: (usize, usize), bottom: (usize, usize)) -> Result<WarpMatrix> {
    if h % 2 != 0 {
        return Err(Error::InvalidArgument("split shift needs an even height".into()));
    }
    let half = h / 2;
    let t = make_2d_shift(half, w, top.0, top.1)?;
    let b = make_2d_shift(half, w, bottom.0, bottom.1)?;
    let n = half * w;
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&t.matrix);
    m.view_mut((n, n), (n, n)).copy_from(&b.matrix);
    Ok(WarpMatrix::new(m, WarpKind::Permutation))
}

/// The image-rotation warp used by the data generator, as a matrix
/// (column `i` is the rotated unit image `e_i`).
pub fn make_rotation(h: usize, w: usize, angle: f64, interp: crate::datagen::Interpolation) -> WarpMatrix {
    let n = h * w;
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for i in 0..n {
        e[i] = 1.0;
        let col = crate::datagen::rotate_image(&e, h, w, angle, interp);
        m.column_mut(i).copy_from_slice(&col);
        e[i] = 0.0;
    }
    WarpMatrix::new(m, WarpKind::Custom)
}

/// A real invariant subspace of the shared eigenbasis. Two-dimensional for
/// complex eigenvalues (`imag` present), one-dimensional for real ones.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSubspace {
    pub real: DVector<f64>,
    pub imag: Option<DVector<f64>>,
    /// Column of the eigenvector matrix this subspace was built from.
    pub eigen_index: usize,
    /// Column of the conjugate eigenvector, when there is one.
    pub partner: Option<usize>,
}

impl InvariantSubspace {
    pub fn dim(&self) -> usize {
        1 + self.imag.is_some() as usize
    }

    /// Complex filter `v_R + i·v_I` (unit-norm per part).
    pub fn complex_filter(&self) -> DVector<C64> {
        let n = self.real.len();
        DVector::from_fn(n, |r, _| {
            C64::new(self.real[r], self.imag.as_ref().map_or(0.0, |v| v[r]))
        })
    }

    /// Squared norm of the projection of `v` onto the subspace.
    pub fn captured_energy(&self, v: &DVector<f64>) -> f64 {
        let a = self.real.dot(v);
        let b = self.imag.as_ref().map_or(0.0, |u| u.dot(v));
        a * a + b * b
    }
}

/// Simultaneous eigendecomposition of a set of commuting normal warps.
#[derive(Debug, Clone)]
pub struct EigenStructure {
    /// Unitary `I × I` matrix whose columns are the shared eigenvectors.
    pub eigenvectors: DMatrix<C64>,
    /// One eigenvalue vector (the diagonal of `D`) per input warp.
    pub eigenvalues: Vec<DVector<C64>>,
    pub subspace_pairing: Vec<InvariantSubspace>,
}

impl EigenStructure {
    pub fn dim(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// `max |L − U·D·U*|` for warp `w`.
    pub fn reconstruction_error(&self, w: usize, warp: &WarpMatrix) -> f64 {
        let u = &self.eigenvectors;
        let d = DMatrix::from_diagonal(&self.eigenvalues[w]);
        let rec = u * d * u.adjoint();
        let mut err: f64 = 0.0;
        for (a, b) in rec.iter().zip(warp.matrix.iter()) {
            err = err.max((a - C64::new(*b, 0.0)).norm());
        }
        err
    }

    /// Largest off-diagonal magnitude of `U*·L·U`.
    pub fn offdiagonal_residual(&self, warp: &WarpMatrix) -> f64 {
        offdiag(&self.eigenvectors, &to_complex(&warp.matrix))
    }

    pub fn summary(&self) -> EigenSummary {
        let warps = self
            .eigenvalues
            .iter()
            .map(|ev| WarpEigenSummary {
                eigenvalues: ev.iter().map(|c| [c.re, c.im]).collect(),
                angles: ev.iter().map(|c| c.arg()).collect(),
                max_modulus_deviation: ev.iter().map(|c| (c.norm() - 1.0).abs()).fold(0.0, f64::max),
            })
            .collect();
        EigenSummary {
            dim: self.dim(),
            num_subspaces: self.subspace_pairing.len(),
            subspace_dims: self.subspace_pairing.iter().map(|s| s.dim()).collect(),
            warps,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WarpEigenSummary {
    /// `[re, im]` per eigenvalue, in basis order.
    pub eigenvalues: Vec<[f64; 2]>,
    pub angles: Vec<f64>,
    pub max_modulus_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenSummary {
    pub dim: usize,
    pub num_subspaces: usize,
    pub subspace_dims: Vec<usize>,
    pub warps: Vec<WarpEigenSummary>,
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

fn offdiag(u: &DMatrix<C64>, l: &DMatrix<C64>) -> f64 {
    let d = u.adjoint() * l * u;
    let mut worst: f64 = 0.0;
    for r in 0..d.nrows() {
        for c in 0..d.ncols() {
            if r != c {
                worst = worst.max(d[(r, c)].norm());
            }
        }
    }
    worst
}

fn is_real_tuple(t: &[C64]) -> bool {
    t.iter().all(|c| c.im.abs() < CLUSTER_TOL)
}

fn tuples_close(a: &[C64], b: &[C64]) -> bool {
    a.iter().zip(b).all(|(p, q)| (p - q).norm() < CLUSTER_TOL)
}

/// Orthonormal real basis (`m` vectors) of the span of the real and
/// imaginary parts of `vecs`.
fn realify(vecs: &[DVector<C64>]) -> Vec<DVector<f64>> {
    let n = vecs[0].len();
    let m = vecs.len();
    let mut parts = DMatrix::zeros(n, 2 * m);
    for (c, v) in vecs.iter().enumerate() {
        for r in 0..n {
            parts[(r, 2 * c)] = v[r].re;
            parts[(r, 2 * c + 1)] = v[r].im;
        }
    }
    // eigen-decomposition of P·Pᵀ; the SVD is unreliable on this rank-deficient input
    let eig = SymmetricEigen::new(&parts * parts.transpose());
    let u = eig.eigenvectors;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(m)
        .map(|c| {
            let mut v: DVector<f64> = u.column(c).into_owned();
            // sign convention: largest entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v.neg_mut();
            }
            v
        })
        .collect()
}

/// Fixes the global phase of a complex vector: the largest-magnitude
/// entry (lowest index on ties) becomes real and positive.
fn canonical_phase(v: &mut DVector<C64>) {
    let mut best = 0;
    for r in 0..v.len() {
        if v[r].norm() > v[best].norm() + 1e-12 {
            best = r;
        }
    }
    let phase = v[best] / v[best].norm();
    let rot = phase.conj();
    v.iter_mut().for_each(|c| *c *= rot);
}

/// A basis that simultaneously diagonalizes every warp in the set.
///
/// The warps must be square, normal and pairwise commuting. The basis is
/// obtained by diagonalizing the Hermitian combination
/// `H = Σ a_w·(L_w + L_wᵀ)/2 − i·b_w·(L_w − L_wᵀ)/2` with random real
/// coefficients, which separates distinct joint eigenvalues, including
/// conjugate pairs.
pub fn shared_eigenbasis(warps: &[WarpMatrix]) -> Result<EigenStructure> {
    let first = warps
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one warp".into()))?;
    let n = first.matrix.nrows();
    for w in warps {
        if w.matrix.nrows() != n || w.matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "warp size",
                expected: n,
                got: w.matrix.ncols(),
            });
        }
        let mt = w.matrix.transpose();
        if (&w.matrix * &mt - &mt * &w.matrix).amax() > COMMUTE_TOL {
            return Err(Error::InvalidArgument(
                "warp is not normal; only normal (e.g. orthogonal) warps have a unitary eigenbasis".into(),
            ));
        }
    }
    for a in 0..warps.len() {
        for b in a + 1..warps.len() {
            let (p, q) = (&warps[a].matrix, &warps[b].matrix);
            let residual = (p * q - q * p).amax();
            if residual > COMMUTE_TOL {
                return Err(Error::NonCommuting {
                    first: a,
                    second: b,
                    residual,
                });
            }
        }
    }

    let complex_warps: Vec<DMatrix<C64>> = warps.iter().map(|w| to_complex(&w.matrix)).collect();
    let mut rng = seeded_rng(BASIS_SEED);
    let mut basis = None;
    for _attempt in 0..4 {
        let mut h = DMatrix::<C64>::zeros(n, n);
        for w in warps {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let m = &w.matrix;
            for r in 0..n {
                for c in 0..n {
                    let sym = 0.5 * (m[(r, c)] + m[(c, r)]);
                    let anti = 0.5 * (m[(r, c)] - m[(c, r)]);
                    h[(r, c)] += C64::new(a * sym, -b * anti);
                }
            }
        }
        let eig = SymmetricEigen::new(h);
        let u = eig.eigenvectors;
        if complex_warps.iter().all(|l| offdiag(&u, l) < OFFDIAG_TOL) {
            basis = Some(u);
            break;
        }
    }
    let u = basis.ok_or_else(|| {
        Error::DegenerateData("could not separate the joint eigenspaces of the warp set".into())
    })?;

    // joint eigenvalue tuple of every column
    let tuples: Vec<Vec<C64>> = (0..n)
        .map(|c| {
            let col = u.column(c);
            complex_warps
                .iter()
                .map(|l| (col.adjoint() * l * col)[(0, 0)])
                .collect()
        })
        .collect();

    // cluster columns with identical joint eigenvalues
    let mut cluster_of = vec![usize::MAX; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for c in 0..n {
        if cluster_of[c] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![c];
        cluster_of[c] = id;
        for d in c + 1..n {
            if cluster_of[d] == usize::MAX && tuples_close(&tuples[c], &tuples[d]) {
                cluster_of[d] = id;
                members.push(d);
            }
        }
        clusters.push(members);
    }

    // Rebuild each cluster with a canonical basis: real vectors for real
    // eigenvalues, exact conjugates for conjugate clusters.
    struct Entry {
        vec: DVector<C64>,
        tuple: Vec<C64>,
        origin: usize,
        partner_of: Option<usize>,
    }
    let mut entries: Vec<Entry> = Vec::with_capacity(n);
    let mut done = vec![false; clusters.len()];
    for (id, members) in clusters.iter().enumerate() {
        if done[id] {
            continue;
        }
        done[id] = true;
        let tuple = tuples[members[0]].clone();
        let vecs: Vec<DVector<C64>> = members.iter().map(|&c| u.column(c).into_owned()).collect();
        if is_real_tuple(&tuple) {
            for (v, &origin) in realify(&vecs).into_iter().zip(members) {
                entries.push(Entry {
                    vec: v.map(|r| C64::new(r, 0.0)),
                    tuple: tuple.iter().map(|c| C64::new(c.re, 0.0)).collect(),
                    origin,
                    partner_of: None,
                });
            }
            continue;
        }
        let conj: Vec<C64> = tuple.iter().map(|c| c.conj()).collect();
        let partner = (0..clusters.len())
            .find(|&o| !done[o] && tuples_close(&tuples[clusters[o][0]], &conj))
            .ok_or_else(|| Error::DegenerateData("complex eigenvalue without conjugate partner".into()))?;
        done[partner] = true;
        // primary side: the one whose first non-real eigenvalue has positive angle
        let lead = tuple.iter().find(|c| c.im.abs() >= CLUSTER_TOL).unwrap();
        let (primary, primary_tuple) = if lead.im > 0.0 {
            (vecs, tuple)
        } else {
            let pv = clusters[partner].iter().map(|&c| u.column(c).into_owned()).collect();
            (pv, conj)
        };
        let origin_min = members.iter().chain(&clusters[partner]).copied().min().unwrap();
        for (offset, mut v) in primary.into_iter().enumerate() {
            canonical_phase(&mut v);
            let idx = entries.len();
            let conj_vec = v.map(|c| c.conj());
            entries.push(Entry {
                vec: v,
                tuple: primary_tuple.clone(),
                origin: origin_min + offset,
                partner_of: Some(idx + 1),
            });
            entries.push(Entry {
                vec: conj_vec,
                tuple: primary_tuple.iter().map(|c| c.conj()).collect(),
                origin: origin_min + offset,
                partner_of: None,
            });
        }
    }

    // Order: by |angle| of the eigenvalues (warp by warp), positive angle
    // first within a conjugate pair, then by original column.
    let mut pairs: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < entries.len() {
        if entries[i].partner_of.is_some() {
            pairs.push(vec![i, i + 1]);
            i += 2;
        } else {
            pairs.push(vec![i]);
            i += 1;
        }
    }
    let key = |e: &Entry| -> Vec<f64> { e.tuple.iter().map(|c| c.arg().abs()).collect() };
    pairs.sort_by(|a, b| {
        let (ea, eb) = (&entries[a[0]], &entries[b[0]]);
        key(ea)
            .iter()
            .zip(key(eb).iter())
            .map(|(p, q)| if (p - q).abs() < CLUSTER_TOL { std::cmp::Ordering::Equal } else { p.total_cmp(q) })
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ea.origin.cmp(&eb.origin))
    });

    let mut eigenvectors = DMatrix::<C64>::zeros(n, n);
    let mut eigenvalues = vec![DVector::<C64>::zeros(n); warps.len()];
    let mut subspace_pairing = Vec::with_capacity(pairs.len());
    let mut col = 0;
    let sqrt2 = std::f64::consts::SQRT_2;
    for group in &pairs {
        for &e in group {
            eigenvectors.set_column(col, &entries[e].vec);
            // exact diagonal entries w.r.t. the canonical vectors
            let v = &entries[e].vec;
            for (w, l) in complex_warps.iter().enumerate() {
                eigenvalues[w][col] = (v.adjoint() * l * v)[(0, 0)];
            }
            col += 1;
        }
        let first_col = col - group.len();
        let v = &entries[group[0]].vec;
        if group.len() == 2 {
            subspace_pairing.push(InvariantSubspace {
                real: v.map(|c| c.re * sqrt2),
                imag: Some(v.map(|c| c.im * sqrt2)),
                eigen_index: first_col,
                partner: Some(first_col + 1),
            });
        } else {
            subspace_pairing.push(InvariantSubspace {
                real: v.map(|c| c.re),
                imag: None,
                eigen_index: first_col,
                partner: None,
            });
        }
    }

    Ok(EigenStructure {
        eigenvectors,
        eigenvalues,
        subspace_pairing,
    })
}

// ---------------------------------------------------------------------------
// Rotation detectors
// ---------------------------------------------------------------------------

/// Subspace rotation detectors with preferred angles.
///
/// Detector `d` owns rows `2d` (real part) and `2d + 1` (imaginary part) of
/// the stacked filter matrices. Output-side filters are the input-side ones
/// rotated by the preferred angle, `V_d = exp(iθ_d)·U_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorBank {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub theta: Vec<f64>,
    /// `D × 2D` band-diagonal within-subspace pooling.
    pub pool_within: DMatrix<f64>,
    /// `D × M` across-subspace pooling; `t = pool_acrossᵀ · r`.
    pub pool_across: DMatrix<f64>,
}

/// Cross-correlation detector outputs `r` and their pooled summary `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorResponse {
    pub r: DVector<f64>,
    pub t: DVector<f64>,
}

fn rotate_filter(re: &DVector<f64>, im: &DVector<f64>, theta: f64) -> (DVector<f64>, DVector<f64>) {
    let (s, c) = theta.sin_cos();
    (re * c - im * s, re * s + im * c)
}

impl DetectorBank {
    /// One detector per `(subspace, angle)` combination, subspace-major.
    /// Across-subspace pooling defaults to the identity.
    pub fn from_subspaces(subspaces: &[InvariantSubspace], angles: &[f64]) -> Result<Self> {
        let n = subspaces
            .first()
            .map(|s| s.real.len())
            .ok_or_else(|| Error::InvalidArgument("no subspaces given".into()))?;
        let mut filters = Vec::new();
        for s in subspaces {
            Error::check_dim("subspace filter", n, s.real.len())?;
            let imag = s.imag.clone().unwrap_or_else(|| DVector::zeros(n));
            for &theta in angles {
                filters.push((s.real.clone(), imag.clone(), theta));
            }
        }
        Self::from_filters(&filters)
    }

    /// Builds a bank from explicit `(real, imag, θ)` input-side filters.
    pub fn from_filters(filters: &[(DVector<f64>, DVector<f64>, f64)]) -> Result<Self> {
        let d = filters.len();
        let n = filters
            .first()
            .map(|f| f.0.len())
            .ok_or_else(|| Error::InvalidArgument("no filters given".into()))?;
        let mut u = DMatrix::zeros(2 * d, n);
        let mut v = DMatrix::zeros(2 * d, n);
        let mut theta = Vec::with_capacity(d);
        let mut pool_within = DMatrix::zeros(d, 2 * d);
        for (k, (re, im, th)) in filters.iter().enumerate() {
            Error::check_dim("filter length", n, re.len())?;
            Error::check_dim("filter length", n, im.len())?;
            let (vr, vi) = rotate_filter(re, im, *th);
            u.set_row(2 * k, &re.transpose());
            u.set_row(2 * k + 1, &im.transpose());
            v.set_row(2 * k, &vr.transpose());
            v.set_row(2 * k + 1, &vi.transpose());
            theta.push(*th);
            pool_within[(k, 2 * k)] = 1.0;
            pool_within[(k, 2 * k + 1)] = 1.0;
        }
        Ok(DetectorBank {
            u,
            v,
            theta,
            pool_within,
            pool_across: DMatrix::identity(d, d),
        })
    }

    pub fn with_across_pooling(mut self, pool: DMatrix<f64>) -> Result<Self> {
        Error::check_dim("across pooling rows", self.len(), pool.nrows())?;
        self.pool_across = pool;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.u.ncols()
    }

    fn check_inputs(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        Error::check_dim("detector x", self.input_dim(), x.len())?;
        Error::check_dim("detector y", self.input_dim(), y.len())?;
        Ok(())
    }
}

fn looks_normalized(v: &DVector<f64>) -> bool {
    v.mean().abs() < 1e-6 && (v.norm() - 1.0).abs() < 1e-6
}

/// `r_d = (u_R·x)(v_R·y) + (u_I·x)(v_I·y)`, which equals
/// `ρ_x ρ_y cos(φ_y − φ_x − θ_d)` for Hermitian-projection polar coordinates,
/// and the pooled representation `t = Wᵀ·P·(U·x ⊙ V·y)`.
///
/// Inputs are expected to be contrast normalized; other inputs are
/// processed but logged.
pub fn detector_response(bank: &DetectorBank, x: &DVector<f64>, y: &DVector<f64>) -> Result<DetectorResponse> {
    bank.check_inputs(x, y)?;
    if !looks_normalized(x) || !looks_normalized(y) {
        warn!("detector inputs are not contrast normalized");
    }
    let prod = (&bank.u * x).component_mul(&(&bank.v * y));
    let r = &bank.pool_within * prod;
    let t = bank.pool_across.tr_mul(&r);
    Ok(DetectorResponse { r, t })
}

/// Energy-model form of the detectors:
/// `(u_R·x + v_R·y)² + (u_I·x + v_I·y)²`, which equals `2·r_d` plus the
/// four squared projections.
pub fn energy_detector_response(bank: &DetectorBank, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    bank.check_inputs(x, y)?;
    let sum = &bank.u * x + &bank.v * y;
    Ok(&bank.pool_within * sum.component_mul(&sum))
}

/// The four squared projections per detector (`(u_R·x)² + (u_I·x)² +
/// (v_R·y)² + (v_I·y)²`), i.e. what separates the energy response from
/// twice the cross-correlation response.
pub fn detector_quadratic_terms(bank: &DetectorBank, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    bank.check_inputs(x, y)?;
    let px = &bank.u * x;
    let py = &bank.v * y;
    Ok(&bank.pool_within * (px.component_mul(&px) + py.component_mul(&py)))
}

// ---------------------------------------------------------------------------
// Filter diagnostics
// ---------------------------------------------------------------------------

const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct FilterScore {
    pub filter: usize,
    pub best_subspace: usize,
    /// Fraction of the filter's energy inside its best invariant subspace.
    pub fraction: f64,
    /// Partner filter forming the best generalized quadrature pair.
    pub quadrature_partner: Option<usize>,
    /// `√(frac_f·frac_g)·|sin ∠|` of the two projections inside the shared
    /// subspace; 1 for an exact 90°-shifted pair.
    pub quadrature_score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterReport {
    pub filters: Vec<FilterScore>,
    pub mean_fraction: f64,
    /// Counts of `fraction` in ten equal bins over `[0, 1]`.
    pub histogram: Vec<usize>,
    pub mean_quadrature_score: f64,
}

impl FilterReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("filter,best_subspace,fraction,quadrature_partner,quadrature_score\n");
        for f in &self.filters {
            let partner = f.quadrature_partner.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{:.6}",
                f.filter, f.best_subspace, f.fraction, partner, f.quadrature_score
            );
        }
        s
    }
}

/// Scores each column of `filters` against the invariant subspaces of a
/// reference eigenstructure.
pub fn filter_diagnostics(filters: &DMatrix<f64>, reference: &EigenStructure) -> Result<FilterReport> {
    Error::check_dim("filter length", reference.dim(), filters.nrows())?;
    let subspaces = &reference.subspace_pairing;
    let nf = filters.ncols();
    // per filter: best subspace, fraction, and its in-subspace coordinates
    let mut best = Vec::with_capacity(nf);
    for f in 0..nf {
        let w: DVector<f64> = filters.column(f).into_owned();
        let energy = w.norm_squared();
        let mut top = (0usize, 0.0f64);
        for (s, sub) in subspaces.iter().enumerate() {
            let e = sub.captured_energy(&w);
            if e > top.1 + 1e-15 {
                top = (s, e);
            }
        }
        let frac = if energy > 0.0 { top.1 / energy } else { 0.0 };
        let sub = &subspaces[top.0];
        let coords = (sub.real.dot(&w), sub.imag.as_ref().map_or(0.0, |v| v.dot(&w)));
        best.push((top.0, frac, coords));
    }
    let mut scores = Vec::with_capacity(nf);
    for f in 0..nf {
        let (s, frac, (a, b)) = best[f];
        let mut partner = None;
        let mut pscore = 0.0;
        for g in 0..nf {
            if g == f || best[g].0 != s {
                continue;
            }
            let (c, d) = best[g].2;
            let denom = (a * a + b * b).sqrt() * (c * c + d * d).sqrt();
            if denom <= 0.0 {
                continue;
            }
            let sin = (a * d - b * c).abs() / denom;
            let score = (frac * best[g].1).sqrt() * sin;
            if score > pscore {
                pscore = score;
                partner = Some(g);
            }
        }
        scores.push(FilterScore {
            filter: f,
            best_subspace: s,
            fraction: frac,
            quadrature_partner: partner,
            quadrature_score: pscore,
        });
    }
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for s in &scores {
        let bin = ((s.fraction * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    let mean = |f: &dyn Fn(&FilterScore) -> f64| {
        if nf == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / nf as f64
        }
    };
    Ok(FilterReport {
        mean_fraction: mean(&|s| s.fraction),
        mean_quadrature_score: mean(&|s| s.quadrature_score),
        histogram,
        filters: scores,
    })
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_identity() {
        let l = make_cyclic_shift(5, 0).unwrap();
        assert_eq!(l.matrix, DMatrix::identity(5, 5));
        assert!(make_cyclic_shift(5, 5).is_err());
        assert!(make_2d_shift(3, 3, 0, 3).is_err());
    }

    #[test]
    fn shifts_compose() {
        let one = make_cyclic_shift(4, 1).unwrap();
        let two = make_cyclic_shift(4, 2).unwrap();
        assert_eq!(one.compose(&one).matrix, two.matrix);
        assert_eq!(one.orthogonality_error(), 0.0);
    }

    #[test]
    fn shift_matches_image_shift() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let l = make_2d_shift(3, 4, 1, 2).unwrap();
        let y = l.apply(&DVector::from_vec(x.clone())).unwrap();
        let expected = crate::datagen::shift_image(&x, 3, 4, 2, 1, true);
        assert_eq!(y.as_slice(), &expected[..]);
    }

    #[test]
    fn quarter_shift_eigenvalues_are_fourth_roots() {
        let l = make_cyclic_shift(4, 1).unwrap();
        let es = shared_eigenbasis(&[l.clone()]).unwrap();
        let mut got: Vec<(i64, i64)> = es.eigenvalues[0]
            .iter()
            .map(|c| (c.re.round() as i64, c.im.round() as i64))
            .collect();
        got.sort();
        assert_eq!(got, vec![(-1, 0), (0, -1), (0, 1), (1, 0)]);
        assert!(es.reconstruction_error(0, &l) < 1e-8);
    }

    #[test]
    fn identity_warp_has_unit_eigenvalues() {
        let es = shared_eigenbasis(&[WarpMatrix::identity(6)]).unwrap();
        for c in es.eigenvalues[0].iter() {
            assert!((c - C64::new(1.0, 0.0)).norm() < 1e-12);
        }
        // any orthonormal basis is fine, but it must be unitary
        let u = &es.eigenvectors;
        assert!((u.adjoint() * u - DMatrix::<C64>::identity(6, 6)).camax() < 1e-10);
        assert_eq!(es.subspace_pairing.len(), 6);
    }

    #[test]
    fn non_commuting_pair_is_named() {
        let shift = make_2d_shift(3, 3, 0, 1).unwrap();
        let rot = make_rotation(3, 3, PI / 2.0, crate::datagen::Interpolation::Nearest);
        let flip = WarpMatrix::new(DMatrix::from_fn(9, 9, |r, c| if r + c == 8 { 1.0 } else { 0.0 }), WarpKind::Permutation);
        let err = shared_eigenbasis(&[rot, shift.clone(), flip]).unwrap_err();
        match err {
            Error::NonCommuting { first, second, .. } => assert!(first < second && second <= 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_single_warp_pairs_conjugates() {
        // shift by 2 on n = 8 has doubly degenerate eigenvalues
        let l = make_cyclic_shift(8, 2).unwrap();
        let es = shared_eigenbasis(&[l.clone()]).unwrap();
        assert!(es.reconstruction_error(0, &l) < 1e-8);
        for s in &es.subspace_pairing {
            if let Some(im) = &s.imag {
                assert!((s.real.norm() - 1.0).abs() < 1e-10);
                assert!((im.norm() - 1.0).abs() < 1e-10);
                assert!(s.real.dot(im).abs() < 1e-10);
            }
        }
        let dims: usize = es.subspace_pairing.iter().map(|s| s.dim()).sum();
        assert_eq!(dims, 8);
    }

    #[test]
    fn aperture_case_reports_nothing() {
        let l = make_cyclic_shift(8, 1).unwrap();
        let es = shared_eigenbasis(&[l]).unwrap();
        let sub = es.subspace_pairing.iter().find(|s| s.dim() == 2).unwrap().clone();
        let angles: Vec<f64> = (0..36).map(|a| a as f64 * PI / 18.0).collect();
        let bank = DetectorBank::from_subspaces(&[sub.clone()], &angles).unwrap();
        // x orthogonal to the subspace: the DC direction
        let x = DVector::from_element(8, 1.0 / 8f64.sqrt());
        let y = x.clone();
        let resp = detector_response(&bank, &x, &y).unwrap();
        assert!(resp.r.amax() < 1e-12);
    }

    #[test]
    fn bank_rows_are_rotations() {
        let re = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let im = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let bank = DetectorBank::from_filters(&[(re.clone(), im.clone(), 0.7)]).unwrap();
        let u = DVector::from_fn(3, |r, _| C64::new(bank.u[(0, r)], bank.u[(1, r)]));
        let v = DVector::from_fn(3, |r, _| C64::new(bank.v[(0, r)], bank.v[(1, r)]));
        let rotated = u * C64::from_polar(1.0, 0.7);
        assert!((v - rotated).camax() < 1e-12);
        assert_eq!(bank.pool_within, DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
    }
}
