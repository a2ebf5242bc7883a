//! Parameter representations for three-way (gated) models.
//!
//! Production code works with [`FactoredParams`], where the interaction
//! tensor is restricted to `w_ijk = Σ_f Wx[i,f]·Wy[j,f]·Wz[k,f]`. The dense
//! tensor is only ever materialized at toy scale, as a reference for tests.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spectral::{WarpKind, WarpMatrix};

/// Largest dense tensor (in entries) the oracle routines will build.
pub const ORACLE_BUDGET: usize = 1_000_000;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Factor matrices and per-unit biases of a factored gated model.
///
/// `wx` is `I × F`, `wy` is `J × F` and `wz` is `K × F`; column `f` of each
/// holds the three filters of factor `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredParams {
    pub wx: DMatrix<f64>,
    pub wy: DMatrix<f64>,
    pub wz: DMatrix<f64>,
    pub bias_x: DVector<f64>,
    pub bias_y: DVector<f64>,
    pub bias_z: DVector<f64>,
}

impl FactoredParams {
    pub fn zeros(i: usize, j: usize, k: usize, f: usize) -> Self {
        FactoredParams {
            wx: DMatrix::zeros(i, f),
            wy: DMatrix::zeros(j, f),
            wz: DMatrix::zeros(k, f),
            bias_x: DVector::zeros(i),
            bias_y: DVector::zeros(j),
            bias_z: DVector::zeros(k),
        }
    }

    /// Gaussian initialization with separate scales for the image-side
    /// filters and the mapping-unit filters; biases start at zero.
    pub fn random<R: Rng>(rng: &mut R, i: usize, j: usize, k: usize, f: usize, std_xy: f64, std_z: f64) -> Self {
        let nxy = Normal::new(0.0, std_xy).expect("finite std");
        let nz = Normal::new(0.0, std_z).expect("finite std");
        let mut p = Self::zeros(i, j, k, f);
        p.wx.iter_mut().for_each(|v| *v = nxy.sample(rng));
        p.wy.iter_mut().for_each(|v| *v = nxy.sample(rng));
        p.wz.iter_mut().for_each(|v| *v = nz.sample(rng));
        p
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.wx.nrows(), self.wy.nrows(), self.wz.nrows(), self.wx.ncols())
    }

    pub fn zeros_like(&self) -> Self {
        let (i, j, k, f) = self.dims();
        Self::zeros(i, j, k, f)
    }

    pub fn validate(&self) -> Result<()> {
        let (i, j, k, f) = self.dims();
        Error::check_dim("wy factors", f, self.wy.ncols())?;
        Error::check_dim("wz factors", f, self.wz.ncols())?;
        Error::check_dim("bias_x", i, self.bias_x.len())?;
        Error::check_dim("bias_y", j, self.bias_y.len())?;
        Error::check_dim("bias_z", k, self.bias_z.len())?;
        if !self.is_finite() {
            return Err(Error::InvalidArgument("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    fn blocks(&self) -> [&[f64]; 6] {
        [
            self.wx.as_slice(),
            self.wy.as_slice(),
            self.wz.as_slice(),
            self.bias_x.as_slice(),
            self.bias_y.as_slice(),
            self.bias_z.as_slice(),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.wx.as_mut_slice(),
            self.wy.as_mut_slice(),
            self.wz.as_mut_slice(),
            self.bias_x.as_mut_slice(),
            self.bias_y.as_mut_slice(),
            self.bias_z.as_mut_slice(),
        ]
    }

    /// Iterates every scalar parameter in a fixed order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.blocks().into_iter().flatten()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks_mut().into_iter().flatten()
    }

    pub fn num_values(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &FactoredParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &FactoredParams) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    /// Factor responses `Wxᵀx`.
    pub fn factor_x(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim("x", self.wx.nrows(), x.len())?;
        Ok(self.wx.tr_mul(x))
    }

    pub fn factor_y(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim("y", self.wy.nrows(), y.len())?;
        Ok(self.wy.tr_mul(y))
    }

    pub fn factor_z(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_dim("z", self.wz.nrows(), z.len())?;
        Ok(self.wz.tr_mul(z))
    }

    /// The warp `L` with `L[j,i] = Σ_k w_ijk z_k`, built from the factors as
    /// `Wy · diag(Wzᵀz) · Wxᵀ`.
    pub fn warp(&self, z: &DVector<f64>) -> Result<WarpMatrix> {
        let fz = self.factor_z(z)?;
        let mut scaled = self.wy.clone();
        for (mut col, g) in scaled.column_iter_mut().zip(fz.iter()) {
            col *= *g;
        }
        Ok(WarpMatrix::new(scaled * self.wx.transpose(), WarpKind::Custom))
    }
}

/// Latent transformation code of one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingCode {
    pub z: DVector<f64>,
    pub pre_activation: DVector<f64>,
}

impl MappingCode {
    pub fn from_pre_activation(pre_activation: DVector<f64>) -> Self {
        MappingCode {
            z: pre_activation.map(sigmoid),
            pre_activation,
        }
    }
}

/// Full `I × J × K` interaction tensor plus biases. Oracle use only.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub w: Vec<f64>,
    pub dim_i: usize,
    pub dim_j: usize,
    pub dim_k: usize,
    pub bias_x: DVector<f64>,
    pub bias_y: DVector<f64>,
    pub bias_z: DVector<f64>,
}

impl DenseTensor {
    pub fn zeros(i: usize, j: usize, k: usize) -> Result<Self> {
        let entries = i * j * k;
        if entries > ORACLE_BUDGET {
            return Err(Error::OracleBudget {
                entries,
                limit: ORACLE_BUDGET,
            });
        }
        Ok(DenseTensor {
            w: vec![0.0; entries],
            dim_i: i,
            dim_j: j,
            dim_k: k,
            bias_x: DVector::zeros(i),
            bias_y: DVector::zeros(j),
            bias_z: DVector::zeros(k),
        })
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dim_j + j) * self.dim_k + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.w[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.w[idx] = v;
    }
}

/// Materializes `w_ijk = Σ_f Wx[i,f]·Wy[j,f]·Wz[k,f]`.
pub fn expand_factored(params: &FactoredParams) -> Result<DenseTensor> {
    params.validate()?;
    let (ni, nj, nk, nf) = params.dims();
    let mut t = DenseTensor::zeros(ni, nj, nk)?;
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let mut s = 0.0;
                for f in 0..nf {
                    s += params.wx[(i, f)] * params.wy[(j, f)] * params.wz[(k, f)];
                }
                t.set(i, j, k, s);
            }
        }
    }
    t.bias_x = params.bias_x.clone();
    t.bias_y = params.bias_y.clone();
    t.bias_z = params.bias_z.clone();
    Ok(t)
}

/// Mapping-unit pre-activations `Σ_ij w_ijk x_i y_j + bias_z[k]`.
pub fn oracle_encode(w: &DenseTensor, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim("x", w.dim_i, x.len())?;
    Error::check_dim("y", w.dim_j, y.len())?;
    let mut out = w.bias_z.clone();
    for k in 0..w.dim_k {
        for i in 0..w.dim_i {
            for j in 0..w.dim_j {
                out[k] += w.get(i, j, k) * x[i] * y[j];
            }
        }
    }
    Ok(out)
}

/// Output prediction `Σ_ik w_ijk x_i z_k + bias_y[j]`.
pub fn oracle_decode(w: &DenseTensor, x: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim("x", w.dim_i, x.len())?;
    Error::check_dim("z", w.dim_k, z.len())?;
    let mut out = w.bias_y.clone();
    for j in 0..w.dim_j {
        for i in 0..w.dim_i {
            for k in 0..w.dim_k {
                out[j] += w.get(i, j, k) * x[i] * z[k];
            }
        }
    }
    Ok(out)
}

/// Input reconstruction `Σ_jk w_ijk y_j z_k + bias_x[i]`.
pub fn oracle_decode_reverse(w: &DenseTensor, y: &DVector<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim("y", w.dim_j, y.len())?;
    Error::check_dim("z", w.dim_k, z.len())?;
    let mut out = w.bias_x.clone();
    for i in 0..w.dim_i {
        for j in 0..w.dim_j {
            for k in 0..w.dim_k {
                out[i] += w.get(i, j, k) * y[j] * z[k];
            }
        }
    }
    Ok(out)
}

/// Three-way energy `Σ_ijk w_ijk x_i y_j z_k` plus linear bias terms.
pub fn oracle_energy(w: &DenseTensor, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
    Error::check_dim("x", w.dim_i, x.len())?;
    Error::check_dim("y", w.dim_j, y.len())?;
    Error::check_dim("z", w.dim_k, z.len())?;
    let mut e = w.bias_x.dot(x) + w.bias_y.dot(y) + w.bias_z.dot(z);
    for i in 0..w.dim_i {
        for j in 0..w.dim_j {
            for k in 0..w.dim_k {
                e += w.get(i, j, k) * x[i] * y[j] * z[k];
            }
        }
    }
    Ok(e)
}

/// The linear map `x ↦ y` selected by a code: `L[j,i] = Σ_k w_ijk z_k`.
pub fn warp_from_code(w: &DenseTensor, z: &DVector<f64>) -> Result<WarpMatrix> {
    Error::check_dim("z", w.dim_k, z.len())?;
    let mut l = DMatrix::zeros(w.dim_j, w.dim_i);
    for i in 0..w.dim_i {
        for j in 0..w.dim_j {
            let mut s = 0.0;
            for k in 0..w.dim_k {
                s += w.get(i, j, k) * z[k];
            }
            l[(j, i)] = s;
        }
    }
    Ok(WarpMatrix::new(l, WarpKind::Custom))
}

// ---------------------------------------------------------------------------
// RELW checkpoints
// ---------------------------------------------------------------------------

const RELW_MAGIC: &[u8; 4] = b"RELW";
const RELW_VERSION: u32 = 1;

fn relw_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "RELW",
        detail: detail.into(),
    }
}

fn push_row_major(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

/// Serializes parameters:
/// `b"RELW" | version u32 | I, J, K, F as u64 | Wx | Wy | Wz | bias_x | bias_y | bias_z | crc32`,
/// matrices row-major, all little-endian.
pub fn encode_params(params: &FactoredParams) -> Vec<u8> {
    let (i, j, k, f) = params.dims();
    let mut buf = Vec::with_capacity(40 + 8 * params.num_values() + 4);
    buf.extend_from_slice(RELW_MAGIC);
    buf.extend_from_slice(&RELW_VERSION.to_le_bytes());
    for d in [i, j, k, f] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    push_row_major(&mut buf, &params.wx);
    push_row_major(&mut buf, &params.wy);
    push_row_major(&mut buf, &params.wz);
    for b in [&params.bias_x, &params.bias_y, &params.bias_z] {
        for v in b.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_params(data: &[u8]) -> Result<FactoredParams> {
    if data.len() < 44 {
        return Err(relw_err("file too short"));
    }
    let (body, tail) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(relw_err("checksum mismatch"));
    }
    if &body[..4] != RELW_MAGIC {
        return Err(relw_err("bad magic"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != RELW_VERSION {
        return Err(relw_err(format!("unsupported version {version}")));
    }
    let dim = |o: usize| -> Result<usize> {
        usize::try_from(u64::from_le_bytes(body[o..o + 8].try_into().unwrap()))
            .map_err(|_| relw_err("dimension overflow"))
    };
    let (i, j, k, f) = (dim(8)?, dim(16)?, dim(24)?, dim(32)?);
    let count = (i + j + k)
        .checked_mul(f)
        .and_then(|m| m.checked_add(i + j + k))
        .ok_or_else(|| relw_err("dimension overflow"))?;
    if body.len() != 40 + 8 * count {
        return Err(relw_err(format!("expected {} payload values", count)));
    }
    let mut vals = body[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut mat = |r: usize, c: usize| DMatrix::from_row_iterator(r, c, vals.by_ref().take(r * c));
    let wx = mat(i, f);
    let wy = mat(j, f);
    let wz = mat(k, f);
    let mut vec = |n: usize| DVector::from_iterator(n, vals.by_ref().take(n));
    let bias_x = vec(i);
    let bias_y = vec(j);
    let bias_z = vec(k);
    Ok(FactoredParams {
        wx,
        wy,
        wz,
        bias_x,
        bias_y,
        bias_z,
    })
}

pub fn save_params(path: &Path, params: &FactoredParams) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<FactoredParams> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::seeded_rng;

    fn random_params(seed: u64, i: usize, j: usize, k: usize, f: usize) -> FactoredParams {
        let mut rng = seeded_rng(seed);
        let mut p = FactoredParams::random(&mut rng, i, j, k, f, 1.0, 1.0);
        let n = Normal::new(0.0, 1.0).unwrap();
        p.bias_x.iter_mut().for_each(|v| *v = n.sample(&mut rng));
        p.bias_y.iter_mut().for_each(|v| *v = n.sample(&mut rng));
        p.bias_z.iter_mut().for_each(|v| *v = n.sample(&mut rng));
        p
    }

    #[test]
    fn unit_factor_expands_to_ones() {
        let mut p = FactoredParams::zeros(2, 3, 4, 1);
        p.wx.fill(1.0);
        p.wy.fill(1.0);
        p.wz.fill(1.0);
        let t = expand_factored(&p).unwrap();
        assert!(t.w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_factor_contributes_nothing() {
        let p = random_params(1, 3, 3, 3, 4);
        let mut padded = p.clone();
        padded.wx = p.wx.clone().insert_column(4, 0.0);
        padded.wy = p.wy.clone().insert_column(4, 0.7);
        padded.wz = p.wz.clone().insert_column(4, -1.3);
        assert_eq!(expand_factored(&p).unwrap(), expand_factored(&padded).unwrap());
    }

    #[test]
    fn expansion_matches_triple_loop() {
        let p = random_params(2, 3, 3, 3, 4);
        let t = expand_factored(&p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut s = 0.0;
                    for f in 0..4 {
                        s += p.wx[(i, f)] * p.wy[(j, f)] * p.wz[(k, f)];
                    }
                    assert_eq!(t.get(i, j, k), s);
                }
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let p = FactoredParams::zeros(101, 100, 100, 1);
        assert!(matches!(expand_factored(&p), Err(Error::OracleBudget { .. })));
    }

    #[test]
    fn encode_with_zero_x_gives_bias() {
        let p = random_params(3, 4, 5, 3, 6);
        let t = expand_factored(&p).unwrap();
        let y = DVector::from_element(5, 0.3);
        let out = oracle_encode(&t, &DVector::zeros(4), &y).unwrap();
        assert_eq!(out, p.bias_z);
    }

    #[test]
    fn scalar_substitution() {
        let mut t = DenseTensor::zeros(1, 1, 1).unwrap();
        t.set(0, 0, 0, 1.0);
        let one = |v: f64| DVector::from_element(1, v);
        assert_eq!(oracle_encode(&t, &one(2.0), &one(3.0)).unwrap()[0], 6.0);
        assert_eq!(oracle_decode(&t, &one(2.0), &one(3.0)).unwrap()[0], 6.0);
    }

    #[test]
    fn decode_with_zero_code_is_zero() {
        let mut p = random_params(4, 3, 3, 2, 5);
        p.bias_y.fill(0.0);
        let t = expand_factored(&p).unwrap();
        let out = oracle_decode(&t, &DVector::from_element(3, 1.0), &DVector::zeros(2)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_picks_tensor_fiber() {
        let mut t = DenseTensor::zeros(1, 4, 1).unwrap();
        for j in 0..4 {
            t.set(0, j, 0, j as f64 - 1.5);
        }
        let out = oracle_decode(&t, &DVector::from_element(1, 1.0), &DVector::from_element(1, 1.0)).unwrap();
        for j in 0..4 {
            assert_eq!(out[j], j as f64 - 1.5);
        }
    }

    #[test]
    fn one_hot_code_selects_slice() {
        let p = random_params(5, 3, 4, 3, 5);
        let t = expand_factored(&p).unwrap();
        let mut z = DVector::zeros(3);
        z[1] = 1.0;
        let l = warp_from_code(&t, &z).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(l.matrix[(j, i)], t.get(i, j, 1));
            }
        }
        let zero = warp_from_code(&t, &DVector::zeros(3)).unwrap();
        assert!(zero.matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_reproduces_decode() {
        let mut p = random_params(6, 5, 4, 3, 6);
        p.bias_y.fill(0.0);
        let t = expand_factored(&p).unwrap();
        let mut rng = seeded_rng(66);
        let n = Normal::new(0.0, 1.0).unwrap();
        let z = DVector::from_fn(3, |_, _| n.sample(&mut rng));
        let l = warp_from_code(&t, &z).unwrap();
        let lf = p.warp(&z).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(5, |_, _| n.sample(&mut rng));
            let direct = oracle_decode(&t, &x, &z).unwrap();
            assert!((&l.matrix * &x - &direct).amax() < 1e-12);
            assert!((&lf.matrix * &x - &direct).amax() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let t = DenseTensor::zeros(2, 3, 4).unwrap();
        assert!(oracle_encode(&t, &DVector::zeros(3), &DVector::zeros(3)).is_err());
        assert!(oracle_decode(&t, &DVector::zeros(2), &DVector::zeros(3)).is_err());
        assert!(warp_from_code(&t, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn checkpoint_layout_and_checksum() {
        let p = random_params(7, 3, 2, 2, 4);
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..4], b"RELW");
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 4);
        // Wx row-major: second value is Wx[0,1]
        assert_eq!(f64::from_le_bytes(bytes[48..56].try_into().unwrap()), p.wx[(0, 1)]);
        assert_eq!(decode_params(&bytes).unwrap(), p);
        let mut corrupt = bytes.clone();
        corrupt[50] ^= 1;
        assert!(decode_params(&corrupt).is_err());
    }
}
