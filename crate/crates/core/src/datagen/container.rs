//! `RELB` dataset container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"RELB" | version: u32 | num_pairs: u64 | I: u64 | J: u64
//! x: num_pairs × I f64, row-major (pair by pair)
//! y: num_pairs × J f64, row-major
//! has_labels: u8
//! [kind: u32 | count: u64 | record_len: u64 | count × record_len f64]
//! ```
//!
//! Image geometry and generation parameters live in a JSON sidecar next to
//! the container (`<file>.json`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    gen_dot_movies, gen_rotated_pairs, gen_shifted_dots, gen_shifted_dots_1d, gen_splitscreen_dots,
    Interpolation, Label, PairBatch, Shape,
};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RELB";
const VERSION: u32 = 1;

/// Generator call that produced a dataset; enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Shifts {
        num_pairs: usize,
        height: usize,
        width: usize,
        dot_density: f64,
        max_shift: usize,
        #[serde(default = "default_true")]
        wraparound: bool,
        seed: u64,
    },
    Shifts1d {
        num_pairs: usize,
        length: usize,
        dot_density: f64,
        max_shift: usize,
        #[serde(default = "default_true")]
        wraparound: bool,
        seed: u64,
    },
    SplitScreen {
        num_pairs: usize,
        height: usize,
        width: usize,
        dot_density: f64,
        max_shift: usize,
        seed: u64,
    },
    Rotations {
        num_pairs: usize,
        height: usize,
        width: usize,
        dot_density: f64,
        max_angle: f64,
        #[serde(default)]
        interpolation: Interpolation,
        seed: u64,
    },
    Movies {
        num_movies: usize,
        height: usize,
        width: usize,
        #[serde(default = "default_frames")]
        num_frames: usize,
        dot_density: f64,
        speed_range: usize,
        seed: u64,
    },
}

fn default_true() -> bool {
    true
}

fn default_frames() -> usize {
    super::DEFAULT_MOVIE_FRAMES
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<PairBatch> {
        match *self {
            GeneratorSpec::Shifts {
                num_pairs,
                height,
                width,
                dot_density,
                max_shift,
                wraparound,
                seed,
            } => gen_shifted_dots(num_pairs, height, width, dot_density, max_shift, wraparound, seed),
            GeneratorSpec::Shifts1d {
                num_pairs,
                length,
                dot_density,
                max_shift,
                wraparound,
                seed,
            } => gen_shifted_dots_1d(num_pairs, length, dot_density, max_shift, wraparound, seed),
            GeneratorSpec::SplitScreen {
                num_pairs,
                height,
                width,
                dot_density,
                max_shift,
                seed,
            } => gen_splitscreen_dots(num_pairs, height, width, dot_density, max_shift, seed),
            GeneratorSpec::Rotations {
                num_pairs,
                height,
                width,
                dot_density,
                max_angle,
                interpolation,
                seed,
            } => gen_rotated_pairs(num_pairs, height, width, dot_density, max_angle, interpolation, seed),
            GeneratorSpec::Movies {
                num_movies,
                height,
                width,
                num_frames,
                dot_density,
                speed_range,
                seed,
            } => gen_dot_movies(num_movies, height, width, num_frames, dot_density, speed_range, seed),
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            GeneratorSpec::Shifts { seed, .. }
            | GeneratorSpec::Shifts1d { seed, .. }
            | GeneratorSpec::SplitScreen { seed, .. }
            | GeneratorSpec::Rotations { seed, .. }
            | GeneratorSpec::Movies { seed, .. } => seed,
        }
    }
}

/// JSON sidecar describing a `RELB` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub format: String,
    pub version: u32,
    pub num_pairs: usize,
    pub x_shape: Shape,
    pub y_shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

impl BatchManifest {
    pub fn for_batch(batch: &PairBatch, generator: Option<GeneratorSpec>) -> Self {
        BatchManifest {
            format: "RELB".into(),
            version: VERSION,
            num_pairs: batch.len(),
            x_shape: batch.x_shape,
            y_shape: batch.y_shape,
            generator,
            normalized: false,
            created: None,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "RELB",
        detail: detail.into(),
    }
}

pub(crate) fn encode_batch(batch: &PairBatch) -> Vec<u8> {
    let n = batch.len();
    let (i, j) = (batch.x_dim(), batch.y_dim());
    let mut buf = Vec::with_capacity(32 + 8 * n * (i + j));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in [n, i, j] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for m in [&batch.x, &batch.y] {
        // column-major storage: each column is one pair, i.e. one output row
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &batch.labels {
        None => buf.push(0),
        Some(labels) => {
            buf.push(1);
            let tag = labels.first().map(|l| l.tag()).unwrap_or(1);
            let rec = Label::record_len(tag).unwrap_or(0);
            buf.extend_from_slice(&tag.to_le_bytes());
            buf.extend_from_slice(&(labels.len() as u64).to_le_bytes());
            buf.extend_from_slice(&(rec as u64).to_le_bytes());
            for l in labels {
                for v in l.to_record() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| fmt_err("dimension overflows usize"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| fmt_err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn decode_batch(data: &[u8], x_shape: Option<Shape>, y_shape: Option<Shape>) -> Result<PairBatch> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let (n, i, j) = (cur.u64()?, cur.u64()?, cur.u64()?);
    let x = DMatrix::from_vec(i, n, cur.f64s(n * i)?);
    let y = DMatrix::from_vec(j, n, cur.f64s(n * j)?);
    let labels = match cur.take(1)?[0] {
        0 => None,
        1 => {
            let tag = cur.u32()?;
            let count = cur.u64()?;
            let rec = cur.u64()?;
            if Label::record_len(tag) != Some(rec) {
                return Err(fmt_err(format!("unknown label kind {tag} / record length {rec}")));
            }
            let vals = cur.f64s(count * rec)?;
            let labels = vals
                .chunks_exact(rec)
                .map(|r| Label::from_record(tag, r).ok_or_else(|| fmt_err("bad label record")))
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        }
        f => return Err(fmt_err(format!("bad label flag {f}"))),
    };
    if cur.pos != data.len() {
        return Err(fmt_err("trailing bytes"));
    }
    let x_shape = x_shape.unwrap_or(Shape::image(1, i));
    let y_shape = y_shape.unwrap_or(Shape::image(1, j));
    PairBatch::new(x, y, x_shape, y_shape, labels)
}

/// Writes the container and, when given, its JSON sidecar.
pub fn write_batch(path: &Path, batch: &PairBatch, manifest: Option<&BatchManifest>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_batch(batch)).map_err(|e| Error::io(path, e))?;
    if let Some(m) = manifest {
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads a container; geometry comes from the sidecar when one exists.
pub fn read_batch(path: &Path) -> Result<(PairBatch, Option<BatchManifest>)> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let manifest: Option<BatchManifest> = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let batch = decode_batch(
        &data,
        manifest.as_ref().map(|m| m.x_shape),
        manifest.as_ref().map(|m| m.y_shape),
    )?;
    Ok((batch, manifest))
}
