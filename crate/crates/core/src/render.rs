//! Grayscale renderings: filter grids, flow fields and analogy strips.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::datagen::Shape;
use crate::error::{Error, Result};
use crate::infer::FlowField;

const BACKGROUND: u8 = 64;

/// Min-max scales `values` to 0..=255 (constant input maps to mid-gray).
fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect()
}

fn blit(img: &mut GrayImage, gray: &[u8], h: usize, w: usize, top: u32, left: u32, scale: u32) {
    for r in 0..h {
        for c in 0..w {
            let v = gray[r * w + c];
            for dr in 0..scale {
                for dc in 0..scale {
                    img.put_pixel(left + c as u32 * scale + dc, top + r as u32 * scale + dr, Luma([v]));
                }
            }
        }
    }
}

/// Tiles the columns of `filters`, each reshaped to `shape` and min-max
/// scaled on its own. Multi-frame filters lay their frames out left to
/// right inside the tile.
pub fn filter_grid(filters: &DMatrix<f64>, shape: Shape, columns: usize, scale: u32) -> Result<GrayImage> {
    Error::check_dim("filter length", shape.len(), filters.nrows())?;
    if columns == 0 || scale == 0 {
        return Err(Error::InvalidArgument("columns and scale must be positive".into()));
    }
    let n = filters.ncols();
    let rows = n.div_ceil(columns).max(1);
    let tile_w = (shape.frames * shape.width) as u32 * scale;
    let tile_h = shape.height as u32 * scale;
    let mut img = GrayImage::from_pixel(
        columns as u32 * (tile_w + 1) + 1,
        rows as u32 * (tile_h + 1) + 1,
        Luma([BACKGROUND]),
    );
    for f in 0..n {
        let gray = to_gray(filters.column(f).as_slice());
        let (tr, tc) = ((f / columns) as u32, (f % columns) as u32);
        let frame = shape.frame_len();
        for t in 0..shape.frames {
            blit(
                &mut img,
                &gray[t * frame..(t + 1) * frame],
                shape.height,
                shape.width,
                1 + tr * (tile_h + 1),
                1 + tc * (tile_w + 1) + (t * shape.width) as u32 * scale,
                scale,
            );
        }
    }
    Ok(img)
}

/// One patch, min-max scaled and enlarged by `scale`.
pub fn patch_image(values: &[f64], height: usize, width: usize, scale: u32) -> Result<GrayImage> {
    Error::check_dim("patch", height * width, values.len())?;
    let mut img = GrayImage::new(width as u32 * scale, height as u32 * scale);
    blit(&mut img, &to_gray(values), height, width, 0, 0, scale);
    Ok(img)
}

fn draw_line(img: &mut GrayImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), v: u8) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
            img.put_pixel(xi as u32, yi as u32, Luma([v]));
        }
    }
}

/// Arrow plot of a flow field: one `cell × cell` square per pixel with a
/// line along the displacement and a bright tip. Pixels below the
/// confidence threshold are drawn dim.
pub fn flow_image(flow: &FlowField, cell: u32) -> Result<GrayImage> {
    if cell < 3 {
        return Err(Error::InvalidArgument("flow cells need at least 3 pixels".into()));
    }
    let mut img = GrayImage::from_pixel(flow.width as u32 * cell, flow.height as u32 * cell, Luma([0]));
    let confident = flow.confident_pixels(0..flow.height);
    let reach = flow
        .dx
        .iter()
        .zip(&flow.dy)
        .map(|(&a, &b)| a.abs().max(b.abs()))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let half = (cell as f64 - 1.0) / 2.0;
    for p in 0..flow.len() {
        let (r, c) = ((p / flow.width) as f64, (p % flow.width) as f64);
        let center = (c * cell as f64 + half, r * cell as f64 + half);
        let tip = (
            center.0 + flow.dx[p] as f64 / reach * half,
            center.1 + flow.dy[p] as f64 / reach * half,
        );
        let (line, head) = if confident.binary_search(&p).is_ok() { (160, 255) } else { (60, 90) };
        draw_line(&mut img, center, tip, line);
        img.put_pixel(tip.0.round() as u32, tip.1.round() as u32, Luma([head]));
    }
    Ok(img)
}

/// One row of an analogy figure.
pub struct AnalogyRow<'a> {
    pub x_src: &'a [f64],
    pub y_src: &'a [f64],
    pub flow: &'a FlowField,
    pub x_new: &'a [f64],
    pub y_pred: &'a [f64],
}

/// Five columns per row: source input, source output, inferred flow, new
/// input, predicted output.
pub fn analogy_strip(rows: &[AnalogyRow], shape: Shape, scale: u32) -> Result<GrayImage> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no analogy rows to render".into()));
    }
    let (h, w) = (shape.height, shape.width);
    let tile = (w as u32 * scale, h as u32 * scale);
    let cell = (scale * 3).max(3);
    let flow_w = w as u32 * cell;
    let flow_h = h as u32 * cell;
    let row_h = tile.1.max(flow_h) + 2;
    let width = 4 * (tile.0 + 2) + flow_w + 2;
    let mut img = GrayImage::from_pixel(width, rows.len() as u32 * row_h, Luma([BACKGROUND]));
    for (i, row) in rows.iter().enumerate() {
        let top = i as u32 * row_h + 1;
        let mut left = 1;
        for (col, values) in [row.x_src, row.y_src].into_iter().enumerate() {
            Error::check_dim("analogy patch", h * w, values.len())?;
            blit(&mut img, &to_gray(values), h, w, top, left + col as u32 * (tile.0 + 2), scale);
        }
        left += 2 * (tile.0 + 2);
        image::imageops::replace(&mut img, &flow_image(row.flow, cell)?, left as i64, top as i64);
        left += flow_w + 2;
        for (col, values) in [row.x_new, row.y_pred].into_iter().enumerate() {
            Error::check_dim("analogy patch", h * w, values.len())?;
            blit(&mut img, &to_gray(values), h, w, top, left + col as u32 * (tile.0 + 2), scale);
        }
    }
    Ok(img)
}

/// Writes PNG or binary PGM depending on the extension.
pub fn save_image(img: &GrayImage, path: &Path) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => ImageFormat::Png,
        Some("pgm") => ImageFormat::Pnm,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported image extension {other:?}; use .png or .pgm"
            )))
        }
    };
    img.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Pretty-printed JSON export.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
