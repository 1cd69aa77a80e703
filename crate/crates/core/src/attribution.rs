//! Occlusion-sensitivity heatmaps.
//!
//! The query image is resized, a window slides over it with a fixed stride,
//! and each position is filled with the per-channel image mean. The cell value
//! is the drop in the target answer's score, `s0 - s_masked`. Reference images
//! stay in the input untouched. The raw grid is Gaussian-smoothed, clipped to
//! percentile bounds and min-max scaled to [0, 1].

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, Execution};
use crate::imaging::{ImagingError, SlotImage, SlotImages};
use crate::inference::{Backend, InferenceError};
use crate::prompting::PromptBundle;

pub const COLORMAP: &str = "jet";
/// Opacity of a cell with value 1 in the overlay.
pub const OVERLAY_ALPHA: f64 = 0.6;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("invalid occlusion config: {0}")]
    Config(String),
    #[error("target {0:?} is not a candidate answer")]
    UnknownTarget(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encoding: {0}")]
    Png(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FillRule {
    /// Per-channel mean of the resized image.
    #[default]
    Mean,
    /// Fixed 8-bit value in every channel.
    Constant(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    pub resize: (u32, u32),
    pub window: (u32, u32),
    pub stride: u32,
    pub fill: FillRule,
    /// Answer whose score is probed; `None` uses the caller's default (gold).
    pub target: Option<String>,
    /// In grid cells; 0 disables smoothing.
    pub smoothing_sigma: f64,
    pub clip_percentiles: (f64, f64),
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            resize: (336, 336),
            window: (32, 32),
            stride: 16,
            fill: FillRule::Mean,
            target: None,
            smoothing_sigma: 1.0,
            clip_percentiles: (1.0, 99.0),
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<(), AttributionError> {
        let bad = |m: &str| Err(AttributionError::Config(m.into()));
        let ((w, h), (ww, wh)) = (self.resize, self.window);
        if ww == 0 || wh == 0 || ww > w || wh > h {
            return bad("window must be non-empty and fit inside the resized image");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if (w - ww) % self.stride != 0 || (h - wh) % self.stride != 0 {
            return bad("resize - window must be divisible by stride");
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return bad("smoothing_sigma must be a finite non-negative number");
        }
        let (lo, hi) = self.clip_percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return bad("clip percentiles must satisfy 0 <= low <= high <= 100");
        }
        Ok(())
    }

    /// (rows, cols) of the occlusion grid.
    pub fn grid_dims(&self) -> (usize, usize) {
        (
            ((self.resize.1 - self.window.1) / self.stride + 1) as usize,
            ((self.resize.0 - self.window.0) / self.stride + 1) as usize,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major score drops.
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Row-major values in [0, 1].
    pub values: Vec<f64>,
    pub config: OcclusionConfig,
    pub bundle_fingerprint: String,
    pub target: String,
    pub baseline_score: f64,
    pub backend_calls: usize,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Cell indices ordered by decreasing value; ties keep row-major order.
    pub fn ranked_cells(&self, grid: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..grid.len()).collect();
        idx.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
        idx
    }

    /// Bilinear interpolation of the normalized grid between window centers,
    /// at the resized resolution (row-major, `width * height` values).
    pub fn upsampled(&self) -> Vec<f64> {
        let (w, h) = self.config.resize;
        let stride = self.config.stride as f64;
        let axis = |p: u32, window: u32, n: usize| -> (usize, usize, f64) {
            let u = ((p as f64 + 0.5 - window as f64 / 2.0) / stride).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 1);
            let j = (i + 1).min(n - 1);
            (i, j, u - i as f64)
        };
        let mut out = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            let (r0, r1, fy) = axis(y, self.config.window.1, self.rows);
            for x in 0..w {
                let (c0, c1, fx) = axis(x, self.config.window.0, self.cols);
                let top = self.get(r0, c0) * (1.0 - fx) + self.get(r0, c1) * fx;
                let bottom = self.get(r1, c0) * (1.0 - fx) + self.get(r1, c1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }
}

fn resized(img: &DynamicImage, (w, h): (u32, u32)) -> DynamicImage {
    let img = match img {
        DynamicImage::ImageLuma8(_) => img.clone(),
        other => DynamicImage::ImageRgb8(other.to_rgb8()),
    };
    if img.width() == w && img.height() == h {
        img
    } else {
        img.resize_exact(w, h, FilterType::Triangle)
    }
}

fn channel_means(img: &DynamicImage) -> Vec<u8> {
    let (raw, channels) = match img {
        DynamicImage::ImageLuma8(g) => (g.as_raw().as_slice(), 1),
        DynamicImage::ImageRgb8(c) => (c.as_raw().as_slice(), 3),
        _ => unreachable!("resized() yields luma8 or rgb8"),
    };
    let pixels = (raw.len() / channels).max(1) as u64;
    (0..channels)
        .map(|ch| {
            let sum: u64 = raw.iter().skip(ch).step_by(channels).map(|&v| v as u64).sum();
            ((sum as f64 / pixels as f64).round()) as u8
        })
        .collect()
}

fn occlude(img: &DynamicImage, x0: u32, y0: u32, (ww, wh): (u32, u32), fill: &[u8]) -> DynamicImage {
    let mut out = img.clone();
    match &mut out {
        DynamicImage::ImageLuma8(g) => {
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    g.put_pixel(x, y, image::Luma([fill[0]]));
                }
            }
        }
        DynamicImage::ImageRgb8(c) => {
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    c.put_pixel(x, y, image::Rgb([fill[0], fill[1], fill[2]]));
                }
            }
        }
        _ => unreachable!("resized() yields luma8 or rgb8"),
    }
    out
}

/// Separable Gaussian blur of a row-major grid with replicated edges.
/// Kernel radius is `ceil(3 * sigma)`; `sigma == 0` returns the input.
pub fn gaussian_smooth(grid: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return grid.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let d = t as isize - radius;
                    let (rr, cc) = if along_rows {
                        (r, (c as isize + d).clamp(0, cols as isize - 1) as usize)
                    } else {
                        ((r as isize + d).clamp(0, rows as isize - 1) as usize, c)
                    };
                    acc += k * src[rr * cols + cc];
                }
                out[r * cols + c] = acc;
            }
        }
        out
    };
    pass(&pass(grid, true), false)
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (i, j) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

/// Clips to the `(low, high)` percentiles and min-max scales to [0, 1].
/// A zero range yields all zeros.
pub fn renormalize(grid: &[f64], (low, high): (f64, f64)) -> Vec<f64> {
    if grid.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = (percentile(grid, low), percentile(grid, high));
    if hi - lo <= 0.0 {
        return vec![0.0; grid.len()];
    }
    grid.iter().map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect()
}

/// Computes an occlusion map for `bundle`'s query image. `default_target` is
/// used when the config names none. Any failed rescoring discards the map.
pub fn occlusion_map(
    bundle: &PromptBundle,
    backend: &dyn Backend,
    config: &OcclusionConfig,
    default_target: &str,
    exec: Execution,
) -> Result<Heatmap, AttributionError> {
    config.validate()?;
    let target = config.target.as_deref().unwrap_or(default_target).to_string();
    let t = bundle.candidates.position(&target).ok_or_else(|| AttributionError::UnknownTarget(target.clone()))?;
    let base_images = SlotImages::from_bundle(bundle);
    let query = Arc::new(resized(&*base_images.get(0)?.decode()?, config.resize));
    let fill = match config.fill {
        FillRule::Mean => channel_means(&query),
        FillRule::Constant(v) => vec![v; 3],
    };
    let intact = base_images.with_slot(0, SlotImage::Pixels(Arc::clone(&query)));
    let s0 = backend.score_images(bundle, &intact)?.scores[t];
    let (rows, cols) = config.grid_dims();
    let cells = map_indexed(rows * cols, exec, |i| -> Result<f64, AttributionError> {
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        let masked = occlude(&query, c * config.stride, r * config.stride, config.window, &fill);
        let images = intact.with_slot(0, SlotImage::Pixels(Arc::new(masked)));
        Ok(s0 - backend.score_images(bundle, &images)?.scores[t])
    });
    let raw = cells.into_iter().collect::<Result<Vec<_>, _>>()?;
    let smoothed = gaussian_smooth(&raw, rows, cols, config.smoothing_sigma);
    let values = renormalize(&smoothed, config.clip_percentiles);
    Ok(Heatmap {
        rows,
        cols,
        raw,
        smoothed,
        values,
        config: config.clone(),
        bundle_fingerprint: bundle.fingerprint(),
        target,
        baseline_score: s0,
        backend_calls: 1 + rows * cols,
    })
}

/// Piecewise-linear jet colormap.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f64| ((1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Colormapped layer with opacity `OVERLAY_ALPHA * value`.
pub fn overlay_layer(map: &Heatmap) -> RgbaImage {
    let (w, h) = map.config.resize;
    let up = map.upsampled();
    RgbaImage::from_fn(w, h, |x, y| {
        let v = up[(y * w + x) as usize];
        let [r, g, b] = jet(v);
        image::Rgba([r, g, b, (OVERLAY_ALPHA * v * 255.0).round() as u8])
    })
}

/// The layer alpha-composited onto the resized query image.
pub fn overlay(map: &Heatmap, query: &DynamicImage) -> RgbImage {
    let base = resized(query, map.config.resize).to_rgb8();
    let (w, _) = map.config.resize;
    let up = map.upsampled();
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let v = up[(y * w + x) as usize];
        let a = OVERLAY_ALPHA * v;
        let c = jet(v);
        let p = base.get_pixel(x, y).0;
        image::Rgb(std::array::from_fn(|i| ((1.0 - a) * p[i] as f64 + a * c[i] as f64).round() as u8))
    })
}

/// Row-major CSV of the normalized grid, shortest round-trip decimals.
pub fn write_matrix_csv(map: &Heatmap, path: &Path) -> Result<(), AttributionError> {
    let mut text = String::new();
    for r in 0..map.rows {
        let row: Vec<String> = (0..map.cols).map(|c| map.get(r, c).to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, data: &[u8]) -> Result<(), AttributionError> {
    let png_err = |e: png::EncodingError| AttributionError::Png(e.to_string());
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("colormap".into(), COLORMAP.into()).map_err(png_err)?;
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Composite overlay PNG with a `colormap` text chunk.
pub fn write_overlay(map: &Heatmap, query: &DynamicImage, path: &Path) -> Result<(), AttributionError> {
    let img = overlay(map, query);
    write_png(path, img.width(), img.height(), png::ColorType::Rgb, img.as_raw())
}

/// Transparent-background layer PNG with a `colormap` text chunk.
pub fn write_layer(map: &Heatmap, path: &Path) -> Result<(), AttributionError> {
    let img = overlay_layer(map);
    write_png(path, img.width(), img.height(), png::ColorType::Rgba, img.as_raw())
}

/// Grayscale image with a bright axis-aligned rectangle, for planted-signal tests.
pub fn planted_image(size: (u32, u32), rect: (u32, u32, u32, u32), background: u8, foreground: u8) -> GrayImage {
    let (x0, y0, x1, y1) = rect;
    GrayImage::from_fn(size.0, size.1, |x, y| {
        image::Luma([if (x0..x1).contains(&x) && (y0..y1).contains(&y) { foreground } else { background }])
    })
}
