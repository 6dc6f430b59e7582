//! Static figures (histograms, PR curves, mask overlays) and raw arrays.

use std::path::Path;

use image::{Rgb, RgbImage as Canvas};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use memos_core::{Grid, RgbImage};
use ndarray::Array2;

use crate::error::{LabError, Result};
use crate::io::{write_gray_png, write_rgb_png};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const MARGIN: u32 = 24;

/// Colours for successive series.
pub const SERIES: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

fn save(path: &Path, canvas: Canvas) -> Result<()> {
    let (w, h) = canvas.dimensions();
    write_rgb_png(path, &RgbImage::from_raw(h as usize, w as usize, canvas.into_raw())?)
}

fn frame(width: u32, height: u32) -> Canvas {
    let mut c = Canvas::from_pixel(width, height, WHITE);
    draw_hollow_rect_mut(&mut c, Rect::at(MARGIN as i32, MARGIN as i32).of_size(width - 2 * MARGIN, height - 2 * MARGIN), AXIS);
    c
}

/// Overlaid histograms, each normalised to unit mass; the first series is
/// filled, later ones are drawn as outlines.
pub fn histogram_png(path: &Path, series: &[&[u64]]) -> Result<()> {
    let (width, height) = (420u32, 260u32);
    let mut c = frame(width, height);
    let bins = series.iter().map(|s| s.len()).max().unwrap_or(0);
    if bins == 0 {
        return save(path, c);
    }
    let fractions: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            let total = s.iter().sum::<u64>().max(1) as f64;
            s.iter().map(|&v| v as f64 / total).collect()
        })
        .collect();
    let peak = fractions.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
    let plot_w = (width - 2 * MARGIN) as f64;
    let plot_h = (height - 2 * MARGIN) as f64;
    let bin_w = plot_w / bins as f64;
    for (si, f) in fractions.iter().enumerate() {
        let colour = Rgb(SERIES[si % SERIES.len()]);
        for (b, &v) in f.iter().enumerate() {
            let bar = (v / peak * plot_h).round() as u32;
            if bar == 0 {
                continue;
            }
            let x = MARGIN as f64 + b as f64 * bin_w;
            let rect = Rect::at(x as i32, (height - MARGIN - bar) as i32).of_size((bin_w.ceil() as u32).max(1), bar);
            if si == 0 {
                draw_filled_rect_mut(&mut c, rect, colour);
            } else {
                draw_hollow_rect_mut(&mut c, rect, colour);
            }
        }
    }
    save(path, c)
}

/// Precision (vertical) against recall (horizontal), one polyline per curve.
pub fn pr_curve_png(path: &Path, curves: &[Vec<(f64, f64)>]) -> Result<()> {
    let size = 320u32;
    let mut c = frame(size, size);
    let span = (size - 2 * MARGIN) as f32;
    let to_px = |(r, p): (f64, f64)| (MARGIN as f32 + r as f32 * span, (size - MARGIN) as f32 - p as f32 * span);
    for (i, curve) in curves.iter().enumerate() {
        let colour = Rgb(SERIES[i % SERIES.len()]);
        let mut prev = curve.first().map(|&(_, p)| to_px((0.0, p)));
        for &pt in curve {
            let next = to_px(pt);
            if let Some(start) = prev {
                draw_line_segment_mut(&mut c, start, next, colour);
            }
            prev = Some(next);
        }
    }
    save(path, c)
}

/// Blends red into `image` in proportion to `mask` (values in `[0, 1]`).
pub fn overlay(image: &RgbImage, mask: &Grid<f64>) -> Result<RgbImage> {
    if image.dims() != mask.dims() {
        return Err(memos_core::Error::Shape(format!("image {:?} vs mask {:?}", image.dims(), mask.dims())).into());
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let a = 0.6 * mask.get(y, x).clamp(0.0, 1.0);
            let px = image.pixel(y, x);
            let tint = [255.0, 0.0, 0.0];
            out.put_pixel(y, x, [0, 1, 2].map(|ch| ((1.0 - a) * f64::from(px[ch]) + a * tint[ch]).round() as u8));
        }
    }
    Ok(out)
}

/// Mask values scaled by 255 into a grayscale PNG.
pub fn mask_png(path: &Path, mask: &Grid<f64>) -> Result<()> {
    write_gray_png(path, &mask.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Lossless copy of a real-valued map as a NumPy `.npy` file.
pub fn write_npy(path: &Path, values: &Grid<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let array = Array2::from_shape_vec((values.height(), values.width()), values.as_slice().to_vec())
        .map_err(|e| LabError::format(path, e))?;
    ndarray_npy::write_npy(path, &array).map_err(|e| LabError::format(path, e))
}

pub fn read_npy(path: &Path) -> Result<Grid<f64>> {
    let array: Array2<f64> = ndarray_npy::read_npy(path).map_err(|e| LabError::format(path, e))?;
    let (h, w) = array.dim();
    Ok(Grid::from_vec(h, w, array.iter().copied().collect())?)
}
