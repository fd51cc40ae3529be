//! PNG renderings: band grids, ROI spectra and operator maps.

use cassi_core::cassi::OperatorRep;
use cassi_core::hsi::HsiCube;
use cassi_core::Error;
use image::{GrayImage, Luma, Rgb, RgbImage};
use imageproc::drawing::draw_line_segment_mut;
use ndarray::{ArrayView2, Axis};

const GAP: u32 = 2;

/// `count` evenly spaced band indices from `0` to `bands − 1`.
pub fn pick_bands(bands: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![0];
    }
    (0..count).map(|i| ((i * (bands - 1)) as f64 / (count - 1) as f64).round() as usize).collect()
}

/// Panels laid out left to right with a white gap.
fn row_of(panels: &[GrayImage]) -> GrayImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<u32>() + GAP * panels.len().saturating_sub(1) as u32;
    let mut out = GrayImage::from_pixel(w, h, Luma([255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + GAP;
    }
    out
}

fn to_gray(view: ArrayView2<f32>, normalize: bool) -> GrayImage {
    let (h, w) = view.dim();
    let (lo, hi) = if normalize { view.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))) } else { (0.0, 1.0) };
    let span = hi - lo;
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = view[[y as usize, x as usize]];
        let t = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        Luma([(t * 255.0).round() as u8])
    })
}

/// One row of `count` evenly spaced bands, gray level = value on [0, 1].
pub fn band_grid(cube: &HsiCube, count: usize) -> Result<GrayImage, Error> {
    if count == 0 || count > cube.bands() {
        return Err(Error::Argument(format!("cannot show {count} of {} bands", cube.bands())));
    }
    let panels: Vec<GrayImage> = pick_bands(cube.bands(), count).into_iter().map(|b| to_gray(cube.data().index_axis(Axis(2), b), false)).collect();
    Ok(row_of(&panels))
}

/// Rows of `[Φ, R, Φ̂]` for band `band`, one row per stage, each panel
/// min-max normalized on its own.
pub fn operator_panels(op: &OperatorRep, corrected: &[OperatorRep], band: usize) -> GrayImage {
    let phi = op.shifted_mask().index_axis(Axis(2), band);
    let rows: Vec<GrayImage> = corrected
        .iter()
        .map(|hat| {
            let hat = hat.shifted_mask().index_axis(Axis(2), band);
            let residual = &hat - &phi;
            row_of(&[to_gray(phi, true), to_gray(residual.view(), true), to_gray(hat, true)])
        })
        .collect();
    let w = rows.iter().map(|r| r.width()).max().unwrap_or(0);
    let h = rows.iter().map(|r| r.height()).sum::<u32>() + GAP * rows.len().saturating_sub(1) as u32;
    let mut out = GrayImage::from_pixel(w, h, Luma([255]));
    let mut y0 = 0;
    for r in &rows {
        image::imageops::replace(&mut out, r, 0, y0 as i64);
        y0 += r.height() + GAP;
    }
    out
}

const PLOT_W: u32 = 360;
const PLOT_H: u32 = 240;
const MARGIN: f32 = 24.0;
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const RED: Rgb<u8> = Rgb([200, 30, 30]);

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = font8x8::legacy::BASIC_LEGACY.get(ch as usize).copied().unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8u32 {
                if bits >> col & 1 == 1 {
                    let (px, py) = (x + i as u32 * 8 + col, y + row as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, color);
                    }
                }
            }
        }
    }
}

/// ROI-mean spectra, ground truth in black and prediction in red, with the
/// correlation written in the corner.
pub fn spectra(pred: &[f64], truth: &[f64], r: f64) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (x0, y0) = (MARGIN, PLOT_H as f32 - MARGIN);
    let (x1, y1) = (PLOT_W as f32 - MARGIN, MARGIN);
    draw_line_segment_mut(&mut img, (x0, y0), (x1, y0), BLACK);
    draw_line_segment_mut(&mut img, (x0, y0), (x0, y1), BLACK);
    let (lo, hi) = pred.iter().chain(truth).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = truth.len().max(2) - 1;
    let at = |i: usize, v: f64| -> (f32, f32) {
        let x = x0 + (x1 - x0) * i as f32 / n as f32;
        let y = y0 - (y0 - y1) * ((v - lo) / span) as f32;
        (x, y)
    };
    for (curve, color) in [(truth, BLACK), (pred, RED)] {
        for i in 1..curve.len() {
            draw_line_segment_mut(&mut img, at(i - 1, curve[i - 1]), at(i, curve[i]), color);
        }
    }
    draw_text(&mut img, MARGIN as u32 + 6, 6, &format!("r={r:.4}"), BLACK);
    img
}
