//! CSV and PNG outputs of training runs.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::harness::train::moving_average;

pub const SMOOTHING_WINDOW: usize = 25;

/// Writes `step,loss,smoothed` rows (`smoothed` empty until the window fills).
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let smooth = moving_average(losses, SMOOTHING_WINDOW);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "smoothed"])?;
    for (i, l) in losses.iter().enumerate() {
        let s = (i + 1).checked_sub(SMOOTHING_WINDOW).and_then(|j| smooth.get(j));
        w.write_record([i.to_string(), format!("{l:.9e}"), s.map(|s| format!("{s:.9e}")).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}

/// Renders the loss curve (log scale) as a `width x height` PNG: raw losses
/// in grey, the smoothed curve in red.
pub fn loss_plot(losses: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let finite: Vec<f64> = losses.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    if finite.len() < 2 {
        return img;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min).ln();
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln();
    let span = (hi - lo).max(1e-12);
    let margin = 8.0;
    let (w, h) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
    let to_px = |i: usize, n: usize, v: f64| {
        let x = margin + w * i as f64 / (n - 1).max(1) as f64;
        let y = margin + h * (1.0 - (v.max(1e-300).ln() - lo) / span);
        (x, y)
    };
    let mut draw = |values: &[f64], offset: usize, color: Rgb<u8>| {
        let n = losses.len();
        for i in 1..values.len() {
            let (x0, y0) = to_px(i - 1 + offset, n, values[i - 1]);
            let (x1, y1) = to_px(i + offset, n, values[i]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                if x >= 0.0 && y >= 0.0 && (x as u32) < width && (y as u32) < height {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    };
    draw(losses, 0, Rgb([170, 170, 170]));
    let smooth = moving_average(losses, SMOOTHING_WINDOW);
    draw(&smooth, SMOOTHING_WINDOW - 1, Rgb([200, 30, 30]));
    img
}

pub fn write_loss_png(path: &Path, losses: &[f64]) -> Result<()> {
    loss_plot(losses, 640, 360).save(path)?;
    Ok(())
}
