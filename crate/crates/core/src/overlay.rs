//! Token-region overlays: every pixel is colored by the token whose region
//! covers it, so regions sharing a color are represented by one token.
//!
//! A token's color is a fixed palette entry (keyed by token index) blended
//! half-and-half with the mean image color over its region; region borders
//! are drawn dark.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::autograd::Mat;
use crate::error::{invalid, Result};
use crate::token_space::{FeatureMap, RegionMap};

/// Deterministic, well-spread color for token `index` (golden-ratio hue
/// walk at fixed saturation and value).
pub fn palette(index: usize) -> [f64; 3] {
    let h = (index as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.65, 0.95);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_rgb(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Reads an 8-bit image file as an RGB feature map with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<FeatureMap> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = Mat::from_shape_fn((h * w, 3), |(i, c)| img.get_pixel((i % w) as u32, (i / w) as u32)[c] as f64 / 255.0);
    FeatureMap::new(data, h, w)
}

/// Image as an 8-bit picture, each pixel repeated `scale` times per side.
pub fn render_image(image: &FeatureMap, scale: u32) -> Result<RgbImage> {
    if image.channels() != 3 {
        return invalid("images must have 3 channels");
    }
    let (h, w) = (image.height as u32, image.width as u32);
    Ok(RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let (px, py) = ((x / scale) as usize, (y / scale) as usize);
        to_rgb([0, 1, 2].map(|c| image.at(py, px, c)))
    }))
}

/// Overlay of `regions` on `image`. The image must be an integer multiple
/// of the regions' base grid.
pub fn render_overlay(image: &FeatureMap, regions: &RegionMap, scale: u32) -> Result<RgbImage> {
    let (bh, bw) = regions.base_resolution();
    if !image.height.is_multiple_of(bh) || !image.width.is_multiple_of(bw) || image.height / bh != image.width / bw {
        return invalid(format!("image {}x{} is not a multiple of the {bh}x{bw} grid", image.height, image.width));
    }
    let cell = image.height / bh;
    let token_at = |px: usize, py: usize| regions.cells()[(py / cell) * bw + px / cell];

    let n = regions.num_tokens();
    let mut sums = vec![[0.0f64; 3]; n];
    let mut counts = vec![0usize; n];
    for py in 0..image.height {
        for px in 0..image.width {
            let t = token_at(px, py);
            for c in 0..3 {
                sums[t][c] += image.at(py, px, c);
            }
            counts[t] += 1;
        }
    }
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|t| {
            let p = palette(t);
            [0, 1, 2].map(|c| 0.5 * p[c] + 0.5 * sums[t][c] / counts[t].max(1) as f64)
        })
        .collect();

    let (w, h) = (image.width as u32 * scale, image.height as u32 * scale);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let (px, py) = ((x / scale) as usize, (y / scale) as usize);
        let t = token_at(px, py);
        let left_edge = x % scale == 0 && px > 0 && token_at(px - 1, py) != t;
        let top_edge = y % scale == 0 && py > 0 && token_at(px, py - 1) != t;
        if left_edge || top_edge {
            to_rgb(colors[t].map(|v| v * 0.35))
        } else {
            to_rgb(colors[t])
        }
    }))
}

/// Horizontal strip of `panels` separated by `gap` white columns.
pub fn composite_strip(panels: &[RgbImage], gap: u32) -> RgbImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width() + gap;
    }
    out
}

/// Writes `stage{s}.png` per stage and `strip.png` (input image followed by
/// every stage) into `dir`; returns the written paths.
pub fn write_overlays(dir: &Path, image: &FeatureMap, stages: &[&RegionMap], scale: u32) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut panels = vec![render_image(image, scale)?];
    let mut paths = Vec::new();
    for (s, regions) in stages.iter().enumerate() {
        let img = render_overlay(image, regions, scale)?;
        let path = dir.join(format!("stage{}.png", s + 1));
        img.save(&path)?;
        paths.push(path);
        panels.push(img);
    }
    let path = dir.join("strip.png");
    composite_strip(&panels, 4).save(&path)?;
    paths.push(path);
    Ok(paths)
}
