//! Density-map visualization: color-mapped panels with count captions,
//! rendered straight to PNG files (no interactive component).

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("image error at {path}: {source}")]
    Image { path: String, source: image::ImageError },
}

/// Piecewise-linear heat colormap (dark blue to yellow-white).
fn colormap(t: f64) -> [u8; 3] {
    const ANCHORS: [(f64, [f64; 3]); 5] = [
        (0.00, [0.0, 0.0, 8.0]),
        (0.25, [87.0, 16.0, 110.0]),
        (0.50, [188.0, 55.0, 84.0]),
        (0.75, [249.0, 142.0, 9.0]),
        (1.00, [252.0, 255.0, 164.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in ANCHORS.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return core::array::from_fn(|i| (c0[i] + f * (c1[i] - c0[i])).round() as u8);
        }
    }
    [252, 255, 164]
}

/// Renders one density map as a color-mapped image, upscaled by `upscale`
/// with nearest-neighbor so stride-level cells stay visible. `max` fixes the
/// color scale (shared across panels); `None` normalizes by the map's own
/// maximum.
pub fn density_to_image(map: &Array2<f64>, upscale: usize, max: Option<f64>) -> RgbImage {
    let (h, w) = map.dim();
    let peak = max.unwrap_or_else(|| map.iter().cloned().fold(0.0, f64::max));
    let peak = if peak > 0.0 { peak } else { 1.0 };
    let u = upscale.max(1);
    let mut img = RgbImage::new((w * u) as u32, (h * u) as u32);
    for y in 0..h * u {
        for x in 0..w * u {
            let v = map[[y / u, x / u]] / peak;
            img.put_pixel(x as u32, y as u32, Rgb(colormap(v)));
        }
    }
    img
}

/// Converts a `[3, H, W]` float image in `[0, 1]` back to 8-bit RGB.
pub fn array_to_rgb(image: &Array3<f32>) -> RgbImage {
    let (_, h, w) = image.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = core::array::from_fn(|c| {
                (image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// 5x7 bitmap glyph rows (5 low bits per row, MSB on the left).
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        _ => [0x00; 7],
    }
}

/// Draws text at `(x, y)` in white; each glyph cell is 6x8 pixels.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..5u32 {
                if row & (0x10 >> gx) != 0 {
                    let (px, py) = (cx + gx, y + gy as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb([255, 255, 255]));
                    }
                }
            }
        }
        cx += 6;
    }
}

/// One captioned panel of a figure.
pub struct Panel {
    pub label: String,
    pub image: RgbImage,
}

/// Lays panels out horizontally over a caption strip and writes one PNG.
pub fn compose_panels(panels: &[Panel], path: &Path) -> Result<(), VizError> {
    const GAP: u32 = 2;
    const CAPTION: u32 = 11;
    let height = panels.iter().map(|p| p.image.height()).max().unwrap_or(1);
    let width: u32 =
        panels.iter().map(|p| p.image.width()).sum::<u32>() + GAP * (panels.len() as u32 + 1);
    let mut canvas = RgbImage::from_pixel(width.max(1), height + CAPTION + 2 * GAP, Rgb([24, 24, 24]));

    let mut cx = GAP;
    for panel in panels {
        for (x, y, px) in panel.image.enumerate_pixels() {
            canvas.put_pixel(cx + x, GAP + y, *px);
        }
        draw_text(&mut canvas, cx + 1, height + 2 * GAP, &panel.label);
        cx += panel.image.width() + GAP;
    }
    canvas
        .save(path)
        .map_err(|source| VizError::Image { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 8]);
        assert_eq!(colormap(1.0), [252, 255, 164]);
        assert_eq!(colormap(-1.0), colormap(0.0));
    }

    #[test]
    fn zero_map_renders_without_error() {
        let map = Array2::<f64>::zeros((4, 4));
        let img = density_to_image(&map, 8, None);
        assert_eq!(img.dimensions(), (32, 32));
        assert!(img.pixels().all(|p| p.0 == colormap(0.0)));
    }

    #[test]
    fn panels_compose_to_one_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        let map = Array2::from_shape_fn((4, 4), |(y, x)| (y + x) as f64);
        let panels = vec![
            Panel { label: "GT 12.0".into(), image: density_to_image(&map, 4, None) },
            Panel { label: "CONV 11.5".into(), image: density_to_image(&map, 4, Some(6.0)) },
        ];
        compose_panels(&panels, &path).unwrap();
        let reloaded = image::open(&path).unwrap().to_rgb8();
        assert!(reloaded.width() > 32 && reloaded.height() > 16);
    }
}
