//! Binary PGM (P5) export of input vectors, for eyeballing distortions.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

/// Encodes one image; pixels are quantized as `round(p * 255)`.
pub fn encode(pixels: &[f32], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Tiles up to `cols * rows` square images of side `side` into one image,
/// separated by a one-pixel white border.
pub fn grid(images: &[&[f32]], side: usize, cols: usize, rows: usize) -> (Vec<f32>, usize, usize) {
    let (w, h) = (cols * (side + 1) + 1, rows * (side + 1) + 1);
    let mut canvas = vec![1.0f32; w * h];
    for (n, img) in images.iter().take(cols * rows).enumerate() {
        let (gx, gy) = (n % cols, n / cols);
        for r in 0..side {
            let row = (gy * (side + 1) + 1 + r) * w + gx * (side + 1) + 1;
            canvas[row..row + side].copy_from_slice(&img[r * side..(r + 1) * side]);
        }
    }
    (canvas, w, h)
}

pub fn write(path: &Path, pixels: &[f32], width: usize, height: usize) -> anyhow::Result<()> {
    if pixels.len() != width * height {
        bail!("{} pixels do not fill a {width}x{height} image", pixels.len());
    }
    fs::write(path, encode(pixels, width, height))
        .with_context(|| format!("writing {}", path.display()))
}
