//! Binary greyscale images (`P5`, maxval 255).

use std::io::Write;

/// Tiles `n` images of `height × width` bytes into a near-square grid with
/// a one-pixel black border between tiles.
pub fn grid(images: &[u8], n: usize, height: usize, width: usize) -> (usize, usize, Vec<u8>) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let gw = cols * (width + 1) + 1;
    let gh = rows * (height + 1) + 1;
    let mut out = vec![0u8; gw * gh];
    for k in 0..n {
        let (tr, tc) = (k / cols, k % cols);
        let img = &images[k * height * width..(k + 1) * height * width];
        for r in 0..height {
            let dst = (tr * (height + 1) + 1 + r) * gw + tc * (width + 1) + 1;
            out[dst..dst + width].copy_from_slice(&img[r * width..(r + 1) * width]);
        }
    }
    (gw, gh, out)
}

pub fn write_pgm(out: &mut impl Write, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)
}

/// Maps model-space values in `[0, 1)` back to intensities.
pub fn to_pixels(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v * 256.0).floor().clamp(0.0, 255.0) as u8).collect()
}
