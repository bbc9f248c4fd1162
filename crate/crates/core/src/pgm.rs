//! Binary (P5) portable graymap output for image grids.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Side length of a square image with `x_dim` pixels, if there is one.
pub fn square_side(x_dim: usize) -> Option<usize> {
    let s = (x_dim as f64).sqrt().round() as usize;
    (s * s == x_dim).then_some(s)
}

/// Tiles row-major images (intensities in `[0, 1]`) into a grid with
/// `cols` images per row and a one-pixel gap, returning the P5 bytes.
pub fn grid(images: &Array2<f64>, height: usize, width: usize, cols: usize) -> Result<Vec<u8>> {
    if height * width != images.ncols() {
        return Err(Error::dim("pgm image size", images.ncols(), height * width));
    }
    if cols == 0 || images.nrows() == 0 {
        return Err(Error::Config("a grid needs at least one image and one column".into()));
    }
    let n = images.nrows();
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (width + 1) - 1, rows * (height + 1) - 1);
    let mut px = vec![0u8; gw * gh];
    for (i, img) in images.rows().into_iter().enumerate() {
        let (r0, c0) = ((i / cols) * (height + 1), (i % cols) * (width + 1));
        for (j, &v) in img.iter().enumerate() {
            let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            px[(r0 + j / width) * gw + c0 + j % width] = level;
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_grid(path: &Path, images: &Array2<f64>, height: usize, width: usize, cols: usize) -> Result<()> {
    let bytes = grid(images, height, width, cols)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
