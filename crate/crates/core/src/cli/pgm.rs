use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::maskgen::MaskPlan;

/// Binary P5 image, max value 255.
pub fn encode_pgm(pixels: &Array2<u8>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter());
    out
}

pub fn write_pgm(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    std::fs::write(path, encode_pgm(pixels)).map_err(|e| Error::io(path, e))
}

/// Grid cells as `scale x scale` squares: context 128, targets 255,
/// removed 0. Time runs down, frequency across.
pub fn mask_image(plan: &MaskPlan, scale: usize) -> Array2<u8> {
    let grid = plan.grid();
    let codes = plan.cell_codes();
    Array2::from_shape_fn((grid.rows * scale, grid.cols * scale), |(y, x)| {
        match codes[(y / scale) * grid.cols + x / scale] {
            1 => 128,
            2 => 255,
            _ => 0,
        }
    })
}

/// Min-max scaled spectrogram with time across and low frequencies at the
/// bottom.
pub fn spectrogram_image(values: &Array2<f32>) -> Array2<u8> {
    let (frames, bins) = values.dim();
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Array2::from_shape_fn((bins, frames), |(y, x)| {
        let v = (values[[x, bins - 1 - y]] - lo) / span;
        (v * 255.0).round().clamp(0.0, 255.0) as u8
    })
}
