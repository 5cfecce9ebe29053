//! Non-overlapping patch tokenization and fixed 2-D sin-cos positions.

use ndarray::{s, Array2};

use super::mel::MelSpectrogram;
use crate::error::{Error, Result};

/// Raster-ordered patch tokens (time-major, then frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `[rows * cols x patch_h * patch_w]`
    pub tokens: Array2<f32>,
    pub rows: usize,
    pub cols: usize,
    pub patch: (usize, usize),
}

impl PatchGrid {
    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn patchify(m: &MelSpectrogram, patch: (usize, usize)) -> Result<PatchGrid> {
    let (ph, pw) = patch;
    let (frames, bins) = m.values.dim();
    if ph == 0 || pw == 0 || frames % ph != 0 || bins % pw != 0 || frames == 0 || bins == 0 {
        return Err(Error::Shape(format!(
            "spectrogram {frames}x{bins} is not tiled by {ph}x{pw} patches"
        )));
    }
    let (rows, cols) = (frames / ph, bins / pw);
    let mut tokens = Array2::<f32>::zeros((rows * cols, ph * pw));
    for r in 0..rows {
        for c in 0..cols {
            let block = m.values.slice(s![r * ph..(r + 1) * ph, c * pw..(c + 1) * pw]);
            let mut row = tokens.row_mut(r * cols + c);
            row.iter_mut().zip(block.iter()).for_each(|(d, &v)| *d = v);
        }
    }
    Ok(PatchGrid {
        tokens,
        rows,
        cols,
        patch,
    })
}

pub fn unpatchify(grid: &PatchGrid, frame_hop_ms: f64) -> MelSpectrogram {
    let (ph, pw) = grid.patch;
    let mut values = Array2::<f32>::zeros((grid.rows * ph, grid.cols * pw));
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let token = grid.tokens.row(r * grid.cols + c);
            let mut block = values.slice_mut(s![r * ph..(r + 1) * ph, c * pw..(c + 1) * pw]);
            block.iter_mut().zip(token.iter()).for_each(|(d, &v)| *d = v);
        }
    }
    MelSpectrogram {
        values,
        frame_hop_ms,
    }
}

/// Factorized 2-D sin-cos table, `[rows*cols x dim]`. The first half of the
/// channels encodes the time row, the second half the frequency column;
/// each half interleaves `sin(p*w_i), cos(p*w_i)` with
/// `w_i = 10000^(-2i/half)`.
pub fn sincos_positions(rows: usize, cols: usize, dim: usize) -> Result<Array2<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!(
            "positional width {dim} must be a positive multiple of 4"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 10000f64.powf(-(2.0 * i as f64) / half as f64))
        .collect();
    let mut table = Array2::<f64>::zeros((rows * cols, dim));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = table.row_mut(r * cols + c);
            for (i, &w) in freqs.iter().enumerate() {
                let (pt, pf) = (r as f64 * w, c as f64 * w);
                row[2 * i] = pt.sin();
                row[2 * i + 1] = pt.cos();
                row[half + 2 * i] = pf.sin();
                row[half + 2 * i + 1] = pf.cos();
            }
        }
    }
    Ok(table)
}
