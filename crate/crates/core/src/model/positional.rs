//! Fixed sine-cosine positional codes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Positions `0..count` on a line.
    OneD,
    /// Positions on a square `side × side` raster; `count` must be a square.
    TwoD,
}

fn code_1d(pos: f64, d: usize, out: &mut [f32]) {
    for j in 0..d / 2 {
        let angle = pos / 10000f64.powf(2.0 * j as f64 / d as f64);
        out[2 * j] = angle.sin() as f32;
        out[2 * j + 1] = angle.cos() as f32;
    }
}

/// `[count, d_model]` table. For [`Layout::OneD`], channel pair `j` of
/// position `pos` holds `sin(pos / 10000^(2j/d))` and `cos(·)`. For
/// [`Layout::TwoD`] the first half of the channels encodes the row and the
/// second half the column, each with the 1D code of width `d/2`.
pub fn sincos_positional(count: usize, d_model: usize, layout: Layout) -> Result<Tensor> {
    let mut data = vec![0.0f32; count * d_model];
    match layout {
        Layout::OneD => {
            if d_model % 2 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "1D positional code needs even width, got {d_model}"
                )));
            }
            for (pos, row) in data.chunks_mut(d_model).enumerate() {
                code_1d(pos as f64, d_model, row);
            }
        }
        Layout::TwoD => {
            if d_model % 4 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "2D positional code needs width divisible by 4, got {d_model}"
                )));
            }
            let side = (count as f64).sqrt().round() as usize;
            if side * side != count {
                return Err(Error::InvalidArgument(format!(
                    "2D positional code needs a square count, got {count}"
                )));
            }
            let half = d_model / 2;
            for (pos, row) in data.chunks_mut(d_model).enumerate() {
                let (r, c) = (pos / side, pos % side);
                let (left, right) = row.split_at_mut(half);
                code_1d(r as f64, half, left);
                code_1d(c as f64, half, right);
            }
        }
    }
    Ok(Tensor::from_parts(vec![count, d_model], data))
}
