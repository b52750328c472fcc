//! Sub-pixel rearrangement for 2× upsampling.
//!
//! Depth-to-space ordering: output `(k, 2y+dy, 2x+dx)` takes input
//! `(4k + 2·dy + dx, y, x)`. Checkpoints depend on this convention.

use super::NnError;
use crate::tensor::Tensor;

pub fn pixel_shuffle(x: &Tensor) -> Result<Tensor, NnError> {
    let [n, c, h, w] = x.shape();
    if c % 4 != 0 {
        return Err(NnError::ShuffleChannels(c));
    }
    let co = c / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(n, co, oh, ow);
    for i in 0..n {
        for k in 0..co {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = x.plane(i, 4 * k + 2 * dy + dx);
                    let dst = out.plane_mut(i, k);
                    for y in 0..h {
                        let row = &src[y * w..(y + 1) * w];
                        let drow = &mut dst[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                        for (xx, v) in row.iter().enumerate() {
                            drow[2 * xx + dx] = *v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint, so it maps output
/// gradients back to input gradients.
pub fn pixel_unshuffle(x: &Tensor) -> Result<Tensor, NnError> {
    let [n, c, oh, ow] = x.shape();
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(NnError::UnshuffleSize(oh, ow));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros(n, 4 * c, h, w);
    for i in 0..n {
        for k in 0..c {
            let src = x.plane(i, k).to_vec();
            for dy in 0..2 {
                for dx in 0..2 {
                    let dst = out.plane_mut(i, 4 * k + 2 * dy + dx);
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(2 * y + dy) * ow + 2 * xx + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
