//! Separable bicubic resampling (`a = −0.5`) with symmetric edge reflection.
//! Downscaling widens the kernel by the scale factor (antialiasing).

use super::DataError;
use crate::tensor::ImageTensor;

pub const BICUBIC_A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Maps any integer index into `0..n` by mirroring about the edges
/// (`-1 → 0`, `n → n − 1`).
pub fn reflect(mut j: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if j < 0 {
            j = -j - 1;
        } else if j >= n {
            j = 2 * n - 1 - j;
        } else {
            return j as usize;
        }
    }
}

/// Per output index: `(input index, weight)` taps, normalized to sum 1.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let half = 2.0 / stretch;
    (0..n_out)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let lo = (u - half).ceil() as i64;
            let hi = (u + half).floor() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
            for j in lo..=hi {
                let w = cubic((u - j as f64) * stretch);
                if w != 0.0 {
                    taps.push((reflect(j, n_in), w));
                }
            }
            let s: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= s);
            taps
        })
        .collect()
}

/// Resizes to `out_h × out_w`, clamping results to `[0, 1]`.
pub fn resize_bicubic(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, DataError> {
    let (c, h, w) = img.shape();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(DataError::EmptyImage);
    }
    let tx = axis_taps(w, out_w);
    let ty = axis_taps(h, out_h);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![0.0; h * out_w];
    for ch in 0..c {
        let p = img.plane(ch);
        for y in 0..h {
            let row = &p[y * w..(y + 1) * w];
            for (x, taps) in tx.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(j, wt)| wt * row[j]).sum();
            }
        }
        for taps in &ty {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(j, wt)| wt * rows[j * out_w + x]).sum();
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(ImageTensor::new(c, out_h, out_w, out)?)
}

/// Halves both dimensions. Both must be even.
pub fn bicubic_downsample(img: &ImageTensor) -> Result<ImageTensor, DataError> {
    let (_, h, w) = img.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(DataError::OddDimensions { height: h, width: w });
    }
    resize_bicubic(img, h / 2, w / 2)
}

/// Enlarges both dimensions by `factor`.
pub fn bicubic_upsample(img: &ImageTensor, factor: usize) -> Result<ImageTensor, DataError> {
    if factor == 0 {
        return Err(DataError::EmptyImage);
    }
    resize_bicubic(img, img.height() * factor, img.width() * factor)
}
