//! Image-quality and text-recognition metrics.

mod ocr;
mod report;
mod text;

pub use ocr::{OcrEngine, TesseractCli};
pub use report::{
    degrade, evaluate_sr, BicubicUpscaler, ChainedUpscaler, EvalItem, IdentityUpscaler, ItemMetrics, MetricReport,
    MetricSummary, StageUpscaler, Upscaler,
};
pub use text::{lcs_length, lcs_score, levenshtein_distance, levenshtein_score, normalize_ocr_text, TextPair};

use thiserror::Error;

use crate::tensor::{ImageTensor, TensorError};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("image {height}×{width} is smaller than the {window}×{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("OCR engine `{0}` is not available")]
    OcrUnavailable(String),
    #[error("OCR engine failed: {0}")]
    OcrFailed(String),
    #[error("item `{0}` has no text label but OCR scoring was requested")]
    MissingLabel(String),
    #[error("upscaling failed: {0}")]
    Upscale(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_with_peak(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64, MetricsError> {
    a.same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// PSNR with peak value 1.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MetricsError> {
    psnr_with_peak(a, b, 1.0)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a `h×w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all full 11×11 Gaussian windows
/// (σ = 1.5, K1 = 0.01, K2 = 0.03, peak 1), averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MetricsError> {
    a.same_shape(b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let (x, y) = (a.plane(ch), b.plane(ch));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_worked_values() {
        let a = ImageTensor::filled(1, 10, 10, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = ImageTensor::filled(1, 10, 10, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = ImageTensor::zeros(1, 4, 4);
        let o = ImageTensor::filled(1, 4, 4, 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&z, &ImageTensor::zeros(1, 4, 5)).is_err());
    }

    #[test]
    fn ssim_worked_values() {
        let a = ImageTensor::from_fn(1, 16, 16, |_, y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let z = ImageTensor::zeros(1, 12, 12);
        let o = ImageTensor::filled(1, 12, 12, 1.0);
        let c1 = SSIM_K1 * SSIM_K1;
        assert!((ssim(&z, &o).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(matches!(
            ssim(&ImageTensor::zeros(1, 10, 20), &ImageTensor::zeros(1, 10, 20)),
            Err(MetricsError::TooSmall { .. })
        ));
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }
}
