//! Composite training objective:
//! `λ1·pixel + λ2·perceptual + λ3·edge`.
//!
//! * pixel: mean squared error over all elements.
//! * perceptual: squared feature difference under a fixed extractor,
//!   divided by the feature map's `C_j·H_j·W_j`.
//! * edge: class-balanced cross-entropy between the edge map of the
//!   super-resolved image and the binarized edge map of the reference.
//!
//! Batch losses are the mean of per-image losses.

mod networks;

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use networks::{
    hed_side1_from_file, random_conv_extractor, tiny_edge_network, vgg19_from_file,
    IdentityExtractor, NetEdgeNetwork, NetExtractor, SobelEdgeNetwork, VGG19_DEFAULT_TAP,
};

use crate::nn::NnError;
use crate::tensor::{ImageTensor, Tensor, TensorError};

/// Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before taking logs.
pub const LOG_EPS: f64 = 1e-7;
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("edge target must be binary; found {value} at index {index}")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("{asset} not found at {path}; supply the file or choose a different network")]
    MissingAsset { asset: String, path: String },
    #[error("{asset} is unusable: {reason}")]
    BadAsset { asset: String, reason: String },
    #[error("network rejected input: {0}")]
    Network(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A fixed differentiable map `φ_j` whose output is compared in feature space.
pub trait FeatureExtractor: Send + Sync + Debug {
    /// Identifies the tapped layer.
    fn layer_id(&self) -> String;
    fn features(&self, x: &Tensor) -> Result<Tensor, LossError>;
    /// Gradient at `x` given `grad` at the features.
    fn features_vjp(&self, x: &Tensor, grad: &Tensor) -> Result<Tensor, LossError>;
}

/// A fixed differentiable map to a one-channel edge-probability map in `[0, 1]`.
pub trait EdgeNetwork: Send + Sync + Debug {
    fn side_output(&self) -> usize {
        1
    }
    fn edge_map(&self, x: &Tensor) -> Result<Tensor, LossError>;
    fn edge_map_vjp(&self, x: &Tensor, grad: &Tensor) -> Result<Tensor, LossError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_pixel: f64,
    pub lambda_perceptual: f64,
    pub lambda_edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pixel: 1.0,
            lambda_perceptual: 0.006,
            lambda_edge: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(pixel: f64, perceptual: f64, edge: f64) -> Self {
        Self {
            lambda_pixel: pixel,
            lambda_perceptual: perceptual,
            lambda_edge: edge,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_pixel", self.lambda_pixel),
            ("lambda_perceptual", self.lambda_perceptual),
            ("lambda_edge", self.lambda_edge),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.lambda_pixel * k, self.lambda_perceptual * k, self.lambda_edge * k)
    }
}

/// Per-term values and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub perceptual: f64,
    pub edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(pixel: f64, perceptual: f64, edge: f64, w: &LossWeights) -> Self {
        Self {
            pixel,
            perceptual,
            edge,
            total: w.lambda_pixel * pixel + w.lambda_perceptual * perceptual + w.lambda_edge * edge,
        }
    }

    /// Running mean helper: `self + (other - self) / n`.
    pub fn accumulate_mean(&mut self, other: &LossBreakdown, n: usize) {
        let n = n as f64;
        self.pixel += (other.pixel - self.pixel) / n;
        self.perceptual += (other.perceptual - self.perceptual) / n;
        self.edge += (other.edge - self.edge) / n;
        self.total += (other.total - self.total) / n;
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Per-image mean squared error, averaged over the batch.
pub fn pixel_loss_batch(sr: &Tensor, hr: &Tensor) -> Result<f64, LossError> {
    check_same(sr, hr)?;
    let per = sr.sample_len() as f64;
    let total: f64 = (0..sr.batch())
        .map(|i| {
            sr.sample(i)
                .iter()
                .zip(hr.sample(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / per
        })
        .sum();
    Ok(total / sr.batch() as f64)
}

fn feature_loss(fsr: &Tensor, fhr: &Tensor) -> Result<f64, LossError> {
    check_same(fsr, fhr)?;
    pixel_loss_batch(fsr, fhr)
}

/// Class-balanced binary cross-entropy for one image (sum over pixels):
/// `-(β·Σ_{t=1} ln p + (1-β)·Σ_{t=0} ln(1-p))`, `β = |negatives| / |pixels|`.
fn cb_bce_single(pred: &[f64], target: &[f64]) -> f64 {
    let negatives = target.iter().filter(|t| **t == 0.0).count();
    let beta = negatives as f64 / pred.len() as f64;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let p = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
        if *t == 1.0 {
            pos += p.ln();
        } else {
            neg += (1.0 - p).ln();
        }
    }
    -(beta * pos + (1.0 - beta) * neg)
}

fn cb_bce_single_grad(pred: &[f64], target: &[f64], scale: f64, out: &mut [f64]) {
    let negatives = target.iter().filter(|t| **t == 0.0).count();
    let beta = negatives as f64 / pred.len() as f64;
    for ((g, p), t) in out.iter_mut().zip(pred).zip(target) {
        let inside = *p > LOG_EPS && *p < 1.0 - LOG_EPS;
        *g = if !inside {
            0.0
        } else if *t == 1.0 {
            -beta / p * scale
        } else {
            (1.0 - beta) / (1.0 - p) * scale
        };
    }
}

fn check_binary(target: &[f64]) -> Result<(), LossError> {
    if let Some((index, value)) = target.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(LossError::NonBinaryTarget { index, value: *value });
    }
    Ok(())
}

pub fn class_balanced_bce_batch(pred: &Tensor, target: &Tensor) -> Result<f64, LossError> {
    check_same(pred, target)?;
    check_binary(target.data())?;
    let total: f64 = (0..pred.batch())
        .map(|i| cb_bce_single(pred.sample(i), target.sample(i)))
        .sum();
    Ok(total / pred.batch() as f64)
}

/// 1 where `edge ≥ threshold`, else 0.
pub fn binarize(edge: &Tensor, threshold: f64) -> Tensor {
    let mut t = edge.clone();
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v >= threshold { 1.0 } else { 0.0 });
    t
}

/// The three-term objective with its networks.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub weights: LossWeights,
    pub extractor: Arc<dyn FeatureExtractor>,
    pub edge_net: Arc<dyn EdgeNetwork>,
    pub edge_threshold: f64,
}

impl CompositeLoss {
    pub fn new(
        weights: LossWeights,
        extractor: Arc<dyn FeatureExtractor>,
        edge_net: Arc<dyn EdgeNetwork>,
    ) -> Result<Self, LossError> {
        weights.validate()?;
        Ok(Self {
            weights,
            extractor,
            edge_net,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
        })
    }

    pub fn with_edge_threshold(mut self, threshold: f64) -> Self {
        self.edge_threshold = threshold;
        self
    }

    /// Batch-mean loss terms.
    pub fn evaluate(&self, sr: &Tensor, hr: &Tensor) -> Result<LossBreakdown, LossError> {
        check_same(sr, hr)?;
        let pixel = pixel_loss_batch(sr, hr)?;
        let fsr = self.extractor.features(sr)?;
        let fhr = self.extractor.features(hr)?;
        let perceptual = feature_loss(&fsr, &fhr)?;
        let esr = self.edge_net.edge_map(sr)?;
        let target = binarize(&self.edge_net.edge_map(hr)?, self.edge_threshold);
        let edge = class_balanced_bce_batch(&esr, &target)?;
        Ok(LossBreakdown::combine(pixel, perceptual, edge, &self.weights))
    }

    /// Loss terms plus the gradient of the weighted total with respect to `sr`.
    pub fn evaluate_with_grad(&self, sr: &Tensor, hr: &Tensor) -> Result<(LossBreakdown, Tensor), LossError> {
        check_same(sr, hr)?;
        let w = &self.weights;
        let n = sr.batch() as f64;
        let pixel = pixel_loss_batch(sr, hr)?;
        let mut grad = sr.clone();
        let k = w.lambda_pixel * 2.0 / (sr.sample_len() as f64 * n);
        for (g, h) in grad.data_mut().iter_mut().zip(hr.data()) {
            *g = k * (*g - h);
        }

        let fsr = self.extractor.features(sr)?;
        let fhr = self.extractor.features(hr)?;
        let perceptual = feature_loss(&fsr, &fhr)?;
        if w.lambda_perceptual > 0.0 {
            let k = w.lambda_perceptual * 2.0 / (fsr.sample_len() as f64 * n);
            let mut gf = fsr.clone();
            for (g, h) in gf.data_mut().iter_mut().zip(fhr.data()) {
                *g = k * (*g - h);
            }
            grad.add_assign(&self.extractor.features_vjp(sr, &gf)?);
        }

        let esr = self.edge_net.edge_map(sr)?;
        let target = binarize(&self.edge_net.edge_map(hr)?, self.edge_threshold);
        let edge = class_balanced_bce_batch(&esr, &target)?;
        if w.lambda_edge > 0.0 {
            let mut ge = esr.clone();
            for i in 0..esr.batch() {
                cb_bce_single_grad(esr.sample(i), target.sample(i), w.lambda_edge / n, ge.sample_mut(i));
            }
            grad.add_assign(&self.edge_net.edge_map_vjp(sr, &ge)?);
        }
        Ok((LossBreakdown::combine(pixel, perceptual, edge, w), grad))
    }
}

/// Mean squared error between two images.
pub fn pixel_loss(sr: &ImageTensor, hr: &ImageTensor) -> Result<f64, LossError> {
    pixel_loss_batch(&sr.to_batch(), &hr.to_batch())
}

/// `(1 / (C_j·H_j·W_j)) · Σ (φ(hr) − φ(sr))²`
pub fn perceptual_loss(sr: &ImageTensor, hr: &ImageTensor, fx: &dyn FeatureExtractor) -> Result<f64, LossError> {
    let (a, b) = (sr.to_batch(), hr.to_batch());
    check_same(&a, &b)?;
    feature_loss(&fx.features(&a)?, &fx.features(&b)?)
}

/// Class-balanced cross-entropy of a soft prediction against a binary target.
pub fn class_balanced_bce(pred: &ImageTensor, target: &ImageTensor) -> Result<f64, LossError> {
    class_balanced_bce_batch(&pred.to_batch(), &target.to_batch())
}

/// Edge term with the default binarization threshold.
pub fn edge_loss(sr: &ImageTensor, hr: &ImageTensor, en: &dyn EdgeNetwork) -> Result<f64, LossError> {
    edge_loss_with_threshold(sr, hr, en, DEFAULT_EDGE_THRESHOLD)
}

pub fn edge_loss_with_threshold(
    sr: &ImageTensor,
    hr: &ImageTensor,
    en: &dyn EdgeNetwork,
    threshold: f64,
) -> Result<f64, LossError> {
    let (a, b) = (sr.to_batch(), hr.to_batch());
    check_same(&a, &b)?;
    let target = binarize(&en.edge_map(&b)?, threshold);
    class_balanced_bce_batch(&en.edge_map(&a)?, &target)
}

/// All three terms and their weighted total for one image pair.
pub fn total_loss(
    sr: &ImageTensor,
    hr: &ImageTensor,
    weights: &LossWeights,
    fx: Arc<dyn FeatureExtractor>,
    en: Arc<dyn EdgeNetwork>,
) -> Result<LossBreakdown, LossError> {
    CompositeLoss::new(*weights, fx, en)?.evaluate(&sr.to_batch(), &hr.to_batch())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(data: &[f64]) -> ImageTensor {
        ImageTensor::new(1, 1, data.len(), data.to_vec()).unwrap()
    }

    #[test]
    fn pixel_loss_simple_cases() {
        let a = ImageTensor::filled(1, 4, 4, 0.3);
        assert_eq!(pixel_loss(&a, &a).unwrap(), 0.0);
        let z = ImageTensor::zeros(1, 3, 3);
        let o = ImageTensor::filled(1, 3, 3, 1.0);
        assert_eq!(pixel_loss(&z, &o).unwrap(), 1.0);
        assert!(matches!(
            pixel_loss(&z, &ImageTensor::zeros(1, 3, 4)),
            Err(LossError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn balanced_bce_hand_values() {
        let v = class_balanced_bce(&img(&[0.5, 0.5]), &img(&[1.0, 0.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = class_balanced_bce(&img(&[0.9, 0.1, 0.1, 0.1]), &img(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((v - (-1.5 * 0.9f64.ln())).abs() < 1e-12);
        assert!((v - 0.1580).abs() < 1e-4);
    }

    #[test]
    fn all_negative_target_costs_nothing() {
        let v = class_balanced_bce(&img(&[0.9, 0.3, 0.01]), &img(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn non_binary_target_rejected() {
        assert!(matches!(
            class_balanced_bce(&img(&[0.5, 0.5]), &img(&[1.0, 0.5])),
            Err(LossError::NonBinaryTarget { index: 1, .. })
        ));
    }

    #[test]
    fn clamp_keeps_loss_finite() {
        let v = class_balanced_bce(&img(&[0.0, 1.0]), &img(&[1.0, 0.0])).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(1.0, -0.1, 1.0).validate().is_err());
        assert!(LossWeights::new(1.0, f64::NAN, 1.0).validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
