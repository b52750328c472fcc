//! Feature extractors and edge networks behind the loss traits.
//!
//! The pretrained backends read `safetensors` files:
//!
//! * VGG19 uses torchvision key names, `features.{i}.weight` / `features.{i}.bias`.
//! * HED side-output 1 uses `conv1_1.*`, `conv1_2.*` and `score_dsn1.*`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};

use super::{EdgeNetwork, FeatureExtractor, LossError};
use crate::nn::activation::sigmoid_scalar;
use crate::nn::{Conv2d, FrozenNet, Layer};
use crate::tensor::Tensor;

pub const VGG19_DEFAULT_TAP: &str = "conv5_4";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// BGR pixel means (0–255 scale) used by HED.
const HED_MEAN_BGR: [f64; 3] = [104.006_987_93, 116.668_767_62, 122.678_914_34];

/// `φ(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn layer_id(&self) -> String {
        "identity".into()
    }

    fn features(&self, x: &Tensor) -> Result<Tensor, LossError> {
        Ok(x.clone())
    }

    fn features_vjp(&self, _x: &Tensor, grad: &Tensor) -> Result<Tensor, LossError> {
        Ok(grad.clone())
    }
}

/// Feature extractor backed by a [`FrozenNet`] whose last layer is the tap.
#[derive(Debug, Clone)]
pub struct NetExtractor {
    id: String,
    net: FrozenNet,
}

impl NetExtractor {
    pub fn new(id: impl Into<String>, net: FrozenNet) -> Self {
        Self { id: id.into(), net }
    }

    pub fn net(&self) -> &FrozenNet {
        &self.net
    }
}

impl FeatureExtractor for NetExtractor {
    fn layer_id(&self) -> String {
        self.id.clone()
    }

    fn features(&self, x: &Tensor) -> Result<Tensor, LossError> {
        Ok(self.net.forward(x)?)
    }

    fn features_vjp(&self, x: &Tensor, grad: &Tensor) -> Result<Tensor, LossError> {
        Ok(self.net.vjp(x, grad)?)
    }
}

/// Edge network backed by a [`FrozenNet`] ending in a sigmoid.
#[derive(Debug, Clone)]
pub struct NetEdgeNetwork {
    side: usize,
    net: FrozenNet,
}

impl NetEdgeNetwork {
    pub fn new(side: usize, net: FrozenNet) -> Self {
        Self { side, net }
    }
}

impl EdgeNetwork for NetEdgeNetwork {
    fn side_output(&self) -> usize {
        self.side
    }

    fn edge_map(&self, x: &Tensor) -> Result<Tensor, LossError> {
        Ok(self.net.forward(x)?)
    }

    fn edge_map_vjp(&self, x: &Tensor, grad: &Tensor) -> Result<Tensor, LossError> {
        Ok(self.net.vjp(x, grad)?)
    }
}

/// A fixed, randomly initialized conv stack tapped before its last activation.
/// Lightweight stand-in for a pretrained extractor.
pub fn random_conv_extractor(image_channels: usize, widths: &[usize], seed: u64) -> NetExtractor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut cin = image_channels;
    for (i, &w) in widths.iter().enumerate() {
        if i > 0 {
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Conv(Conv2d::uniform(cin, w, 3, &mut rng)));
        cin = w;
    }
    let widths: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
    NetExtractor::new(format!("random-conv[{}]@{seed}", widths.join(",")), FrozenNet::new(layers))
}

/// `conv3×3(C→4) → ReLU → conv1×1(4→1) → sigmoid`, randomly initialized.
pub fn tiny_edge_network(image_channels: usize, seed: u64) -> NetEdgeNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetEdgeNetwork::new(
        1,
        FrozenNet::new(vec![
            Layer::Conv(Conv2d::uniform(image_channels, 4, 3, &mut rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::uniform(4, 1, 1, &mut rng)),
            Layer::Sigmoid,
        ]),
    )
}

/// Analytic edge detector: `sigmoid(gain · (|∇g| − bias))` where `g` is the
/// channel mean and `∇` the 3×3 Sobel pair with replicated borders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobelEdgeNetwork {
    pub gain: f64,
    pub bias: f64,
}

impl Default for SobelEdgeNetwork {
    fn default() -> Self {
        Self { gain: 4.0, bias: 1.0 }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
/// Keeps the magnitude differentiable at zero gradient.
const SOBEL_SMOOTH: f64 = 1e-6;

impl SobelEdgeNetwork {
    fn gray(x: &Tensor, i: usize) -> Vec<f64> {
        let c = x.channels();
        let mut g = vec![0.0; x.plane_len()];
        for ch in 0..c {
            for (a, b) in g.iter_mut().zip(x.plane(i, ch)) {
                *a += b / c as f64;
            }
        }
        g
    }

    fn gradients(g: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut sx, mut sy) = (0.0, 0.0);
                for (ky, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                    let yy = (y + ky).saturating_sub(1).min(h - 1);
                    for kx in 0..3 {
                        let xx = (x + kx).saturating_sub(1).min(w - 1);
                        let v = g[yy * w + xx];
                        sx += rx[kx] * v;
                        sy += ry[kx] * v;
                    }
                }
                gx[y * w + x] = sx;
                gy[y * w + x] = sy;
            }
        }
        (gx, gy)
    }
}

impl EdgeNetwork for SobelEdgeNetwork {
    fn edge_map(&self, x: &Tensor) -> Result<Tensor, LossError> {
        let (h, w) = (x.height(), x.width());
        let mut out = Tensor::zeros(x.batch(), 1, h, w);
        for i in 0..x.batch() {
            let (gx, gy) = Self::gradients(&Self::gray(x, i), h, w);
            for ((o, a), b) in out.plane_mut(i, 0).iter_mut().zip(&gx).zip(&gy) {
                let mag = (a * a + b * b + SOBEL_SMOOTH).sqrt();
                *o = sigmoid_scalar(self.gain * (mag - self.bias));
            }
        }
        Ok(out)
    }

    fn edge_map_vjp(&self, x: &Tensor, grad: &Tensor) -> Result<Tensor, LossError> {
        let (c, h, w) = (x.channels(), x.height(), x.width());
        let mut out = Tensor::zeros(x.batch(), c, h, w);
        for i in 0..x.batch() {
            let (gx, gy) = Self::gradients(&Self::gray(x, i), h, w);
            let g = grad.plane(i, 0);
            let mut dgx = vec![0.0; h * w];
            let mut dgy = vec![0.0; h * w];
            for p in 0..h * w {
                let mag = (gx[p] * gx[p] + gy[p] * gy[p] + SOBEL_SMOOTH).sqrt();
                let e = sigmoid_scalar(self.gain * (mag - self.bias));
                let dmag = g[p] * e * (1.0 - e) * self.gain;
                dgx[p] = dmag * gx[p] / mag;
                dgy[p] = dmag * gy[p] / mag;
            }
            let mut dgray = vec![0.0; h * w];
            for y in 0..h {
                for xx in 0..w {
                    let (dx, dy) = (dgx[y * w + xx], dgy[y * w + xx]);
                    for (ky, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                        let yy = (y + ky).saturating_sub(1).min(h - 1);
                        for kx in 0..3 {
                            let xs = (xx + kx).saturating_sub(1).min(w - 1);
                            dgray[yy * w + xs] += rx[kx] * dx + ry[kx] * dy;
                        }
                    }
                }
            }
            for ch in 0..c {
                for (o, d) in out.plane_mut(i, ch).iter_mut().zip(&dgray) {
                    *o = d / c as f64;
                }
            }
        }
        Ok(out)
    }
}

fn open_weights(path: &Path, asset: &str) -> Result<Vec<u8>, LossError> {
    if !path.exists() {
        return Err(LossError::MissingAsset {
            asset: asset.into(),
            path: path.display().to_string(),
        });
    }
    std::fs::read(path).map_err(|e| LossError::BadAsset {
        asset: asset.into(),
        reason: e.to_string(),
    })
}

fn read_values(st: &SafeTensors<'_>, name: &str, expected: &[usize], asset: &str) -> Result<Vec<f64>, LossError> {
    let bad = |reason: String| LossError::BadAsset {
        asset: asset.into(),
        reason,
    };
    let view = st.tensor(name).map_err(|_| bad(format!("tensor `{name}` missing")))?;
    if view.shape() != expected {
        return Err(bad(format!("tensor `{name}` has shape {:?}, expected {expected:?}", view.shape())));
    }
    let bytes = view.data();
    Ok(match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        other => return Err(bad(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    })
}

fn read_conv(st: &SafeTensors<'_>, prefix: &str, cin: usize, cout: usize, k: usize, asset: &str) -> Result<Conv2d, LossError> {
    let w = read_values(st, &format!("{prefix}.weight"), &[cout, cin, k, k], asset)?;
    let b = read_values(st, &format!("{prefix}.bias"), &[cout], asset)?;
    Ok(Conv2d::from_weights(cin, cout, k, w, b)?)
}

/// VGG19 convolution plan: `(block, index-in-block, torchvision layer index, in, out)`.
fn vgg19_plan() -> Vec<(usize, usize, usize, usize, usize)> {
    let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
    let mut plan = Vec::new();
    let mut idx = 0;
    let mut cin = 3;
    for (b, &(n, width)) in blocks.iter().enumerate() {
        for i in 0..n {
            plan.push((b + 1, i + 1, idx, cin, width));
            cin = width;
            idx += 2; // conv, relu
        }
        idx += 1; // max pool
    }
    plan
}

/// ImageNet VGG19 tapped before the ReLU that follows convolution `tap`
/// (e.g. `"conv5_4"`). Grayscale input is replicated to three channels and
/// ImageNet-normalized.
pub fn vgg19_from_file(path: impl AsRef<Path>, tap: &str) -> Result<NetExtractor, LossError> {
    const ASSET: &str = "VGG19 weights";
    let plan = vgg19_plan();
    let stop = plan
        .iter()
        .position(|(b, i, ..)| format!("conv{b}_{i}") == tap)
        .ok_or_else(|| LossError::BadAsset {
            asset: ASSET.into(),
            reason: format!("unknown tap layer `{tap}`"),
        })?;
    let bytes = open_weights(path.as_ref(), ASSET)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| LossError::BadAsset {
        asset: ASSET.into(),
        reason: e.to_string(),
    })?;
    let mut layers = vec![
        Layer::Replicate(3),
        Layer::ChannelAffine {
            scale: IMAGENET_STD.iter().map(|s| 1.0 / s).collect(),
            shift: IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect(),
        },
    ];
    let mut block = 1;
    for (k, &(b, _, idx, cin, cout)) in plan[..=stop].iter().enumerate() {
        if b != block {
            layers.push(Layer::MaxPool2);
            block = b;
        }
        if k > 0 {
            // ReLU of the previous conv precedes either this conv or the pool.
            let pos = if matches!(layers.last(), Some(Layer::MaxPool2)) { layers.len() - 1 } else { layers.len() };
            layers.insert(pos, Layer::Relu);
        }
        layers.push(Layer::Conv(read_conv(&st, &format!("features.{idx}"), cin, cout, 3, ASSET)?));
    }
    Ok(NetExtractor::new(format!("vgg19/{tap}"), FrozenNet::new(layers)))
}

/// HED side-output 1: `conv1_1 → ReLU → conv1_2 → ReLU → score_dsn1 → sigmoid`,
/// with Caffe-style BGR mean subtraction on a 0–255 scale.
pub fn hed_side1_from_file(path: impl AsRef<Path>) -> Result<NetEdgeNetwork, LossError> {
    const ASSET: &str = "HED weights";
    let bytes = open_weights(path.as_ref(), ASSET)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| LossError::BadAsset {
        asset: ASSET.into(),
        reason: e.to_string(),
    })?;
    let layers = vec![
        Layer::Replicate(3),
        Layer::Permute(vec![2, 1, 0]),
        Layer::ChannelAffine {
            scale: vec![255.0; 3],
            shift: HED_MEAN_BGR.iter().map(|m| -m).collect(),
        },
        Layer::Conv(read_conv(&st, "conv1_1", 3, 64, 3, ASSET)?),
        Layer::Relu,
        Layer::Conv(read_conv(&st, "conv1_2", 64, 64, 3, ASSET)?),
        Layer::Relu,
        Layer::Conv(read_conv(&st, "score_dsn1", 64, 1, 1, ASSET)?),
        Layer::Sigmoid,
    ];
    Ok(NetEdgeNetwork::new(1, FrozenNet::new(layers)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use safetensors::tensor::TensorView;
    use std::collections::HashMap;

    #[test]
    fn vgg_plan_matches_torchvision_indices() {
        let plan = vgg19_plan();
        assert_eq!(plan.len(), 16);
        let idx: Vec<usize> = plan.iter().map(|p| p.2).collect();
        assert_eq!(idx, vec![0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34]);
    }

    #[test]
    fn missing_weight_file_names_the_asset() {
        let err = vgg19_from_file("/nonexistent/vgg19.safetensors", VGG19_DEFAULT_TAP).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("VGG19 weights") && msg.contains("/nonexistent/vgg19.safetensors"), "{msg}");
        let err = hed_side1_from_file("/nonexistent/hed.safetensors").unwrap_err();
        assert!(matches!(err, LossError::MissingAsset { .. }));
    }

    fn write_safetensors(path: &Path, tensors: &[(&str, Vec<usize>)], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let bytes = (0..n)
                    .flat_map(|_| rng.gen_range(-0.05f32..0.05).to_le_bytes())
                    .collect();
                (name.to_string(), shape.clone(), bytes)
            })
            .collect();
        let views: HashMap<String, TensorView<'_>> = data
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        safetensors::serialize_to_file(&views, None, path).unwrap();
    }

    #[test]
    fn loads_vgg_prefix_and_taps_pre_activation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        write_safetensors(
            &path,
            &[
                ("features.0.weight", vec![64, 3, 3, 3]),
                ("features.0.bias", vec![64]),
                ("features.2.weight", vec![64, 64, 3, 3]),
                ("features.2.bias", vec![64]),
                ("features.5.weight", vec![128, 64, 3, 3]),
                ("features.5.bias", vec![128]),
            ],
            1,
        );
        let fx = vgg19_from_file(&path, "conv2_1").unwrap();
        let kinds: Vec<&str> = fx
            .net()
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(_) => "conv",
                Layer::Relu => "relu",
                Layer::MaxPool2 => "pool",
                Layer::Replicate(_) => "rep",
                Layer::ChannelAffine { .. } => "norm",
                _ => "other",
            })
            .collect();
        assert_eq!(kinds, ["rep", "norm", "conv", "relu", "conv", "relu", "pool", "conv"]);
        let f = fx.features(&Tensor::zeros(1, 1, 8, 8)).unwrap();
        assert_eq!(f.shape(), [1, 128, 4, 4]);
        // Pre-activation: negative responses survive.
        let neg = fx.features(&Tensor::from_vec([1, 1, 8, 8], (0..64).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap())
            .unwrap();
        assert!(neg.data().iter().any(|v| *v < 0.0));
        assert!(matches!(vgg19_from_file(&path, "conv5_4"), Err(LossError::BadAsset { .. })));
    }

    #[test]
    fn loads_hed_side_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hed.safetensors");
        write_safetensors(
            &path,
            &[
                ("conv1_1.weight", vec![64, 3, 3, 3]),
                ("conv1_1.bias", vec![64]),
                ("conv1_2.weight", vec![64, 64, 3, 3]),
                ("conv1_2.bias", vec![64]),
                ("score_dsn1.weight", vec![1, 64, 1, 1]),
                ("score_dsn1.bias", vec![1]),
            ],
            2,
        );
        let en = hed_side1_from_file(&path).unwrap();
        assert_eq!(en.side_output(), 1);
        let e = en.edge_map(&Tensor::zeros(2, 1, 6, 5)).unwrap();
        assert_eq!(e.shape(), [2, 1, 6, 5]);
        assert!(e.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn sobel_vjp_matches_finite_differences() {
        let en = SobelEdgeNetwork::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec([1, 2, 5, 6], (0..60).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let probe = Tensor::from_vec([1, 1, 5, 6], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = en.edge_map_vjp(&x, &probe).unwrap();
        let f = |x: &Tensor| -> f64 {
            en.edge_map(x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for idx in 0..60 {
            let mut p = x.clone();
            p.data_mut()[idx] += eps;
            let mut m = x.clone();
            m.data_mut()[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((fd - g.data()[idx]).abs() < 1e-6, "{idx}: {fd} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn sobel_flags_text_strokes_not_flat_background() {
        let en = SobelEdgeNetwork::default();
        let mut data = vec![1.0; 64];
        for y in 2..6 {
            data[y * 8 + 4] = 0.0;
        }
        let e = en.edge_map(&Tensor::from_vec([1, 1, 8, 8], data).unwrap()).unwrap();
        assert!(e.at(0, 0, 3, 3) > 0.9);
        assert!(e.at(0, 0, 0, 0) < 0.1);
    }
}
