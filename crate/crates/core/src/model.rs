//! The detail-preserving 2× generator.
//!
//! ```text
//! input ─ conv(k_head) ─ PReLU ─┬─ [residual block] × N ─ conv ─ BN ─(+)─ conv ─ shuffle ─ PReLU ─ conv(k_tail) ─ sigmoid
//!                               └──────────────── skip ─────────────┘
//! ```
//!
//! Each residual block is `x + BN(conv(PReLU(BN(conv(x)))))` with 3×3 convolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::activation::{sigmoid, sigmoid_backward};
use crate::nn::param::join;
use crate::nn::{
    pixel_shuffle, pixel_unshuffle, BatchNorm2d, BnCache, Conv2d, Mode, NnError, PRelu, Param,
    ParamKind, Parameterized,
};
use crate::tensor::{ImageTensor, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("image has {got} channels but the network expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("image must be at least 1×1, got {0}×{1}")]
    EmptyImage(usize, usize),
    #[error("parameter `{0}` missing from stored weights")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architectural hyperparameters of one 2× network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpNetConfig {
    pub residual_blocks: usize,
    pub feature_channels: usize,
    pub head_kernel: usize,
    pub trunk_kernel: usize,
    pub tail_kernel: usize,
    pub image_channels: usize,
    pub upsample_factor: usize,
}

impl Default for DpNetConfig {
    fn default() -> Self {
        Self {
            residual_blocks: 5,
            feature_channels: 64,
            head_kernel: 9,
            trunk_kernel: 3,
            tail_kernel: 9,
            image_channels: 1,
            upsample_factor: 2,
        }
    }
}

impl DpNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.residual_blocks < 1 {
            return bad(format!("residual_blocks must be >= 1, got {}", self.residual_blocks));
        }
        if self.feature_channels < 1 {
            return bad("feature_channels must be >= 1".into());
        }
        if self.image_channels < 1 {
            return bad("image_channels must be >= 1".into());
        }
        for (name, k) in [
            ("head_kernel", self.head_kernel),
            ("trunk_kernel", self.trunk_kernel),
            ("tail_kernel", self.tail_kernel),
        ] {
            if k == 0 || k % 2 == 0 {
                return bad(format!("{name} must be a positive odd size, got {k}"));
            }
        }
        if self.upsample_factor != 2 {
            return bad(format!(
                "upsample_factor must be 2, got {}",
                self.upsample_factor
            ));
        }
        Ok(())
    }

    /// Number of learnable scalars implied by the layer list.
    pub fn parameter_count(&self) -> usize {
        let (c, f) = (self.image_channels, self.feature_channels);
        let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
        let bn = |ch: usize| 2 * ch;
        let head = conv(c, f, self.head_kernel) + f;
        let block = 2 * conv(f, f, self.trunk_kernel) + 2 * bn(f) + f;
        let fuse = conv(f, f, self.trunk_kernel) + bn(f);
        let up = conv(f, 4 * f, self.trunk_kernel) + f;
        let tail = conv(f, c, self.tail_kernel);
        head + self.residual_blocks * block + fuse + up + tail
    }
}

/// `x + BN(conv(PReLU(BN(conv(x)))))`
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub act: PRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    x: Tensor,
    bn1: BnCache,
    pre_act: Tensor,
    post_act: Tensor,
    bn2: BnCache,
}

impl ResidualBlock {
    fn new(channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::uniform(channels, channels, kernel, rng),
            bn1: BatchNorm2d::new(channels),
            act: PRelu::new(channels),
            conv2: Conv2d::uniform(channels, channels, kernel, rng),
            bn2: BatchNorm2d::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }

    /// Inference-mode forward (running batch-norm statistics).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let h = self.conv1.forward(x)?;
        let h = self.bn1.forward_eval(&h)?;
        let h = self.act.forward(&h)?;
        let h = self.conv2.forward(&h)?;
        let mut h = self.bn2.forward_eval(&h)?;
        h.add_assign(x);
        Ok(h)
    }

    pub fn forward_traced(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockTrace), ModelError> {
        let c1 = self.conv1.forward(x)?;
        let (pre_act, bn1) = self.bn1.forward(&c1, mode)?;
        let post_act = self.act.forward(&pre_act)?;
        let c2 = self.conv2.forward(&post_act)?;
        let (mut out, bn2) = self.bn2.forward(&c2, mode)?;
        out.add_assign(x);
        Ok((
            out,
            BlockTrace {
                x: x.clone(),
                bn1,
                pre_act,
                post_act,
                bn2,
            },
        ))
    }

    pub fn backward(&mut self, trace: &BlockTrace, grad_out: &Tensor) -> Tensor {
        let g = self.bn2.backward(&trace.bn2, grad_out);
        let g = self.conv2.backward(&trace.post_act, &g, true).expect("input grad");
        let g = self.act.backward(&trace.pre_act, &g);
        let g = self.bn1.backward(&trace.bn1, &g);
        let mut g = self.conv1.backward(&trace.x, &g, true).expect("input grad");
        g.add_assign(grad_out);
        g
    }
}

impl Parameterized for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.act.visit(&join(prefix, "act"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.act.visit_mut(&join(prefix, "act"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

/// One detail-preserving network: maps `C×H×W` to `C×2H×2W`.
#[derive(Debug, Clone)]
pub struct DpNet {
    config: DpNetConfig,
    pub head: Conv2d,
    pub head_act: PRelu,
    pub blocks: Vec<ResidualBlock>,
    pub fuse_conv: Conv2d,
    pub fuse_bn: BatchNorm2d,
    pub up_conv: Conv2d,
    pub up_act: PRelu,
    pub tail: Conv2d,
}

/// Everything [`DpNet::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct DpNetTrace {
    input: Tensor,
    head_pre: Tensor,
    blocks: Vec<BlockTrace>,
    trunk_out: Tensor,
    fuse_bn: BnCache,
    fused: Tensor,
    shuffled: Tensor,
    up_out: Tensor,
    output: Tensor,
}

impl DpNetTrace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl DpNet {
    /// Deterministic initialization from `seed`. All flags start trainable and
    /// batch-norm statistics at mean 0, variance 1.
    pub fn new(config: DpNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (config.image_channels, config.feature_channels);
        let head = Conv2d::uniform(c, f, config.head_kernel, &mut rng);
        let blocks = (0..config.residual_blocks)
            .map(|_| ResidualBlock::new(f, config.trunk_kernel, &mut rng))
            .collect();
        let fuse_conv = Conv2d::uniform(f, f, config.trunk_kernel, &mut rng);
        let up_conv = Conv2d::uniform(f, 4 * f, config.trunk_kernel, &mut rng);
        let tail = Conv2d::uniform(f, c, config.tail_kernel, &mut rng);
        Ok(Self {
            config,
            head,
            head_act: PRelu::new(f),
            blocks,
            fuse_conv,
            fuse_bn: BatchNorm2d::new(f),
            up_conv,
            up_act: PRelu::new(f),
            tail,
        })
    }

    pub fn config(&self) -> &DpNetConfig {
        &self.config
    }

    pub fn image_channels(&self) -> usize {
        self.config.image_channels
    }

    /// Learnable scalar count, excluding batch-norm running statistics.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.kind == ParamKind::Learnable {
                n += p.len();
            }
        });
        n
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.channels() != self.config.image_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.config.image_channels,
                got: x.channels(),
            });
        }
        if x.height() == 0 || x.width() == 0 {
            return Err(ModelError::EmptyImage(x.height(), x.width()));
        }
        Ok(())
    }

    /// Inference on one image; every output value lies strictly in (0, 1).
    pub fn forward(&self, img: &ImageTensor) -> Result<ImageTensor, ModelError> {
        Ok(self.forward_batch(&img.to_batch())?.image(0))
    }

    /// Inference on a batch, using running batch-norm statistics.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let head = self.head_act.forward(&self.head.forward(x)?)?;
        let mut h = head.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let mut fused = self.fuse_bn.forward_eval(&self.fuse_conv.forward(&h)?)?;
        fused.add_assign(&head);
        let up = pixel_shuffle(&self.up_conv.forward(&fused)?)?;
        let up = self.up_act.forward(&up)?;
        Ok(sigmoid(&self.tail.forward(&up)?))
    }

    /// Forward pass that records activations for [`DpNet::backward`]. In
    /// [`Mode::Train`] unfrozen batch-norm layers update running statistics.
    pub fn forward_traced(&mut self, x: &Tensor, mode: Mode) -> Result<DpNetTrace, ModelError> {
        self.check_input(x)?;
        let head_pre = self.head.forward(x)?;
        let head_out = self.head_act.forward(&head_pre)?;
        let mut h = head_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, trace) = block.forward_traced(&h, mode)?;
            blocks.push(trace);
            h = next;
        }
        let fuse_pre = self.fuse_conv.forward(&h)?;
        let (mut fused, fuse_bn) = self.fuse_bn.forward(&fuse_pre, mode)?;
        fused.add_assign(&head_out);
        let shuffled = pixel_shuffle(&self.up_conv.forward(&fused)?)?;
        let up_out = self.up_act.forward(&shuffled)?;
        let output = sigmoid(&self.tail.forward(&up_out)?);
        Ok(DpNetTrace {
            input: x.clone(),
            head_pre,
            blocks,
            trunk_out: h,
            fuse_bn,
            fused,
            shuffled,
            up_out,
            output,
        })
    }

    /// Back-propagates `grad_out` (gradient at the sigmoid output). Parameter
    /// gradients accumulate only into trainable parameters. Returns the input
    /// gradient when `need_input` is set.
    pub fn backward(&mut self, trace: &DpNetTrace, grad_out: &Tensor, need_input: bool) -> Option<Tensor> {
        let g = sigmoid_backward(&trace.output, grad_out);
        let g = self.tail.backward(&trace.up_out, &g, true).expect("input grad");
        let g = self.up_act.backward(&trace.shuffled, &g);
        let g = pixel_unshuffle(&g).expect("even spatial size after shuffle");
        let g_fused = self.up_conv.backward(&trace.fused, &g, true).expect("input grad");
        let g = self.fuse_bn.backward(&trace.fuse_bn, &g_fused);
        let mut g = self.fuse_conv.backward(&trace.trunk_out, &g, true).expect("input grad");
        for (block, bt) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            g = block.backward(bt, &g);
        }
        g.add_assign(&g_fused);
        let g = self.head_act.backward(&trace.head_pre, &g);
        self.head.backward(&trace.input, &g, need_input)
    }

    /// Sets every trainable flag. Frozen networks receive neither optimizer
    /// updates nor batch-norm statistic updates.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, p| p.trainable = !frozen);
    }

    pub fn is_frozen(&self) -> bool {
        let mut any_trainable = false;
        self.visit("", &mut |_, p| any_trainable |= p.trainable);
        !any_trainable
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// `(name, shape, values)` for every parameter and buffer, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.shape.clone(), p.value.clone())));
        out
    }

    /// Replaces every parameter and buffer by name. All names must be present
    /// with matching shapes; nothing is modified on error.
    pub fn load_named_tensors(
        &mut self,
        tensors: &std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<(), ModelError> {
        let mut err = None;
        self.visit("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match tensors.get(name) {
                None => err = Some(ModelError::MissingParameter(name.to_string())),
                Some((shape, values)) if shape != &p.shape || values.len() != p.len() => {
                    err = Some(ModelError::ParameterShape {
                        name: name.to_string(),
                        expected: p.shape.clone(),
                        got: shape.clone(),
                    })
                }
                Some(_) => {}
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.visit_mut("", &mut |name, p| {
            p.value.clone_from(&tensors[name].1);
        });
        Ok(())
    }

    /// Bitwise comparison of all parameters and buffers.
    pub fn same_parameters(&self, other: &DpNet) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.0 == y.0
                    && x.1 == y.1
                    && x.2.iter().zip(&y.2).all(|(u, v)| u.to_bits() == v.to_bits())
            })
    }
}

impl Parameterized for DpNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.head.visit(&join(prefix, "head"), f);
        self.head_act.visit(&join(prefix, "head_act"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.fuse_conv.visit(&join(prefix, "fuse_conv"), f);
        self.fuse_bn.visit(&join(prefix, "fuse_bn"), f);
        self.up_conv.visit(&join(prefix, "up_conv"), f);
        self.up_act.visit(&join(prefix, "up_act"), f);
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        self.head_act.visit_mut(&join(prefix, "head_act"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.fuse_conv.visit_mut(&join(prefix, "fuse_conv"), f);
        self.fuse_bn.visit_mut(&join(prefix, "fuse_bn"), f);
        self.up_conv.visit_mut(&join(prefix, "up_conv"), f);
        self.up_act.visit_mut(&join(prefix, "up_act"), f);
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}
