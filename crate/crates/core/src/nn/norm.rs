use super::param::{join, Param, ParamKind, Parameterized};
use super::{Mode, NnError};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `N×H×W`.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates (unbiased variance, momentum 0.1). Evaluation mode uses the
/// running estimates. Running statistics start at mean 0, variance 1.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

/// Saved forward state for [`BatchNorm2d::backward`].
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: Mode,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(&[channels], 1.0, ParamKind::Learnable),
            beta: Param::filled(&[channels], 0.0, ParamKind::Learnable),
            running_mean: Param::filled(&[channels], 0.0, ParamKind::Buffer),
            running_var: Param::filled(&[channels], 1.0, ParamKind::Buffer),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn frozen(&self) -> bool {
        !self.gamma.trainable
    }

    fn check(&self, x: &Tensor) -> Result<(), NnError> {
        if x.channels() != self.channels {
            return Err(NnError::ChannelMismatch {
                layer: "batchnorm",
                expected: self.channels,
                got: x.channels(),
            });
        }
        Ok(())
    }

    /// Inference-mode forward; no state is touched.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check(x)?;
        let mut y = x.clone();
        for i in 0..x.batch() {
            for c in 0..self.channels {
                let inv = 1.0 / (self.running_var.value[c] + BN_EPS).sqrt();
                let (m, g, b) = (self.running_mean.value[c], self.gamma.value[c], self.beta.value[c]);
                for v in y.plane_mut(i, c) {
                    *v = g * (*v - m) * inv + b;
                }
            }
        }
        Ok(y)
    }

    /// Forward that keeps what backward needs. In training mode the running
    /// statistics are updated unless the layer is frozen.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache), NnError> {
        self.check(x)?;
        let n = x.batch();
        let count = (n * x.plane_len()) as f64;
        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; self.channels];
        for c in 0..self.channels {
            let (mean, inv) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for i in 0..n {
                        sum += x.plane(i, c).iter().sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += x.plane(i, c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / count;
                    if !self.frozen() {
                        let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                        let rm = &mut self.running_mean.value[c];
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
                        let rv = &mut self.running_var.value[c];
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
                    }
                    (mean, 1.0 / (var + BN_EPS).sqrt())
                }
                Mode::Eval => (
                    self.running_mean.value[c],
                    1.0 / (self.running_var.value[c] + BN_EPS).sqrt(),
                ),
            };
            inv_std[c] = inv;
            for i in 0..n {
                for v in xhat.plane_mut(i, c) {
                    *v = (*v - mean) * inv;
                }
            }
        }
        let mut y = xhat.clone();
        for i in 0..n {
            for c in 0..self.channels {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for v in y.plane_mut(i, c) {
                    *v = g * *v + b;
                }
            }
        }
        Ok((y, BnCache { mode, xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Tensor) -> Tensor {
        let n = grad_out.batch();
        let count = (n * grad_out.plane_len()) as f64;
        let mut grad_in = grad_out.clone();
        for c in 0..self.channels {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                for (dy, xh) in grad_out.plane(i, c).iter().zip(cache.xhat.plane(i, c)) {
                    sum_dy += dy;
                    sum_dy_xhat += dy * xh;
                }
            }
            if self.gamma.wants_grad() {
                self.gamma.grad[c] += sum_dy_xhat;
            }
            if self.beta.wants_grad() {
                self.beta.grad[c] += sum_dy;
            }
            let g = self.gamma.value[c];
            let inv = cache.inv_std[c];
            for i in 0..n {
                let xh = cache.xhat.plane(i, c);
                let dx = grad_in.plane_mut(i, c);
                match cache.mode {
                    Mode::Train => {
                        let mean_dy = sum_dy / count;
                        let mean_dy_xhat = sum_dy_xhat / count;
                        for (d, x) in dx.iter_mut().zip(xh) {
                            *d = g * inv * (*d - mean_dy - x * mean_dy_xhat);
                        }
                    }
                    Mode::Eval => {
                        for d in dx.iter_mut() {
                            *d *= g * inv;
                        }
                    }
                }
            }
        }
        grad_in
    }
}

impl Parameterized for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
