use super::param::{join, Param, ParamKind, Parameterized};
use super::NnError;
use crate::tensor::Tensor;

/// Logits are clamped to this magnitude so the sigmoid never rounds to 0 or 1.
pub const SIGMOID_LOGIT_LIMIT: f64 = 30.0;

/// Parametric ReLU with one learnable negative slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    channels: usize,
    pub slope: Param,
}

impl PRelu {
    pub const INITIAL_SLOPE: f64 = 0.25;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            slope: Param::filled(&[channels], Self::INITIAL_SLOPE, ParamKind::Learnable),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.channels() != self.channels {
            return Err(NnError::ChannelMismatch {
                layer: "prelu",
                expected: self.channels,
                got: x.channels(),
            });
        }
        let mut y = x.clone();
        for i in 0..x.batch() {
            for c in 0..self.channels {
                let a = self.slope.value[c];
                for v in y.plane_mut(i, c) {
                    if *v < 0.0 {
                        *v *= a;
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let mut grad_in = grad_out.clone();
        let learn = self.slope.wants_grad();
        for i in 0..x.batch() {
            for c in 0..self.channels {
                let a = self.slope.value[c];
                let mut da = 0.0;
                for (g, xv) in grad_in.plane_mut(i, c).iter_mut().zip(x.plane(i, c)) {
                    if *xv < 0.0 {
                        da += *g * xv;
                        *g *= a;
                    }
                }
                if learn {
                    self.slope.grad[c] += da;
                }
            }
        }
        grad_in
    }
}

impl Parameterized for PRelu {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "slope"), &self.slope);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "slope"), &mut self.slope);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, xv) in g.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *d = 0.0;
        }
    }
    g
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_LOGIT_LIMIT, SIGMOID_LOGIT_LIMIT);
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    y
}

/// Backward from the sigmoid *output* `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, yv) in g.data_mut().iter_mut().zip(y.data()) {
        *d *= yv * (1.0 - yv);
    }
    g
}
