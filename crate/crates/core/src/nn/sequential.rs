use super::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use super::conv::Conv2d;
use super::pool::{max_pool2, max_pool2_backward};
use super::NnError;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool2,
    Sigmoid,
    /// `y[c] = x[c]·scale[c] + shift[c]`
    ChannelAffine { scale: Vec<f64>, shift: Vec<f64> },
    /// Repeats a single-channel input to `n` channels; `n`-channel input passes through.
    Replicate(usize),
    /// Output channel `i` is input channel `perm[i]`.
    Permute(Vec<usize>),
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Ok(match self {
            Layer::Conv(c) => c.forward(x)?,
            Layer::Relu => relu(x),
            Layer::MaxPool2 => max_pool2(x),
            Layer::Sigmoid => sigmoid(x),
            Layer::ChannelAffine { scale, shift } => {
                check_channels("affine", scale.len(), x)?;
                let mut y = x.clone();
                for i in 0..x.batch() {
                    for c in 0..x.channels() {
                        for v in y.plane_mut(i, c) {
                            *v = *v * scale[c] + shift[c];
                        }
                    }
                }
                y
            }
            Layer::Replicate(n) => {
                if x.channels() == *n {
                    x.clone()
                } else {
                    check_channels("replicate", 1, x)?;
                    let mut y = Tensor::zeros(x.batch(), *n, x.height(), x.width());
                    for i in 0..x.batch() {
                        for c in 0..*n {
                            y.plane_mut(i, c).copy_from_slice(x.plane(i, 0));
                        }
                    }
                    y
                }
            }
            Layer::Permute(perm) => {
                check_channels("permute", perm.len(), x)?;
                let mut y = x.clone();
                for i in 0..x.batch() {
                    for (c, &src) in perm.iter().enumerate() {
                        y.plane_mut(i, c).copy_from_slice(x.plane(i, src));
                    }
                }
                y
            }
        })
    }

    fn backward(&self, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
        match self {
            Layer::Conv(c) => c.input_grad(g),
            Layer::Relu => relu_backward(x, g),
            Layer::MaxPool2 => max_pool2_backward(x, g),
            Layer::Sigmoid => sigmoid_backward(y, g),
            Layer::ChannelAffine { scale, .. } => {
                let mut d = g.clone();
                for i in 0..g.batch() {
                    for c in 0..g.channels() {
                        d.plane_mut(i, c).iter_mut().for_each(|v| *v *= scale[c]);
                    }
                }
                d
            }
            Layer::Replicate(n) => {
                if x.channels() == *n {
                    g.clone()
                } else {
                    let mut d = Tensor::zeros(x.batch(), 1, x.height(), x.width());
                    for i in 0..g.batch() {
                        for c in 0..*n {
                            for (a, b) in d.plane_mut(i, 0).iter_mut().zip(g.plane(i, c)) {
                                *a += b;
                            }
                        }
                    }
                    d
                }
            }
            Layer::Permute(perm) => {
                let mut d = Tensor::zeros(x.batch(), x.channels(), x.height(), x.width());
                for i in 0..g.batch() {
                    for (c, &src) in perm.iter().enumerate() {
                        for (a, b) in d.plane_mut(i, src).iter_mut().zip(g.plane(i, c)) {
                            *a += b;
                        }
                    }
                }
                d
            }
        }
    }
}

fn check_channels(layer: &'static str, expected: usize, x: &Tensor) -> Result<(), NnError> {
    if x.channels() != expected {
        return Err(NnError::ChannelMismatch {
            layer,
            expected,
            got: x.channels(),
        });
    }
    Ok(())
}

/// A fixed (non-trainable) feed-forward network that can back-propagate to
/// its input. Used for the loss networks.
#[derive(Debug, Clone, Default)]
pub struct FrozenNet {
    layers: Vec<Layer>,
}

impl FrozenNet {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Vector-Jacobian product: gradient at the input given `grad_out` at the output.
    pub fn vjp(&self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        let out = acts.last().expect("non-empty");
        if out.shape() != grad_out.shape() {
            return Err(NnError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                left: out.shape().to_vec(),
                right: grad_out.shape().to_vec(),
            }));
        }
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&acts[i], &acts[i + 1], &g);
        }
        Ok(g)
    }
}
