//! Stride-1 2-D convolution with "same" zero padding, via chunked im2col.

use rand::Rng;

use super::param::{join, Param, ParamKind, Parameterized};
use super::NnError;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer size, in elements.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
}

impl Conv2d {
    /// Zero-initialized convolution. `kernel` must be odd.
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "convolution kernel must be odd");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::filled(
                &[out_channels, in_channels, kernel, kernel],
                0.0,
                ParamKind::Learnable,
            ),
            bias: Param::filled(&[out_channels], 0.0, ParamKind::Learnable),
        }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// both weight and bias.
    pub fn uniform(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        conv.weight = Param::uniform(&conv.weight.shape.clone(), bound, rng);
        conv.bias = Param::uniform(&[out_channels], bound, rng);
        conv
    }

    pub fn from_weights(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, NnError> {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        if weight.len() != conv.weight.len() || bias.len() != out_channels {
            return Err(NnError::WeightShape {
                layer: "conv2d".into(),
                expected: conv.weight.len() + out_channels,
                got: weight.len() + bias.len(),
            });
        }
        conv.weight.value = weight;
        conv.bias.value = bias;
        Ok(conv)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.channels() != self.in_channels {
            return Err(NnError::ChannelMismatch {
                layer: "conv2d",
                expected: self.in_channels,
                got: x.channels(),
            });
        }
        Ok(())
    }

    fn rows_per_chunk(&self, width: usize, height: usize) -> usize {
        let k = self.in_channels * self.kernel * self.kernel;
        (COL_BUDGET / (k * width).max(1)).clamp(1, height.max(1))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(n, self.out_channels, h, w);
        let rows = self.rows_per_chunk(w, h);
        let mut cols = vec![0.0; kk * rows * w];
        for i in 0..n {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            let mut y0 = 0;
            while y0 < h {
                let y1 = (y0 + rows).min(h);
                let cw = (y1 - y0) * w;
                im2col(src, self.in_channels, h, w, self.kernel, y0, y1, &mut cols[..kk * cw]);
                // SAFETY: all pointers address live buffers of the stated extents.
                unsafe {
                    matrixmultiply::dgemm(
                        self.out_channels,
                        kk,
                        cw,
                        1.0,
                        self.weight.value.as_ptr(),
                        kk as isize,
                        1,
                        cols.as_ptr(),
                        cw as isize,
                        1,
                        0.0,
                        dst.as_mut_ptr().add(y0 * w),
                        hw as isize,
                        1,
                    );
                }
                y0 = y1;
            }
            for (co, b) in self.bias.value.iter().enumerate() {
                for v in &mut dst[co * hw..(co + 1) * hw] {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the input. Does not touch parameter gradients.
    pub fn input_grad(&self, grad_out: &Tensor) -> Tensor {
        let [n, _, h, w] = grad_out.shape();
        let hw = h * w;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut grad_in = Tensor::zeros(n, self.in_channels, h, w);
        let rows = self.rows_per_chunk(w, h);
        let mut cols = vec![0.0; kk * rows * w];
        for i in 0..n {
            let g = grad_out.sample(i);
            let dst = grad_in.sample_mut(i);
            let mut y0 = 0;
            while y0 < h {
                let y1 = (y0 + rows).min(h);
                let cw = (y1 - y0) * w;
                // cols = W^T · g_chunk
                unsafe {
                    matrixmultiply::dgemm(
                        kk,
                        self.out_channels,
                        cw,
                        1.0,
                        self.weight.value.as_ptr(),
                        1,
                        kk as isize,
                        g.as_ptr().add(y0 * w),
                        hw as isize,
                        1,
                        0.0,
                        cols.as_mut_ptr(),
                        cw as isize,
                        1,
                    );
                }
                col2im(&cols[..kk * cw], self.in_channels, h, w, self.kernel, y0, y1, dst);
                y0 = y1;
            }
        }
        grad_in
    }

    /// Accumulates weight and bias gradients for input `x` and upstream
    /// gradient `grad_out`. No-op when the layer is frozen.
    pub fn accumulate_param_grads(&mut self, x: &Tensor, grad_out: &Tensor) {
        if !self.weight.wants_grad() && !self.bias.wants_grad() {
            return;
        }
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let kk = self.in_channels * self.kernel * self.kernel;
        let rows = self.rows_per_chunk(w, h);
        let mut cols = vec![0.0; kk * rows * w];
        for i in 0..n {
            let src = x.sample(i);
            let g = grad_out.sample(i);
            if self.weight.wants_grad() {
                let mut y0 = 0;
                while y0 < h {
                    let y1 = (y0 + rows).min(h);
                    let cw = (y1 - y0) * w;
                    im2col(src, self.in_channels, h, w, self.kernel, y0, y1, &mut cols[..kk * cw]);
                    // dW += g_chunk · cols^T
                    unsafe {
                        matrixmultiply::dgemm(
                            self.out_channels,
                            cw,
                            kk,
                            1.0,
                            g.as_ptr().add(y0 * w),
                            hw as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            cw as isize,
                            1.0,
                            self.weight.grad.as_mut_ptr(),
                            kk as isize,
                            1,
                        );
                    }
                    y0 = y1;
                }
            }
            if self.bias.wants_grad() {
                for co in 0..self.out_channels {
                    self.bias.grad[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                }
            }
        }
    }

    /// Parameter gradients (when trainable) plus, optionally, the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, need_input: bool) -> Option<Tensor> {
        self.accumulate_param_grads(x, grad_out);
        need_input.then(|| self.input_grad(grad_out))
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Unfolds rows `y0..y1` of a `C×H×W` plane stack into a
/// `(C·k·k) × ((y1-y0)·W)` matrix, zero outside the image.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    y0: usize,
    y1: usize,
    cols: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let cw = (y1 - y0) * w;
    let mut row = 0;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let out = &mut cols[row * cw..(row + 1) * cw];
                let dx = kx as isize - pad;
                // valid output x such that 0 <= x + dx < w
                let xs = (-dx).max(0) as usize;
                let xe = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for (r, y) in (y0..y1).enumerate() {
                    let line = &mut out[r * w..(r + 1) * w];
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || xs >= xe {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    line[..xs].iter_mut().for_each(|v| *v = 0.0);
                    line[xe..].iter_mut().for_each(|v| *v = 0.0);
                    let s0 = (xs as isize + dx) as usize;
                    line[xs..xe].copy_from_slice(&srow[s0..s0 + (xe - xs)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds the column matrix back into planes.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    y0: usize,
    y1: usize,
    dst: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let cw = (y1 - y0) * w;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let col = &cols[row * cw..(row + 1) * cw];
                let dx = kx as isize - pad;
                let xs = (-dx).max(0) as usize;
                let xe = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for (r, y) in (y0..y1).enumerate() {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || xs >= xe {
                        continue;
                    }
                    let line = &col[r * w..(r + 1) * w];
                    let s0 = (xs as isize + dx) as usize;
                    let drow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (xe - xs)];
                    for (d, v) in drow.iter_mut().zip(&line[xs..xe]) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}
