//! Adam over [`Parameterized`] modules.

use crate::nn::{Param, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates keyed by visit order. The module layout must not change
/// between steps.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Arrays for which
    /// [`Param::wants_grad`] is false are left untouched.
    pub fn step(&mut self, module: &mut dyn Parameterized, lr: f64) {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_mut("", &mut |_, p: &mut Param| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            if p.wants_grad() {
                let (m, v) = (&mut ms[idx], &mut vs[idx]);
                for (((w, g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = g + weight_decay * *w;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    struct Quad {
        p: Param,
        buf: Param,
    }

    impl Parameterized for Quad {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param)) {
            f("p", &self.p);
            f("buf", &self.buf);
        }

        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("p", &mut self.p);
            f("buf", &mut self.buf);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut q = Quad {
            p: Param::new(&[2], vec![1.0, -1.0], ParamKind::Learnable),
            buf: Param::new(&[1], vec![5.0], ParamKind::Buffer),
        };
        q.p.grad = vec![3.0, -0.5];
        q.buf.grad = vec![1.0];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut q, 0.1);
        assert!((q.p.value[0] - 0.9).abs() < 1e-6);
        assert!((q.p.value[1] + 0.9).abs() < 1e-6);
        assert_eq!(q.buf.value, vec![5.0]);
    }

    #[test]
    fn frozen_params_are_bit_invariant() {
        let mut q = Quad {
            p: Param::new(&[1], vec![0.123], ParamKind::Learnable),
            buf: Param::new(&[1], vec![0.0], ParamKind::Buffer),
        };
        q.p.trainable = false;
        q.p.grad = vec![1.0];
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            opt.step(&mut q, 1.0);
        }
        assert_eq!(q.p.value[0].to_bits(), 0.123f64.to_bits());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad {
            p: Param::new(&[1], vec![3.0], ParamKind::Learnable),
            buf: Param::new(&[1], vec![0.0], ParamKind::Buffer),
        };
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            q.p.grad[0] = 2.0 * (q.p.value[0] - 1.0);
            opt.step(&mut q, 0.01);
        }
        assert!((q.p.value[0] - 1.0).abs() < 1e-3);
    }
}
