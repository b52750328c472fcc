use rand::Rng;

/// Learnable weights versus running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    /// Updated by forward passes in training mode, never by the optimizer.
    Buffer,
}

/// A named-by-position array of reals with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f64>, kind: ParamKind) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape: shape.to_vec(),
            value,
            grad,
            kind,
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: f64, kind: ParamKind) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n], kind)
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(shape, value, ParamKind::Learnable)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// True when the optimizer may update this array.
    pub fn wants_grad(&self) -> bool {
        self.trainable && self.kind == ParamKind::Learnable
    }
}

/// Walks every parameter and buffer of a module under a dotted name.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
