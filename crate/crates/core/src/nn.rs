//! Parameter storage, basic layers and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::conv::conv2d;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Wraps every tensor as a graph leaf (`trainable`) or constant.
    pub fn bind(&self, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    Var::leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces the values, checking names and shapes.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (a, b) in self.values.iter().zip(&values) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} != {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.all_finite())
    }
}

/// Parameters of one forward pass, as graph variables.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally built variables, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, i: usize) -> &Var {
        &self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    w: usize,
    b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-uniform initialized `k x k` convolution with bias.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        rng: &mut ChaCha8Rng,
        (cin, cout): (usize, usize),
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = ps.push(
            format!("{name}.w"),
            uniform(rng, &[cout, cin, k, k], (6.0 / fan_in).sqrt()),
        );
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let y = conv2d(x, p.get(self.w), self.stride, self.pad);
        ops::add_channel_bias(&y, p.get(self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        rng: &mut ChaCha8Rng,
        (nin, nout): (usize, usize),
    ) -> Self {
        let w = ps.push(
            format!("{name}.w"),
            uniform(rng, &[nin, nout], (6.0 / nin as f64).sqrt()),
        );
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[nout]));
        Self { w, b }
    }

    /// A layer with zero weights and the given bias.
    pub fn with_bias(ps: &mut ParamSet, name: &str, nin: usize, bias: Tensor) -> Self {
        let nout = bias.len();
        let w = ps.push(format!("{name}.w"), Tensor::zeros(&[nin, nout]));
        let b = ps.push(format!("{name}.b"), bias);
        Self { w, b }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let y = ops::matmul(x, p.get(self.w));
        let b = p.get(self.b);
        let b = ops::broadcast_to(&ops::reshape(b, &[1, b.shape()[0]]), y.shape());
        ops::add(&y, &b)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: ps
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            v: ps
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), ps.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let p = ps.values_mut()[k].data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_tensors;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&ps, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let b = ps.bind(true);
            let loss = ops::sum(&ops::square(b.get(0)));
            let g = grad_tensors(&loss, b.vars());
            opt.step(&mut ps, &g);
        }
        assert!(ps.values()[0].max_abs() < 1e-2);
    }

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let l = Linear::new(&mut ps, "fc", &mut rng, (3, 5));
        let b = ps.bind(false);
        let y = l.forward(&b, &Var::constant(Tensor::ones(&[4, 3])));
        assert_eq!(y.shape(), &[4, 5]);
        assert!(!y.requires_grad());
    }
}
