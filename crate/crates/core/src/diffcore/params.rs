//! Named parameter storage, initialization and SGD with momentum.

use rand::Rng;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named trainable tensors. Layers refer to entries by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Leaves on `tape`, one per entry.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Constants on `tape`: used when these parameters stay frozen.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Replaces all values from `other`, which must have the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter names differ".into()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            a.expect_same_shape(b, "load_from")?;
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Gradients of `bound` (from [`ParamStore::bind`]), zeros where unreached.
pub fn collect_grads(grads: &Gradients, bound: &[Var<'_>]) -> Vec<Tensor> {
    bound.iter().map(|v| grads.wrt_or_zeros(*v)).collect()
}

/// Uniform in `±√(6 / (fan_in + fan_out))`, shaped `fan_in × fan_out`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches data")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: store.tensors.iter().map(|t| Tensor::zeros(t.shape()).expect("valid shape")).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Replaces the momentum buffers, e.g. when resuming from a checkpoint.
    pub fn load_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_load_velocity",
                lhs: vec![self.velocity.len()],
                rhs: vec![velocity.len()],
            });
        }
        for (old, new) in self.velocity.iter().zip(&velocity) {
            old.expect_same_shape(new, "sgd_load_velocity")?;
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", store.names[i])));
        }
        for ((p, v), g) in store.tensors.iter_mut().zip(&mut self.velocity).zip(grads) {
            p.expect_same_shape(g, "sgd_step")?;
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// `x · w + b` with `w` stored `in × out`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add_row(b)
}
