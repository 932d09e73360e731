use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Role of a parameter; only `Weight` tensors take L1/L2 penalties.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// Named parameter tensors of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialised convolution weight `[co, ci, k, k, k]`.
    pub fn add_conv_weight(
        &mut self,
        name: impl Into<String>,
        co: usize,
        ci: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let fan_in = (ci * k * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = co * ci * k * k * k;
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(
            name,
            Tensor::new(vec![co, ci, k, k, k], data).expect("shape"),
            ParamKind::Weight,
        )
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Overwrites values by name; every stored tensor must be supplied with
    /// a matching shape.
    pub fn assign(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in tensors {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Archive(format!("unexpected tensor {name}")))?;
            if self.values[i].shape() != t.shape() {
                return Err(Error::Archive(format!(
                    "tensor {name}: shape {:?} does not match model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Archive(format!("missing tensor {}", self.names[i])));
        }
        Ok(())
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f32], shape: &[usize]) {
        match &mut self.grads[id.0] {
            Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("grad shape")),
        }
    }

    /// Adds another gradient set (e.g. from the next sample of a batch).
    pub fn merge(&mut self, other: Gradients) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(t) => t.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn get_or_zero(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        self.grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
    }
}
