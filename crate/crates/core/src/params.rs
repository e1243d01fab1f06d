//! Named trainable tensors with per-parameter optimizer state.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// RMSProp accumulators for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub square_avg: Vec<f64>,
    pub momentum: Vec<f64>,
}

impl OptimizerState {
    fn zeros(n: usize) -> Self {
        OptimizerState { square_avg: vec![0.0; n], momentum: vec![0.0; n] }
    }
}

/// Ordered table of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    state: Vec<OptimizerState>,
    index: HashMap<String, usize>,
}

/// Graph nodes created by [`ParamStore::bind`], one per entry.
pub struct Bindings {
    vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.by_name.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points `name` at another node, e.g. a probe input of a gradient check.
    /// [`ParamStore::gradients`] still reads the original leaves.
    pub fn rebind(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self.by_name.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        *slot = var;
        Ok(())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let mut tensor = tensor;
        tensor.requires_grad = true;
        self.index.insert(name.clone(), self.entries.len());
        self.state.push(OptimizerState::zeros(tensor.len()));
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for ((name, t), st) in other.entries.into_iter().zip(other.state) {
            self.insert(name.clone(), t)?;
            *self.state.last_mut().expect("just inserted") = st;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn state(&self, name: &str) -> Option<&OptimizerState> {
        self.index.get(name).map(|&i| &self.state[i])
    }

    pub fn state_mut(&mut self, name: &str) -> Option<&mut OptimizerState> {
        self.index.get(name).map(|&i| &mut self.state[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Mutable access to every (name, tensor, state) triple in order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut OptimizerState)> {
        self.entries.iter_mut().zip(self.state.iter_mut()).map(|((n, t), s)| (n.as_str(), t, s))
    }

    /// Replaces a tensor's values, keeping its dims.
    pub fn assign(&mut self, name: &str, values: &Tensor) -> Result<()> {
        let t = self.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if t.dims() != values.dims() {
            return Err(Error::shape("assign", format!("`{name}` is {:?}, got {:?}", t.dims(), values.dims())));
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &Graph) -> Bindings {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut by_name = HashMap::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let mut t = t.clone();
            t.grad = None;
            let v = graph.param(t);
            vars.push(v);
            by_name.insert(name.clone(), v);
        }
        Bindings { vars, by_name }
    }

    /// Reads the gradients `graph` left on the bound leaves (zeros where the
    /// loss did not reach a parameter).
    pub fn gradients(&self, graph: &Graph, bindings: &Bindings) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(&bindings.vars)
            .map(|((_, t), &v)| graph.grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    /// Adds `scale · grads[i]` into entry `i`'s gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &[Vec<f64>], scale: f64) {
        for ((_, t), g) in self.entries.iter_mut().zip(grads) {
            let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
            t.accumulate_grad(&scaled);
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }
}

/// Samples from N(0, std²) rejecting draws beyond two standard deviations.
pub fn truncated_normal<R: Rng>(rng: &mut R, std: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            out.push(z * std);
        }
    }
    out
}

/// How convolution kernels are initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Truncated normal with a fixed standard deviation.
    Fixed(f64),
    /// Truncated normal with std `sqrt(2 / fan_in)`.
    FanIn,
}

impl InitScheme {
    pub fn std_for(&self, dims: Dims) -> f64 {
        match *self {
            InitScheme::Fixed(s) => s,
            InitScheme::FanIn => {
                let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
                (2.0 / fan_in).sqrt()
            }
        }
    }

    pub fn kernel<R: Rng>(&self, rng: &mut R, dims: Dims) -> Tensor {
        let data = truncated_normal(rng, self.std_for(dims), dims.iter().product());
        Tensor::new(dims, data).expect("dims match sample count")
    }
}
