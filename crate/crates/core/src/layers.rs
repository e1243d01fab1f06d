//! Parameter construction and lookup shared by the network blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, InitScheme, ParamStore};
use crate::tensor::Tensor;

/// Creates parameters in a fixed order from one seeded stream.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    scheme: InitScheme,
}

impl ParamBuilder {
    pub fn new(seed: u64, scheme: InitScheme) -> Self {
        ParamBuilder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed), scheme }
    }

    /// `{name}.weight` of `[cout, cin, k, k]` and, optionally, a zero `{name}.bias`.
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool) -> Result<()> {
        let w = self.scheme.kernel(&mut self.rng, [cout, cin, k, k]);
        self.store.insert(format!("{name}.weight"), w)?;
        if bias {
            self.store.insert(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]))?;
        }
        Ok(())
    }

    /// Replaces every value of an existing entry by its magnitude.
    pub fn make_nonnegative(&mut self, name: &str) -> Result<()> {
        let t = self.store.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        t.data_mut().iter_mut().for_each(|v| *v = v.abs());
        Ok(())
    }

    pub fn constant(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.store.insert(name, t)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Graph-side view of a bound [`ParamStore`].
pub struct Net<'g> {
    pub g: &'g Graph,
    pub p: &'g Bindings,
}

impl<'g> Net<'g> {
    pub fn new(g: &'g Graph, p: &'g Bindings) -> Self {
        Net { g, p }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.p.get(name)
    }

    /// Convolution with `{name}.weight` and `{name}.bias` when it exists.
    pub fn conv(&self, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let w = self.p.get(&format!("{name}.weight"))?;
        let b = self.p.get(&format!("{name}.bias")).ok();
        self.g.conv2d(x, w, b, spec)
    }

    pub fn conv_relu(&self, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
        let y = self.conv(name, x, spec)?;
        Ok(self.g.relu(y))
    }
}
