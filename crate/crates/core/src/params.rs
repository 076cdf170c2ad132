//! Named parameter tables and their binding onto a graph.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Init, Real, Tensor};

/// Ordered table of learnable tensors keyed by unique dotted names.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { tensors: IndexMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Conv weight `(k, k, c_in, c_out)` drawn from `U[-s, s]`, `s = 1/√fan_in`,
    /// plus a zero bias.
    pub fn add_conv(&mut self, name: &str, k: usize, c_in: usize, c_out: usize, seed: u64) -> Result<()> {
        let s = 1.0 / ((k * k * c_in) as f64).sqrt();
        let w = Tensor::new(&[k, k, c_in, c_out], Init::Uniform { lo: T::of(-s), hi: T::of(s), seed })?;
        self.insert(format!("{name}.w"), w)?;
        self.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))
    }

    /// Depth-wise conv weight `(k, k, 1, c)` with fan-in `k²`, plus a zero bias.
    pub fn add_depthwise(&mut self, name: &str, k: usize, c: usize, seed: u64) -> Result<()> {
        let s = 1.0 / ((k * k) as f64).sqrt();
        let w = Tensor::new(&[k, k, 1, c], Init::Uniform { lo: T::of(-s), hi: T::of(s), seed })?;
        self.insert(format!("{name}.w"), w)?;
        self.insert(format!("{name}.b"), Tensor::zeros(&[c]))
    }

    pub fn add_constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::new(shape, Init::Constant(T::of(value)))?)
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn conv(&self, name: &str) -> Result<ConvVars> {
        Ok(ConvVars { w: self.var(&format!("{name}.w"))?, b: self.var(&format!("{name}.b"))? })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Weight and bias handles of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

/// Deterministic per-parameter seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hands out a fresh derived seed per parameter tensor.
#[derive(Debug, Clone)]
pub struct SeedStream {
    base: u64,
    next: u64,
}

impl SeedStream {
    pub fn new(base: u64) -> Self {
        SeedStream { base, next: 0 }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.next += 1;
        derive_seed(self.base, self.next)
    }
}

impl Bound {
    /// Build from explicit `(name, handle)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }
}
