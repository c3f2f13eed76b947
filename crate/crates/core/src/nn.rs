//! Named parameter storage and the small layer vocabulary shared by the
//! encoder, ORI, HFE and the heads.

use std::collections::HashMap;
use std::ops::Index;

use autodiff::{ConvGeometry, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter `{name}`");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, v) in self.names.iter().zip(&mut self.values) {
            if name.starts_with(prefix) {
                v.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        ParamVars(self.values.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Wraps vars already on a graph, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    HeUniform { fan_in: usize },
    /// `N(0, gain^2 / fan_in)`.
    ScaledNormal { fan_in: usize, gain: f64 },
}

impl Init {
    pub fn tensor<R: Rng>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Tensor::from_fn(shape, |_| dist.sample(rng))
            }
            Init::ScaledNormal { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| dist.sample(rng))
            }
        }
    }
}

/// Affine map on the trailing dim.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[in_dim, out_dim], rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Var {
        g.linear(x, pv[self.weight], self.bias.map(|b| pv[b]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Var {
        g.layer_norm(x, pv[self.gamma], pv[self.beta], Self::EPS)
    }
}

/// Dense 3D convolution whose padding is derived from the input dims so the
/// output has `ceil(dim / stride)` cells per axis.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * in_ch;
        let weight = store.add(
            format!("{name}.weight"),
            Init::HeUniform { fan_in }.tensor(&[fan_in, out_ch], rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            kernel,
            stride,
        }
    }

    pub fn geometry(&self, in_dims: [usize; 3]) -> ConvGeometry {
        ConvGeometry::same_ceil(in_dims, self.kernel, self.stride)
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Var {
        let (dims, _) = g.value(x).dims4();
        g.conv3d(x, pv[self.weight], Some(pv[self.bias]), self.geometry(dims))
    }
}

/// Depthwise `k x k x k` convolution, stride 1, shape preserving.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv3d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, kernel: usize, rng: &mut R) -> Self {
        let kv = kernel * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Init::HeUniform { fan_in: kv }.tensor(&[kv, ch], rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[ch]));
        Self { weight, bias, kernel }
    }

    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Var {
        let (dims, _) = g.value(x).dims4();
        let k = [self.kernel; 3];
        let geo = ConvGeometry::same_ceil(dims, k, [1, 1, 1]);
        g.depthwise_conv3d(x, pv[self.weight], Some(pv[self.bias]), geo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_lookup_and_zeroing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let a = Linear::new(&mut s, "ori.q", 3, 2, true, Init::HeUniform { fan_in: 3 }, &mut rng);
        let b = Linear::new(&mut s, "head.e", 3, 2, true, Init::HeUniform { fan_in: 3 }, &mut rng);
        assert_eq!(s.find("ori.q.weight"), Some(a.weight));
        assert_eq!(s.zero_prefix("ori."), 2);
        assert_eq!(s.get(a.weight).max_abs(), 0.0);
        assert!(s.get(b.weight).max_abs() > 0.0);
        assert_eq!(s.num_scalars(), 16);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::zeros(&[1]));
        s.add("x", Tensor::zeros(&[1]));
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Init::HeUniform { fan_in: 24 }.tensor(&[200], &mut rng);
        assert!(t.max_abs() <= 0.5 + 1e-12);
    }
}
