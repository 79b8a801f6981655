//! Parameterised building blocks that register their weights in a
//! [`ParamStore`] under a name prefix.

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialised `k × k` convolution with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.he([out_ch, in_ch, k, k], in_ch * k * k));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_ch]));
        Self { weight, bias, stride, pad }
    }

    /// Same as [`Conv2d::new`] but weights drawn from `N(0, std²)`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f32,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.normal([out_ch, in_ch, k, k], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_ch]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// He-initialised linear layer with zero bias.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_std(store, init, name, in_dim, out_dim, (2.0 / in_dim as f32).sqrt())
    }

    pub fn with_std(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f32,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.normal([out_dim, in_dim], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}
