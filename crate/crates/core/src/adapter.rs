//! Residual bottleneck adapter `x' = x + W_up·ReLU(W_down·x + b_down) + b_up`
//! and the full / adapter-only freeze semantics shared by both models.
//!
//! [`AdapterParams`] is a double-precision reference with a hand-written
//! backward pass; [`Adapter`] is the same map as graph operations over a
//! [`ParamStore`], used inside the detector and selector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use waymark_nn::{Archive, Graph, ParamId, ParamStore, Tensor, Var};

/// Standard deviation of `W_down` under [`AdapterInit::Trainable`].
pub const TRAINABLE_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterInit {
    /// Every parameter zero. ReLU(0) blocks the gradient into both weight
    /// matrices, so only `b_up` can move from here.
    Identity,
    /// `W_down ~ N(0, 1e-3²)`, everything else zero: still the identity at
    /// init, but `W_up` receives gradient on the first step.
    Trainable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Full,
    AdapterOnly,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("adapter bottleneck must satisfy 1 <= r < d, got d={d}, r={r}")]
    Bottleneck { d: usize, r: usize },
    #[error("adapter expects input dimension {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
}

fn check_dims(d: usize, r: usize) -> Result<(), AdapterError> {
    if r == 0 || r >= d {
        return Err(AdapterError::Bottleneck { d, r });
    }
    Ok(())
}

/// Row-major `W_down: r×d`, `W_up: d×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub d: usize,
    pub r: usize,
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every adapter input.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
    pub x: Vec<f64>,
}

impl AdapterParams {
    pub fn init(d: usize, r: usize, mode: AdapterInit, seed: u64) -> Result<Self, AdapterError> {
        check_dims(d, r)?;
        let mut p = Self { d, r, w_down: vec![0.0; r * d], b_down: vec![0.0; r], w_up: vec![0.0; d * r], b_up: vec![0.0; d] };
        if mode == AdapterInit::Trainable {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, TRAINABLE_INIT_STD).expect("valid std");
            p.w_down.iter_mut().for_each(|w| *w = n.sample(&mut rng));
        }
        Ok(p)
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.r)
            .map(|i| {
                let row = &self.w_down[i * self.d..(i + 1) * self.d];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b_down[i]
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, AdapterError> {
        self.check_input(x)?;
        let h: Vec<f64> = self.hidden(x).into_iter().map(|z| z.max(0.0)).collect();
        Ok((0..self.d)
            .map(|j| {
                let row = &self.w_up[j * self.r..(j + 1) * self.r];
                x[j] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + self.b_up[j]
            })
            .collect())
    }

    /// Backpropagates `grad_out = dL/dx'` through the adapter at input `x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<AdapterGrads, AdapterError> {
        self.check_input(x)?;
        self.check_input(grad_out)?;
        let (d, r) = (self.d, self.r);
        let z = self.hidden(x);
        let h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let mut g = AdapterGrads {
            w_down: vec![0.0; r * d],
            b_down: vec![0.0; r],
            w_up: vec![0.0; d * r],
            b_up: grad_out.to_vec(),
            x: grad_out.to_vec(),
        };
        let mut gh = vec![0.0; r];
        for j in 0..d {
            for i in 0..r {
                g.w_up[j * r + i] = grad_out[j] * h[i];
                gh[i] += grad_out[j] * self.w_up[j * r + i];
            }
        }
        for i in 0..r {
            let gz = if z[i] > 0.0 { gh[i] } else { 0.0 };
            g.b_down[i] = gz;
            for j in 0..d {
                g.w_down[i * d + j] = gz * x[j];
                g.x[j] += gz * self.w_down[i * d + j];
            }
        }
        Ok(g)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), AdapterError> {
        if x.len() != self.d {
            return Err(AdapterError::Dimension { expected: self.d, found: x.len() });
        }
        Ok(())
    }

    /// All parameters concatenated as `[W_down, b_down, W_up, b_up]`.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w_down[..], &self.b_down, &self.w_up, &self.b_up].concat()
    }

    /// Inverse of [`AdapterParams::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) {
        let (d, r) = (self.d, self.r);
        assert_eq!(flat.len(), 2 * d * r + d + r, "flat adapter length");
        let (a, rest) = flat.split_at(r * d);
        let (b, rest) = rest.split_at(r);
        let (c, e) = rest.split_at(d * r);
        self.w_down = a.to_vec();
        self.b_down = b.to_vec();
        self.w_up = c.to_vec();
        self.b_up = e.to_vec();
    }
}

/// The adapter as graph operations on `[N, d]` rows.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub d: usize,
    pub r: usize,
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

impl Adapter {
    /// Registers `{name}.w_down`, `{name}.b_down`, `{name}.w_up`, `{name}.b_up`.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, r: usize, mode: AdapterInit, seed: u64) -> Result<Self, AdapterError> {
        let p = AdapterParams::init(d, r, mode, seed)?;
        let t = |shape: Vec<usize>, v: &[f64]| Tensor::new(shape, v.iter().map(|&x| x as f32).collect());
        Ok(Self {
            d,
            r,
            w_down: store.add(format!("{name}.w_down"), t(vec![r, d], &p.w_down)),
            b_down: store.add(format!("{name}.b_down"), t(vec![r], &p.b_down)),
            w_up: store.add(format!("{name}.w_up"), t(vec![d, r], &p.w_up)),
            b_up: store.add(format!("{name}.b_up"), t(vec![d], &p.b_up)),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let wd = g.param(store, self.w_down);
        let bd = g.param(store, self.b_down);
        let wu = g.param(store, self.w_up);
        let bu = g.param(store, self.b_up);
        let z = g.linear(x, wd, Some(bd));
        let h = g.relu(z);
        let delta = g.linear(h, wu, Some(bu));
        g.add(x, delta)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_down, self.b_down, self.w_up, self.b_up]
    }

    /// Copies the current values out of the store in double precision.
    pub fn to_params(&self, store: &ParamStore) -> AdapterParams {
        let v = |id: ParamId| store.value(id).data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
        AdapterParams { d: self.d, r: self.r, w_down: v(self.w_down), b_down: v(self.b_down), w_up: v(self.w_up), b_up: v(self.b_up) }
    }

    pub fn load_params(&self, store: &mut ParamStore, p: &AdapterParams) {
        for (id, src) in self.param_ids().into_iter().zip([&p.w_down, &p.b_down, &p.w_up, &p.b_up]) {
            let dst = store.value_mut(id).data_mut();
            assert_eq!(dst.len(), src.len(), "adapter shape");
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s as f32);
        }
    }

    /// Flat named-tensor archive of just this adapter's parameters.
    pub fn export(&self, store: &ParamStore, meta: serde_json::Value) -> Archive {
        let mut a = Archive::new(meta);
        for id in self.param_ids() {
            let p = store.get(id);
            a.push(p.name.clone(), p.value.clone());
        }
        a
    }
}

/// A model built from a [`ParamStore`] that contains at least one adapter.
pub trait AdapterModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Whether `name` is an adapter or prediction-head parameter.
    fn is_adapter_or_head(&self, name: &str) -> bool;
}

/// Names of the parameters optimized under `mode`.
pub fn trainable_parameters<M: AdapterModel + ?Sized>(model: &M, mode: TrainMode) -> Vec<String> {
    model
        .params()
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| mode == TrainMode::Full || model.is_adapter_or_head(n))
        .collect()
}

/// Sets every parameter's trainable flag to match `mode`.
pub fn apply_train_mode<M: AdapterModel + ?Sized>(model: &mut M, mode: TrainMode) {
    let keep: std::collections::BTreeSet<String> = trainable_parameters(model, mode).into_iter().collect();
    model.params_mut().set_trainable_where(|n| keep.contains(n));
}

/// Checksum over every parameter outside the adapters and heads.
pub fn backbone_checksum<M: AdapterModel + ?Sized>(model: &M) -> String {
    model.params().checksum_where(|n| !model.is_adapter_or_head(n))
}
