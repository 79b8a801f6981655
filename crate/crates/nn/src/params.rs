//! Named parameter storage, initialization and checksums.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{hex, Tensor};
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Insertion order is the
/// canonical order for checksums and serialization.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Marks each parameter trainable iff `pred(name)` holds.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }

    pub fn count_elements(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over the names and values of every parameter selected by `pred`.
    pub fn checksum_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            p.value.feed_hasher(&mut h);
        }
        hex(&h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites parameter values from `(name, tensor)` pairs. Every
    /// supplied name must exist with a matching shape; names absent from
    /// `tensors` are left untouched.
    pub fn load_named<'a>(
        &mut self,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<usize, NnError> {
        let mut n = 0;
        for (name, t) in tensors {
            let id = self.id(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
            let dst = &mut self.params[id.0].value;
            if dst.shape() != t.shape() {
                return Err(NnError::ShapeMismatch {
                    name: name.to_string(),
                    expected: dst.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
            n += 1;
        }
        Ok(n)
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: impl Into<Vec<usize>>, std: f32) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        if std == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data)
    }

    /// He-normal for layers followed by ReLU.
    pub fn he(&mut self, shape: impl Into<Vec<usize>>, fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f32).sqrt();
        self.normal(shape, std)
    }
}
