//! Named parameter storage and gradient buffers.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered collection of every trainable tensor in a model.
///
/// Names are dotted paths (`encoder.lh.gcn.0.weight`) and are the keys used by
/// checkpoints; ids are positions and are only meaningful for one store.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Xavier/Glorot uniform init for a `[fan_in, fan_out]` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[fan_in, fan_out], data)
}

pub fn normal_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    // Box-Muller; keeps rand_distr out of the no_std core.
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        data.push(std * r * libm::cos(theta));
        if data.len() < n {
            data.push(std * r * libm::sin(theta));
        }
    }
    Tensor::new(shape, data)
}

/// Per-parameter gradient buffers, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self { slots: (0..n_params).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        if self.slots.len() <= id.0 {
            self.slots.resize_with(id.0 + 1, || None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds every buffer of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.slots.iter().flatten().flat_map(|g| g.data()).map(|x| x * x).sum())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::is_finite)
    }
}
