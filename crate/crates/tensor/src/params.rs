//! Named parameter storage shared by all model components.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

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
    pub value: Tensor<f32>,
    /// Frozen parameters enter graphs as constants: no gradient is computed
    /// and the optimizer never touches them.
    pub trainable: bool,
    pub lr_scale: f32,
    /// Whether decoupled weight decay applies (matrices yes, norms/biases no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
            lr_scale: 1.0,
            decay,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.trainable = trainable;
        }
    }

    pub fn set_lr_scale(&mut self, prefix: &str, scale: f32) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.lr_scale = scale;
        }
    }

    /// Copies values from `other` for every name present in both stores.
    /// Shapes must agree.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (_, src) in other.iter() {
            if let Some(&id) = self.by_name.get(&src.name) {
                let dst = &mut self.params[id.0].value;
                if dst.shape() != src.value.shape() {
                    return Err(TensorError::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, checkpoint has {:?}",
                        src.name,
                        dst.shape(),
                        src.value.shape()
                    )));
                }
                *dst = src.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Truncated normal initializer (resampled outside two standard deviations).
pub fn trunc_normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0f32, std).expect("std must be finite and positive");
    Tensor::from_fn(shape, |_| loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}
