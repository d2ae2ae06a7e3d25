use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Role a parameter tensor plays in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    DeconvWeight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Updated by the optimizer. Running statistics are buffers, not parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Included in the L2 penalty.
    pub fn is_decayed(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::DeconvWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named network parameters and batch-norm buffers, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn register(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].value
    }

    pub fn kind(&self, id: usize) -> ParamKind {
        self.entries[id].kind
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// `sum of squares` over decayed tensors (conv and deconv kernels).
    pub fn l2_sum(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind.is_decayed())
            .map(|e| e.value.sum_squares())
            .sum()
    }

    /// Folds batch statistics into running buffers: `r <- (1-m) r + m b`.
    pub fn apply_running_stats(&mut self, stats: &[RunningStatUpdate], momentum: f64) {
        for u in stats {
            for (id, batch) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                for (r, &b) in self.entries[id].value.data_mut().iter_mut().zip(batch) {
                    *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
                }
            }
        }
    }

    /// Overwrites values by name from `other`; every tensor here must be present there.
    pub fn load_values(&mut self, other: &HashMap<String, Tensor<T>>) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .get(&e.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {}: stored shape {:?}, network expects {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

/// Batch statistics of one normalization layer from a training-mode pass.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    pub mean_id: usize,
    pub var_id: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradient slots aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    slots: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            slots: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, id: usize, grad: &Tensor<T>) -> Result<()> {
        self.slots[id].add_assign(grad)
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.slots[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.slots[id]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(Tensor::all_finite)
    }
}

/// Layout entry produced when a network registers its parameters.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

fn fan_in(spec: &ParamSpec) -> usize {
    match spec.kind {
        ParamKind::ConvWeight => spec.shape[1..].iter().product(),
        // (in, out, k, k) with stride == k: each output pixel sees every input channel once.
        ParamKind::DeconvWeight => spec.shape[0],
        _ => 1,
    }
}

/// Builds a store from a layout: He-normal kernels, zero biases and shifts,
/// unit scales and running variances.
pub fn init_from_layout(layout: &[ParamSpec], seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in layout {
        let value = match spec.kind {
            ParamKind::ConvWeight | ParamKind::DeconvWeight => {
                let std = (2.0 / fan_in(spec) as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
                let len = spec.shape.iter().product();
                let data = (0..len).map(|_| normal.sample(&mut rng) as f32).collect();
                Tensor::from_vec(&spec.shape, data)?
            }
            ParamKind::BnScale | ParamKind::BnRunningVar => Tensor::filled(&spec.shape, 1.0),
            ParamKind::Bias | ParamKind::BnShift | ParamKind::BnRunningMean => {
                Tensor::zeros(&spec.shape)
            }
        };
        store.register(&spec.name, spec.kind, value)?;
    }
    Ok(store)
}
