use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// Running statistics; carried in checkpoints but never touched by gradients.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named tensors of one model, in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<Parameter<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        ParameterSet {
            entries: Vec::new(),
        }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> usize {
        self.entries.push(Parameter {
            name: name.into(),
            kind,
            value,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.iter_mut()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].value
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].value
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.entries[idx]
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and the bit patterns of every value.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .entries
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }
}

/// Gradient buffers aligned index-for-index with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}
