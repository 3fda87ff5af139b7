use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `(name, shape)` pairs in storage order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(|t| t.shape().to_vec()))
            .collect()
    }

    /// Replace the data of every tensor, checking names and shapes.
    pub fn load(&mut self, entries: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(invalid(
                "ParamStore::load",
                alloc::format!("expected {} tensors, found {}", self.len(), entries.len()),
            ));
        }
        for (i, (name, shape, _)) in entries.iter().enumerate() {
            if name != &self.names[i] || shape.as_slice() != self.tensors[i].shape() {
                return Err(invalid(
                    "ParamStore::load",
                    alloc::format!(
                        "tensor {i}: expected {} {:?}, found {name} {shape:?}",
                        self.names[i],
                        self.tensors[i].shape()
                    ),
                ));
            }
        }
        for (i, (_, shape, data)) in entries.into_iter().enumerate() {
            self.tensors[i] = Tensor::new(&shape, data)?.with_requires_grad(true);
        }
        Ok(())
    }

    /// Round every value to the nearest `f32`, keeping them exactly representable
    /// in single precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
