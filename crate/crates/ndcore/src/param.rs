use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{NdError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// A named tensor that an optimizer may update.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub tensor: Arc<Tensor<F>>,
    pub trainable: bool,
    pub grad: Option<Tensor<F>>,
}

impl<F: Float> Parameter<F> {
    pub fn new(tensor: Tensor<F>, trainable: bool) -> Self {
        Self {
            tensor: Arc::new(tensor),
            trainable,
            grad: None,
        }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn set_grad(&mut self, grad: Tensor<F>) -> Result<()> {
        grad.expect_shape("set_grad", self.tensor.shape())?;
        self.grad = Some(grad);
        Ok(())
    }
}

/// Named hierarchy of parameters; names are dot-separated paths such as
/// `unet.enc.1.res.conv1.weight`. Iteration order is lexicographic.
#[derive(Clone, Debug, Default)]
pub struct ParameterTree<F> {
    params: BTreeMap<String, Parameter<F>>,
}

impl<F: Float> ParameterTree<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NdError::DuplicateParameter(name));
        }
        self.params.insert(name, Parameter::new(tensor, trainable));
        Ok(())
    }

    /// Inserts or replaces the tensor under `name`, keeping the trainable flag
    /// of an existing entry.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NdError::UnknownParameter(name.to_string()))?;
        tensor.expect_shape("set_tensor", p.tensor.shape())?;
        p.tensor = Arc::new(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<F>> {
        self.params
            .get(name)
            .ok_or_else(|| NdError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<F>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NdError::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(self.get(name)?.value())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Stores gradients for every named entry present in this tree; other
    /// names are ignored so one gradient map can serve several trees.
    pub fn absorb_grads(&mut self, grads: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        for (name, g) in grads {
            if let Some(p) = self.params.get_mut(name) {
                if p.trainable {
                    p.set_grad(g.clone())?;
                }
            }
        }
        Ok(())
    }

    /// Entries whose name begins with `prefix`, with the prefix replaced.
    pub fn remap_prefix(&self, from: &str, to: &str) -> Self {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(from))
            .map(|(k, v)| {
                let mut p = v.clone();
                p.grad = None;
                (format!("{to}{}", &k[from.len()..]), p)
            })
            .collect();
        Self { params }
    }

    /// Moves all entries of `other` into this tree.
    pub fn merge(&mut self, other: Self) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(NdError::DuplicateParameter(k));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParameterTree<G> {
        ParameterTree {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Parameter::new(p.tensor.cast(), p.trainable)))
                .collect(),
        }
    }

    /// Canonical little-endian f32 encoding of names, shapes and values.
    /// Used for content hashing; independent of trainable flags.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.tensor.rank() as u64).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        out
    }
}
