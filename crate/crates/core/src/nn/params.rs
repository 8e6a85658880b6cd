use std::collections::BTreeMap;

use ndarray::Array2;

use super::checkpoint::NamedTensor;
use super::tape::Gradients;
use crate::error::{Error, Result};

/// Stable handle to a parameter; equals its insertion index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Embedding,
    Bias,
}

impl ParamKind {
    /// L2 weight decay applies to weights and embeddings but not to biases.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    /// Checkpoint dims: biases are stored as rank-1 tensors.
    pub fn dims(&self) -> Vec<usize> {
        match self.kind {
            ParamKind::Bias => vec![self.value.len()],
            _ => self.value.shape().to_vec(),
        }
    }
}

/// Named parameters with parallel gradient buffers, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    has_grads: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        value: Array2<f64>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Argument(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        if kind == ParamKind::Bias && value.nrows() != 1 {
            return Err(Error::Argument(format!(
                "bias '{name}' must have a single row"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Array2::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.clone(),
            kind,
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |id| self.get_mut(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Parameters sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.by_name
            .values()
            .map(move |&id| (id, &self.params[id.0]))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.by_name.values().copied().collect()
    }

    /// True once a backward pass has deposited gradients since the last reset.
    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad += g;
        }
        self.has_grads = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
        self.has_grads = false;
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                dims: p.dims(),
                data: p.value.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrite parameter values from tensors matched by name.
    ///
    /// Every parameter must be present with an identical shape; tensors that
    /// are not parameters are ignored.
    pub fn assign_from(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let lookup: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", p.name)))?;
            if t.dims != p.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, model expects {:?}",
                    p.name,
                    t.dims,
                    p.dims()
                )));
            }
            p.value = Array2::from_shape_vec(p.value.raw_dim(), t.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_sorted() {
        let mut s = ParamStore::new();
        s.insert("zeta", ParamKind::Weight, Array2::zeros((2, 2)))
            .unwrap();
        s.insert("alpha", ParamKind::Bias, Array2::zeros((1, 3)))
            .unwrap();
        assert!(s
            .insert("zeta", ParamKind::Weight, Array2::zeros((1, 1)))
            .is_err());
        let names: Vec<_> = s.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, ["alpha", "zeta"]);
        assert_eq!(s.by_name("alpha").unwrap().dims(), vec![3]);
        for (_, p) in s.iter() {
            assert_eq!(p.grad.shape(), p.value.shape());
        }
    }

    #[test]
    fn bias_must_be_a_row() {
        let mut s = ParamStore::new();
        assert!(s
            .insert("b", ParamKind::Bias, Array2::zeros((2, 1)))
            .is_err());
    }
}
