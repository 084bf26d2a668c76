use std::ops::Index;

use sha2::{Digest, Sha256};

use super::dense::Tensor;
use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, named parameter tensors of one module.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Replaces every tensor with the same-named tensor of `other`.
    ///
    /// Shapes must agree; extra tensors in `other` are rejected as well.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("`{}`: {:?} vs {:?}", p.name, src.value.shape(), p.value.shape()),
                ));
            }
            p.value = src.value.clone();
        }
        if other.entries.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, module has {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Records every tensor as a leaf of `g`. Trainable tensors require
    /// gradients only when `train` is set.
    pub fn bind(&self, g: &mut Graph, train: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| g.leaf(p.value.clone(), train && p.trainable))
            .collect();
        Bound { vars }
    }

    pub fn zero_grads(&self) -> GradSet {
        GradSet(self.entries.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Wraps handles that were recorded by the caller, one per store entry.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects gradients aligned with the store; absent entries are zero.
    pub fn collect(&self, grads: &mut Gradients, store: &ParamStore) -> GradSet {
        GradSet(
            self.vars
                .iter()
                .zip(&store.entries)
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                .collect(),
        )
    }
}

/// One gradient tensor per entry of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet(pub Vec<Tensor>);

impl GradSet {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::shape(
                "gradient sum",
                format!("{} vs {} tensors", self.0.len(), other.0.len()),
            ));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.expect_same_shape("gradient sum", b)?;
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}
