//! Named parameter storage.
//!
//! Master weights live here as `f32` tensors in a stable, named order. A
//! forward pass leafs them onto a tape (at `f32` for training, `f64` for
//! finite-difference verification), and the optimizer walks them by index.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Ordered, named collection of master weights.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    /// Register a parameter. Names must be unique; insertion order is the
    /// canonical parameter order everywhere (optimizer state, checkpoints).
    pub fn add(&mut self, name: &str, tensor: Tensor<f32>) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor<f32> {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f32> {
        &mut self.tensors[index]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<f32>> {
        Ok(self.tensor(self.index_of(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replace a tensor wholesale (checkpoint restore). Shape must match.
    pub fn set(&mut self, index: usize, tensor: Tensor<f32>) -> Result<()> {
        let old = &self.tensors[index];
        if old.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set".into(),
                lhs: old.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.tensors[index] = tensor;
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gaussian init with the given standard deviation.
pub fn randn_init(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f32> {
    let data: Vec<f32> = (0..shape.iter().product::<usize>())
        .map(|_| (rng.next_normal() * std) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// The parameters of one model, leafed onto a tape in store order.
///
/// Built either from the master store (training / inference) or from an
/// externally supplied variable list (finite-difference verification, where
/// the checker owns the leaves).
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Leaf every master weight onto `tape` (cast to the tape's scalar).
    pub fn leaf_all<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| tape.leaf(t.cast::<S>(), true))
            .collect();
        ParamVars { vars }
    }

    /// Adopt pre-existing leaves (must follow store order).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub fn get(&self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.vars[store.index_of(name)?])
    }

    pub fn at(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}
