//! Owned tensors, trainable parameters and the named parameter store.

use super::{TensorError, TensorId};
use crate::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major dense tensor. `grad` is populated by pulling gradients off a
/// graph after backward; `node` remembers the last graph binding, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    pub values: Vec<S>,
    pub grad: Option<Vec<S>>,
    pub node: Option<TensorId>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, TensorError> {
        let expected = numel(&shape);
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![S::zero(); n],
            grad: None,
            node: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<(), TensorError> {
        if g.len() != self.values.len() {
            return Err(TensorError::LengthMismatch {
                expected: self.values.len(),
                got: g.len(),
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.values.len()]);
        for (dst, src) in grad.iter_mut().zip(g.iter()) {
            *dst += *src;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            for v in g.iter_mut() {
                *v = S::zero();
            }
        }
    }
}

/// A trainable tensor with Adam state: first and second gradient moments and
/// the per-parameter step count used for bias correction.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub tensor: Tensor<S>,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub steps: u64,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(tensor: Tensor<S>) -> Self {
        let n = tensor.numel();
        Parameter {
            tensor,
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            steps: 0,
        }
    }
}

/// Insertion-ordered collection of named parameters. Order is the contract
/// for checkpoint layout and graph binding, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<(String, Parameter<S>)>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> Result<usize, TensorError> {
        if self.index_of(name).is_some() {
            return Err(TensorError::BadParamName {
                name: name.to_string(),
                reason: "duplicate registration",
            });
        }
        self.params.push((name.to_string(), Parameter::new(tensor)));
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>, TensorError> {
        self.index_of(name)
            .map(|i| &self.params[i].1)
            .ok_or_else(|| TensorError::BadParamName {
                name: name.to_string(),
                reason: "not found",
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>, TensorError> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.params[i].1),
            None => Err(TensorError::BadParamName {
                name: name.to_string(),
                reason: "not found",
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<S>)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<S>)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn at(&self, idx: usize) -> (&str, &Parameter<S>) {
        let (n, p) = &self.params[idx];
        (n.as_str(), p)
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter<S> {
        &mut self.params[idx].1
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|(_, p)| p.tensor.numel()).sum()
    }
}
