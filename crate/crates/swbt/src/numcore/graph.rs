//! Define-by-run autodiff tape.
//!
//! Ops append nodes to a [`Graph`]; node ids are indices into the tape, so
//! inputs always precede outputs and reverse iteration is a valid topological
//! order. `backward` propagates into per-pass scratch buffers and then adds
//! the result into each node's persistent gradient, so calling it twice
//! doubles leaf gradients instead of corrupting them.

use std::sync::Arc;

use super::kernels::{mm_nn_acc, mm_tn_acc, transpose_into};
use super::tensor::{numel, Parameter, Tensor};
use super::TensorError;
use crate::Scalar;

pub type TensorId = usize;

#[derive(Debug, Clone)]
pub enum Op<S: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    /// Matrix plus a rank-1 row broadcast over every row.
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, S),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Tanh(TensorId),
    /// Row softmax. With a mask, positions where the mask is false are
    /// excluded from the max and the normalizing sum and output exactly zero,
    /// so disallowed attention targets cannot leak through rounding.
    SoftmaxRows(TensorId, Option<Arc<Vec<bool>>>),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    },
    Mse(TensorId, TensorId),
    Sum(TensorId),
    /// Σ over rows r of row_w[r] * ‖pred_r − target_r‖². The per-row weight
    /// vector is how masked/unmasked/padded slot selections and per-sample
    /// loss weights enter the graph.
    WeightedSse {
        pred: TensorId,
        target: TensorId,
        row_w: Arc<Vec<S>>,
    },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    Narrow {
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: TensorId,
        rows: Arc<Vec<usize>>,
    },
    Dropout {
        x: TensorId,
        keep: Arc<Vec<bool>>,
        inv_keep: S,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    shape: Vec<usize>,
    values: Vec<S>,
    /// Op-specific cache filled at forward time (layer norm stores normalized
    /// values plus per-row inverse std).
    saved: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    debug_checks: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            debug_checks: false,
        }
    }

    /// Enables per-op finiteness checks. Costs a full scan per op, intended
    /// for tests and debugging runs only.
    pub fn with_debug_checks(mut self, on: bool) -> Self {
        self.debug_checks = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor<S> {
        let n = &self.nodes[id];
        let mut t = Tensor::new(n.shape.clone(), n.values.clone()).expect("node shape consistent");
        t.grad = n.grad.clone();
        t.node = Some(id);
        t
    }

    /// Inserts a tensor as a leaf. `requires_grad` marks it as a gradient
    /// sink for backward.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            values: t.values.clone(),
            saved: Vec::new(),
            grad: None,
            requires_grad,
        })
    }

    pub fn param_leaf(&mut self, p: &Parameter<S>) -> TensorId {
        self.leaf(&p.tensor, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<TensorId, TensorError> {
        let expected = numel(&shape);
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(self.push(Node {
            op: Op::Leaf,
            shape,
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: false,
        }))
    }

    pub fn scalar_const(&mut self, v: S) -> TensorId {
        self.constant(vec![1], vec![v]).expect("scalar shape")
    }

    fn push(&mut self, node: Node<S>) -> TensorId {
        if self.debug_checks && node.values.iter().any(|v| !v.is_finite()) {
            // Finiteness failures surface as panics here because the id has
            // not been handed out yet; op constructors run the same check via
            // finish() and return an error instead.
            panic!("non-finite leaf value");
        }
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn finish(&mut self, node: Node<S>, op_name: &'static str) -> Result<TensorId, TensorError> {
        if self.debug_checks && node.values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn want_rank2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(TensorError::BadRank {
                op,
                expected: 2,
                got: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn want_same_shape(
        &self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
    ) -> Result<(), TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.want_same_shape(a, b, "add")?;
        let values: Vec<S> = self.nodes[a]
            .values
            .iter()
            .zip(self.nodes[b].values.iter())
            .map(|(x, y)| *x + *y)
            .collect();
        let node = Node {
            op: Op::Add(a, b),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a, b]),
        };
        self.finish(node, "add")
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let (_r, c) = self.want_rank2(a, "add_row")?;
        let rs = &self.nodes[row].shape;
        if rs.len() != 1 || rs[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.nodes[a].shape.clone(),
                right: rs.clone(),
            });
        }
        let rowv = &self.nodes[row].values;
        let values: Vec<S> = self.nodes[a]
            .values
            .chunks_exact(c)
            .flat_map(|arow| arow.iter().zip(rowv.iter()).map(|(x, y)| *x + *y))
            .collect();
        let node = Node {
            op: Op::AddRow(a, row),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a, row]),
        };
        self.finish(node, "add_row")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.want_same_shape(a, b, "sub")?;
        let values: Vec<S> = self.nodes[a]
            .values
            .iter()
            .zip(self.nodes[b].values.iter())
            .map(|(x, y)| *x - *y)
            .collect();
        let node = Node {
            op: Op::Sub(a, b),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a, b]),
        };
        self.finish(node, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.want_same_shape(a, b, "mul")?;
        let values: Vec<S> = self.nodes[a]
            .values
            .iter()
            .zip(self.nodes[b].values.iter())
            .map(|(x, y)| *x * *y)
            .collect();
        let node = Node {
            op: Op::Mul(a, b),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a, b]),
        };
        self.finish(node, "mul")
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> Result<TensorId, TensorError> {
        let values: Vec<S> = self.nodes[a].values.iter().map(|x| *x * c).collect();
        let node = Node {
            op: Op::Scale(a, c),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a]),
        };
        self.finish(node, "scale")
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.want_rank2(a, "matmul")?;
        let (k2, n) = self.want_rank2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let mut values = vec![S::zero(); m * n];
        mm_nn_acc(&mut values, &self.nodes[a].values, &self.nodes[b].values, m, k, n);
        let node = Node {
            op: Op::Matmul(a, b),
            shape: vec![m, n],
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a, b]),
        };
        self.finish(node, "matmul")
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.want_rank2(a, "transpose")?;
        let mut values = vec![S::zero(); r * c];
        transpose_into(&mut values, &self.nodes[a].values, r, c);
        let node = Node {
            op: Op::Transpose(a),
            shape: vec![c, r],
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a]),
        };
        self.finish(node, "transpose")
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let values: Vec<S> = self.nodes[a]
            .values
            .iter()
            .map(|x| if *x > S::zero() { *x } else { S::zero() })
            .collect();
        let node = Node {
            op: Op::Relu(a),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a]),
        };
        self.finish(node, "relu")
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let values: Vec<S> = self.nodes[a].values.iter().map(|x| gelu_fwd(*x)).collect();
        let node = Node {
            op: Op::Gelu(a),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a]),
        };
        self.finish(node, "gelu")
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let values: Vec<S> = self.nodes[a].values.iter().map(|x| x.tanh()).collect();
        let node = Node {
            op: Op::Tanh(a),
            shape: self.nodes[a].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a]),
        };
        self.finish(node, "tanh")
    }

    /// Softmax along `axis` of a 2-D tensor. Axis 0 is routed through two
    /// transposes so the row kernel stays the single implementation.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        self.want_rank2(a, "softmax")?;
        match axis {
            1 => self.softmax_rows(a, None),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t, None)?;
                self.transpose(s)
            }
            _ => Err(TensorError::OutOfRange {
                op: "softmax",
                detail: format!("axis {axis} out of range for rank 2"),
            }),
        }
    }

    pub fn softmax_rows(
        &mut self,
        a: TensorId,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.want_rank2(a, "softmax_rows")?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(TensorError::LengthMismatch {
                    expected: r * c,
                    got: m.len(),
                });
            }
        }
        let x = &self.nodes[a].values;
        let mut values = vec![S::zero(); r * c];
        for row in 0..r {
            let xs = &x[row * c..(row + 1) * c];
            let out = &mut values[row * c..(row + 1) * c];
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[row * c + j]);
            let mut mx = S::neg_infinity();
            for (j, v) in xs.iter().enumerate() {
                if allowed(j) && *v > mx {
                    mx = *v;
                }
            }
            if mx == S::neg_infinity() {
                continue; // fully masked row stays zero
            }
            let mut sum = S::zero();
            for (j, v) in xs.iter().enumerate() {
                if allowed(j) {
                    let e = (*v - mx).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for (j, o) in out.iter_mut().enumerate() {
                if allowed(j) {
                    *o /= sum;
                }
            }
        }
        let node = Node {
            op: Op::SoftmaxRows(a, mask),
            shape: vec![r, c],
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a]),
        };
        self.finish(node, "softmax_rows")
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.want_rank2(x, "layer_norm")?;
        for (id, name) in [(gain, "gain"), (bias, "bias")] {
            let s = &self.nodes[id].shape;
            if s.len() != 1 || s[0] != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![r, c],
                    right: s.clone(),
                });
            }
            let _ = name;
        }
        let epss = S::from_f64(eps);
        let xs = &self.nodes[x].values;
        let g = &self.nodes[gain].values;
        let b = &self.nodes[bias].values;
        let cn = S::from_f64(c as f64);
        let mut values = vec![S::zero(); r * c];
        // saved layout: xhat (r*c floats) then inv_std (r floats)
        let mut saved = vec![S::zero(); r * c + r];
        for row in 0..r {
            let xr = &xs[row * c..(row + 1) * c];
            let mut mean = S::zero();
            for v in xr {
                mean += *v;
            }
            mean /= cn;
            let mut var = S::zero();
            for v in xr {
                let d = *v - mean;
                var += d * d;
            }
            var /= cn;
            let inv_std = (var + epss).sqrt().recip();
            saved[r * c + row] = inv_std;
            for j in 0..c {
                let xhat = (xr[j] - mean) * inv_std;
                saved[row * c + j] = xhat;
                values[row * c + j] = xhat * g[j] + b[j];
            }
        }
        let node = Node {
            op: Op::LayerNorm {
                x,
                gain,
                bias,
                eps: epss,
            },
            shape: vec![r, c],
            values,
            saved,
            grad: None,
            requires_grad: self.req(&[x, gain, bias]),
        };
        self.finish(node, "layer_norm")
    }

    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.want_same_shape(a, b, "mse")?;
        let n = self.nodes[a].values.len();
        if n == 0 {
            return Err(TensorError::OutOfRange {
                op: "mse",
                detail: "empty operands".to_string(),
            });
        }
        let mut acc = S::zero();
        for (x, y) in self.nodes[a].values.iter().zip(self.nodes[b].values.iter()) {
            let d = *x - *y;
            acc += d * d;
        }
        let values = vec![acc / S::from_f64(n as f64)];
        let node = Node {
            op: Op::Mse(a, b),
            shape: vec![1],
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a, b]),
        };
        self.finish(node, "mse")
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let mut acc = S::zero();
        for v in &self.nodes[a].values {
            acc += *v;
        }
        let node = Node {
            op: Op::Sum(a),
            shape: vec![1],
            values: vec![acc],
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[a]),
        };
        self.finish(node, "sum")
    }

    pub fn weighted_sse(
        &mut self,
        pred: TensorId,
        target: TensorId,
        row_w: Arc<Vec<S>>,
    ) -> Result<TensorId, TensorError> {
        self.want_same_shape(pred, target, "weighted_sse")?;
        let (r, c) = self.want_rank2(pred, "weighted_sse")?;
        if row_w.len() != r {
            return Err(TensorError::LengthMismatch {
                expected: r,
                got: row_w.len(),
            });
        }
        let p = &self.nodes[pred].values;
        let t = &self.nodes[target].values;
        let mut acc = S::zero();
        for row in 0..r {
            let w = row_w[row];
            if w == S::zero() {
                continue;
            }
            let mut rowacc = S::zero();
            for j in row * c..(row + 1) * c {
                let d = p[j] - t[j];
                rowacc += d * d;
            }
            acc += w * rowacc;
        }
        let node = Node {
            op: Op::WeightedSse { pred, target, row_w },
            shape: vec![1],
            values: vec![acc],
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[pred, target]),
        };
        self.finish(node, "weighted_sse")
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::OutOfRange {
                op: "concat_rows",
                detail: "empty part list".to_string(),
            });
        }
        let (_, c) = self.want_rank2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.want_rank2(p, "concat_rows")?;
            if c2 != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0]].shape.clone(),
                    right: self.nodes[p].shape.clone(),
                });
            }
            rows += r;
        }
        let mut values = Vec::with_capacity(rows * c);
        for &p in parts {
            values.extend_from_slice(&self.nodes[p].values);
        }
        let node = Node {
            op: Op::ConcatRows(parts.to_vec()),
            shape: vec![rows, c],
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(parts),
        };
        self.finish(node, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::OutOfRange {
                op: "concat_cols",
                detail: "empty part list".to_string(),
            });
        }
        let (r, _) = self.want_rank2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r2, c) = self.want_rank2(p, "concat_cols")?;
            if r2 != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0]].shape.clone(),
                    right: self.nodes[p].shape.clone(),
                });
            }
            cols += c;
        }
        let mut values = vec![S::zero(); r * cols];
        let mut off = 0;
        for &p in parts {
            let c = self.nodes[p].shape[1];
            for row in 0..r {
                let src = &self.nodes[p].values[row * c..(row + 1) * c];
                values[row * cols + off..row * cols + off + c].copy_from_slice(src);
            }
            off += c;
        }
        let node = Node {
            op: Op::ConcatCols(parts.to_vec()),
            shape: vec![r, cols],
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(parts),
        };
        self.finish(node, "concat_cols")
    }

    pub fn narrow(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.want_rank2(x, "narrow")?;
        let dim = if axis == 0 {
            r
        } else if axis == 1 {
            c
        } else {
            return Err(TensorError::OutOfRange {
                op: "narrow",
                detail: format!("axis {axis} out of range for rank 2"),
            });
        };
        if len == 0 || start + len > dim {
            return Err(TensorError::OutOfRange {
                op: "narrow",
                detail: format!("window {start}..{} exceeds dim {dim}", start + len),
            });
        }
        let xs = &self.nodes[x].values;
        let (shape, values) = if axis == 0 {
            (vec![len, c], xs[start * c..(start + len) * c].to_vec())
        } else {
            let mut v = Vec::with_capacity(r * len);
            for row in 0..r {
                v.extend_from_slice(&xs[row * c + start..row * c + start + len]);
            }
            (vec![r, len], v)
        };
        let node = Node {
            op: Op::Narrow { x, axis, start, len },
            shape,
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[x]),
        };
        self.finish(node, "narrow")
    }

    /// Row gather; with an embedding table as `x` this is the embedding
    /// lookup. Repeated indices are allowed and their gradients accumulate.
    pub fn gather_rows(
        &mut self,
        x: TensorId,
        rows: Arc<Vec<usize>>,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.want_rank2(x, "gather_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::OutOfRange {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for {r} rows"),
            });
        }
        let xs = &self.nodes[x].values;
        let mut values = Vec::with_capacity(rows.len() * c);
        for &i in rows.iter() {
            values.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let node = Node {
            op: Op::GatherRows { x, rows: rows.clone() },
            shape: vec![rows.len(), c],
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[x]),
        };
        self.finish(node, "gather_rows")
    }

    /// Inverted-dropout: kept entries are scaled by 1/keep_prob so the
    /// expectation matches the identity map.
    pub fn dropout(
        &mut self,
        x: TensorId,
        keep: Arc<Vec<bool>>,
        keep_prob: f64,
    ) -> Result<TensorId, TensorError> {
        let n = self.nodes[x].values.len();
        if keep.len() != n {
            return Err(TensorError::LengthMismatch {
                expected: n,
                got: keep.len(),
            });
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(TensorError::OutOfRange {
                op: "dropout",
                detail: format!("keep probability {keep_prob} outside (0, 1]"),
            });
        }
        let inv_keep = S::from_f64(1.0 / keep_prob);
        let values: Vec<S> = self.nodes[x]
            .values
            .iter()
            .zip(keep.iter())
            .map(|(v, k)| if *k { *v * inv_keep } else { S::zero() })
            .collect();
        let node = Node {
            op: Op::Dropout {
                x,
                keep: keep.clone(),
                inv_keep,
            },
            shape: self.nodes[x].shape.clone(),
            values,
            saved: Vec::new(),
            grad: None,
            requires_grad: self.req(&[x]),
        };
        self.finish(node, "dropout")
    }

    /// Reverse pass from a scalar output. Gradients land in each node's
    /// persistent buffer; repeated calls accumulate there.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if loss >= self.nodes.len() {
            return Err(TensorError::OutOfRange {
                op: "backward",
                detail: format!("unknown node id {loss}"),
            });
        }
        if numel(&self.nodes[loss].shape) != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        let mut scratch: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        scratch[loss] = Some(vec![S::one()]);
        for id in (0..=loss).rev() {
            let Some(g) = scratch[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut scratch);
                let grad = self.nodes[id]
                    .grad
                    .get_or_insert_with(|| vec![S::zero(); g.len()]);
                for (dst, src) in grad.iter_mut().zip(g.iter()) {
                    *dst += *src;
                }
            }
        }
        Ok(())
    }

    fn scratch_for<'a>(
        nodes: &[Node<S>],
        scratch: &'a mut [Option<Vec<S>>],
        id: TensorId,
    ) -> Option<&'a mut Vec<S>> {
        if !nodes[id].requires_grad {
            return None;
        }
        let n = nodes[id].values.len();
        Some(scratch[id].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn propagate(&self, id: TensorId, g: &[S], scratch: &mut [Option<Vec<S>>]) {
        // `op` is cheap to clone: ids, shared Arcs and one scalar at most.
        let op = self.nodes[id].op.clone();
        let nodes = &self.nodes;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for inp in [a, b] {
                    if let Some(dst) = Self::scratch_for(nodes, scratch, inp) {
                        for (d, s) in dst.iter_mut().zip(g.iter()) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(dst) = Self::scratch_for(nodes, scratch, a) {
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d += *s;
                    }
                }
                if let Some(dst) = Self::scratch_for(nodes, scratch, row) {
                    let c = dst.len();
                    for grow in g.chunks_exact(c) {
                        for (d, s) in dst.iter_mut().zip(grow.iter()) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(dst) = Self::scratch_for(nodes, scratch, a) {
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d += *s;
                    }
                }
                if let Some(dst) = Self::scratch_for(nodes, scratch, b) {
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d -= *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if nodes[a].requires_grad {
                    let bv = &nodes[b].values;
                    let dst = Self::scratch_for(nodes, scratch, a).expect("checked");
                    for ((d, s), x) in dst.iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *d += *s * *x;
                    }
                }
                if nodes[b].requires_grad {
                    let av = &nodes[a].values;
                    let dst = Self::scratch_for(nodes, scratch, b).expect("checked");
                    for ((d, s), x) in dst.iter_mut().zip(g.iter()).zip(av.iter()) {
                        *d += *s * *x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(dst) = Self::scratch_for(nodes, scratch, a) {
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d += *s * c;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let n = nodes[b].shape[1];
                if nodes[a].requires_grad {
                    // dA += g · Bᵀ via an explicit transpose so the kernel
                    // keeps its reduction-free inner loop.
                    let mut bt = vec![S::zero(); k * n];
                    transpose_into(&mut bt, &nodes[b].values, k, n);
                    let mut da = vec![S::zero(); m * k];
                    mm_nn_acc(&mut da, g, &bt, m, n, k);
                    let dst = Self::scratch_for(nodes, scratch, a).expect("checked");
                    for (d, s) in dst.iter_mut().zip(da.iter()) {
                        *d += *s;
                    }
                }
                if nodes[b].requires_grad {
                    let mut db = vec![S::zero(); k * n];
                    mm_tn_acc(&mut db, &nodes[a].values, g, m, k, n);
                    let dst = Self::scratch_for(nodes, scratch, b).expect("checked");
                    for (d, s) in dst.iter_mut().zip(db.iter()) {
                        *d += *s;
                    }
                }
            }
            Op::Transpose(a) => {
                if nodes[a].requires_grad {
                    let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let mut gt = vec![S::zero(); r * c];
                    // g has shape [c, r]; transpose it back to [r, c].
                    transpose_into(&mut gt, g, c, r);
                    let dst = Self::scratch_for(nodes, scratch, a).expect("checked");
                    for (d, s) in dst.iter_mut().zip(gt.iter()) {
                        *d += *s;
                    }
                }
            }
            Op::Relu(a) => {
                if nodes[a].requires_grad {
                    let xs = &nodes[a].values;
                    let dst = Self::scratch_for(nodes, scratch, a).expect("checked");
                    for ((d, s), x) in dst.iter_mut().zip(g.iter()).zip(xs.iter()) {
                        if *x > S::zero() {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if nodes[a].requires_grad {
                    let xs = &nodes[a].values;
                    let dst = Self::scratch_for(nodes, scratch, a).expect("checked");
                    for ((d, s), x) in dst.iter_mut().zip(g.iter()).zip(xs.iter()) {
                        *d += *s * gelu_bwd(*x);
                    }
                }
            }
            Op::Tanh(a) => {
                if nodes[a].requires_grad {
                    let ys = &nodes[id].values;
                    let dst = Self::scratch_for(nodes, scratch, a).expect("checked");
                    for ((d, s), y) in dst.iter_mut().zip(g.iter()).zip(ys.iter()) {
                        *d += *s * (S::one() - *y * *y);
                    }
                }
            }
            Op::SoftmaxRows(a, _mask) => {
                if nodes[a].requires_grad {
                    let c = nodes[id].shape[1];
                    let p = &nodes[id].values;
                    let dst = Self::scratch_for(nodes, scratch, a).expect("checked");
                    for ((drow, grow), prow) in dst
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(p.chunks_exact(c))
                    {
                        let mut dot = S::zero();
                        for (gv, pv) in grow.iter().zip(prow.iter()) {
                            dot += *gv * *pv;
                        }
                        // Masked entries have p = 0, so they receive zero
                        // gradient through this same expression.
                        for ((d, gv), pv) in drow.iter_mut().zip(grow.iter()).zip(prow.iter()) {
                            *d += *pv * (*gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let (r, c) = (nodes[id].shape[0], nodes[id].shape[1]);
                let cn = S::from_f64(c as f64);
                let (xhat, inv_std) = nodes[id].saved.split_at(r * c);
                if nodes[x].requires_grad {
                    let gv = &nodes[gain].values;
                    let dst = Self::scratch_for(nodes, scratch, x).expect("checked");
                    for row in 0..r {
                        let grow = &g[row * c..(row + 1) * c];
                        let xh = &xhat[row * c..(row + 1) * c];
                        let istd = inv_std[row];
                        let mut sum1 = S::zero();
                        let mut sum2 = S::zero();
                        for j in 0..c {
                            let dxh = grow[j] * gv[j];
                            sum1 += dxh;
                            sum2 += dxh * xh[j];
                        }
                        sum1 /= cn;
                        sum2 /= cn;
                        let drow = &mut dst[row * c..(row + 1) * c];
                        for j in 0..c {
                            let dxh = grow[j] * gv[j];
                            drow[j] += istd * (dxh - sum1 - xh[j] * sum2);
                        }
                    }
                }
                if nodes[gain].requires_grad {
                    let dst = Self::scratch_for(nodes, scratch, gain).expect("checked");
                    for row in 0..r {
                        let grow = &g[row * c..(row + 1) * c];
                        let xh = &xhat[row * c..(row + 1) * c];
                        for j in 0..c {
                            dst[j] += grow[j] * xh[j];
                        }
                    }
                }
                if nodes[bias].requires_grad {
                    let dst = Self::scratch_for(nodes, scratch, bias).expect("checked");
                    for grow in g.chunks_exact(c) {
                        for (d, s) in dst.iter_mut().zip(grow.iter()) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let g0 = g[0];
                let n = S::from_f64(nodes[a].values.len() as f64);
                let two = S::from_f64(2.0);
                let diffs: Vec<S> = nodes[a]
                    .values
                    .iter()
                    .zip(nodes[b].values.iter())
                    .map(|(x, y)| g0 * two * (*x - *y) / n)
                    .collect();
                if let Some(dst) = Self::scratch_for(nodes, scratch, a) {
                    for (d, s) in dst.iter_mut().zip(diffs.iter()) {
                        *d += *s;
                    }
                }
                if let Some(dst) = Self::scratch_for(nodes, scratch, b) {
                    for (d, s) in dst.iter_mut().zip(diffs.iter()) {
                        *d -= *s;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(dst) = Self::scratch_for(nodes, scratch, a) {
                    let g0 = g[0];
                    for d in dst.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::WeightedSse { pred, target, row_w } => {
                let g0 = g[0];
                let c = nodes[pred].shape[1];
                let two = S::from_f64(2.0);
                let diffs: Vec<S> = nodes[pred]
                    .values
                    .iter()
                    .zip(nodes[target].values.iter())
                    .enumerate()
                    .map(|(i, (p, t))| {
                        let w = row_w[i / c];
                        g0 * two * w * (*p - *t)
                    })
                    .collect();
                if let Some(dst) = Self::scratch_for(nodes, scratch, pred) {
                    for (d, s) in dst.iter_mut().zip(diffs.iter()) {
                        *d += *s;
                    }
                }
                if let Some(dst) = Self::scratch_for(nodes, scratch, target) {
                    for (d, s) in dst.iter_mut().zip(diffs.iter()) {
                        *d -= *s;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p].values.len();
                    if let Some(dst) = Self::scratch_for(nodes, scratch, p) {
                        for (d, s) in dst.iter_mut().zip(g[off..off + n].iter()) {
                            *d += *s;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = nodes[id].shape[0];
                let cols = nodes[id].shape[1];
                let mut off = 0;
                for p in parts {
                    let c = nodes[p].shape[1];
                    if let Some(dst) = Self::scratch_for(nodes, scratch, p) {
                        for row in 0..r {
                            let src = &g[row * cols + off..row * cols + off + c];
                            for (d, s) in dst[row * c..(row + 1) * c].iter_mut().zip(src.iter()) {
                                *d += *s;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                if nodes[x].requires_grad {
                    let c = nodes[x].shape[1];
                    let dst = Self::scratch_for(nodes, scratch, x).expect("checked");
                    if axis == 0 {
                        for (d, s) in dst[start * c..start * c + g.len()].iter_mut().zip(g.iter())
                        {
                            *d += *s;
                        }
                    } else {
                        let rows = g.len() / len;
                        for row in 0..rows {
                            let grow = &g[row * len..(row + 1) * len];
                            let drow = &mut dst[row * c + start..row * c + start + len];
                            for (d, s) in drow.iter_mut().zip(grow.iter()) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if nodes[x].requires_grad {
                    let c = nodes[x].shape[1];
                    let dst = Self::scratch_for(nodes, scratch, x).expect("checked");
                    for (i, &src_row) in rows.iter().enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let drow = &mut dst[src_row * c..(src_row + 1) * c];
                        for (d, s) in drow.iter_mut().zip(grow.iter()) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Dropout { x, keep, inv_keep } => {
                if let Some(dst) = Self::scratch_for(nodes, scratch, x) {
                    for ((d, s), k) in dst.iter_mut().zip(g.iter()).zip(keep.iter()) {
                        if *k {
                            *d += *s * inv_keep;
                        }
                    }
                }
            }
        }
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
