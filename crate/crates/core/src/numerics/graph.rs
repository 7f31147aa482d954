//! Dynamic reverse-mode differentiation tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation evaluates
//! eagerly, checks that its output is finite, and records how to propagate a
//! gradient back to its inputs. Nodes only ever reference earlier nodes, so
//! reverse creation order is a valid topological order.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::params::{GradMap, ParamStore};
use crate::numerics::tensor::{dot, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Pow(Var, f64),
    LnClamped(Var, f64),
    SmoothL1(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    MaskedSoftmax(Var, Arc<[usize]>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    BlockLeftMatmul(Tensor, Var),
    Reshape(Var),
    PrefixAttention {
        q: Var,
        k: Var,
        v: Var,
        prefix: Arc<[usize]>,
        scale: f64,
        weights: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-graph operation counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpStats {
    pub counts: BTreeMap<&'static str, usize>,
    /// Rows pushed through [`Graph::linear`].
    pub linear_rows: usize,
}

impl OpStats {
    pub fn count(&self, op: &str) -> usize {
        self.counts.get(op).copied().unwrap_or(0)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    stats: OpStats,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> &OpStats {
        &self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let id = self.nodes.len();
        let requires_grad = inputs.iter().any(|v| {
            assert!(v.0 < id, "graph edges must point backwards");
            self.nodes[v.0].requires_grad
        });
        *self.stats.counts.entry(name).or_insert(0) += 1;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(id)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Bind a parameter from `store`. Binding the same path twice returns the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let value = store.value(path)?.clone();
        check_finite("param", &value)?;
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.params.insert(path.to_string(), Var(id));
        Ok(Var(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_row")?;
        if self.shape(b) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} does not fit rows of {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push("add_row", value, Op::AddRow(x, b), &[x, b])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    /// `x^exponent` for non-negative `x`.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("pow: negative base".into()));
        }
        let value = self.value(x).map(|v| v.powf(exponent));
        self.push("pow", value, Op::Pow(x, exponent), &[x])
    }

    /// `ln(max(x, floor))`.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push("ln", value, Op::LnClamped(x, floor), &[x])
    }

    /// Elementwise Huber with unit threshold: `0.5x²` inside `|x| < 1`, `|x| − 0.5` outside.
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(smooth_l1_value);
        self.push("smooth_l1", value, Op::SmoothL1(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(x, lo, hi), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("softmax_rows")?;
        let full: Arc<[usize]> = vec![n; m].into();
        let value = masked_softmax_value(self.value(x), &full);
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Row-wise softmax over the first `prefix[i]` entries of row `i`; the
    /// remaining entries are exactly zero and never read.
    pub fn masked_softmax_rows(&mut self, x: Var, prefix: Arc<[usize]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2("masked_softmax_rows")?;
        check_prefix("masked_softmax_rows", &prefix, m, n)?;
        let value = masked_softmax_value(self.value(x), &prefix);
        self.push("masked_softmax", value, Op::MaskedSoftmax(x, prefix), &[x])
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2("layer_norm")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / shift {:?} do not fit width {n}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let xhat = Tensor::new(vec![m, n], xhat)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} out of bounds for {:?}", self.shape(x)),
            ));
        }
        let w = end - start;
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        self.push("slice_cols", value, Op::SliceCols(x, start), &[x])
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols: no inputs".into()));
        }
        let (m, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {:?} vs {:?}", self.shape(parts[0]), self.shape(p)),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_rows")?;
        if start > end || end > m {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{end} out of bounds for {:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], data)?;
        self.push("slice_rows", value, Op::SliceRows(x, start), &[x])
    }

    /// Row-wise stacking of matrices with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows: no inputs".into()));
        }
        let (_, n) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("widths differ: {:?} vs {:?}", self.shape(parts[0]), self.shape(p)),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// 1-D tensor of the elements at the given flat indices.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of bounds for {:?}", self.shape(x)),
            ));
        }
        let data = indices.iter().map(|&i| src[i]).collect::<Vec<_>>();
        let value = Tensor::new(vec![indices.len()], data)?;
        self.push("gather", value, Op::Gather(x, indices.to_vec()), &[x])
    }

    /// Matrix whose row `r` is row `rows[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of bounds for {:?}", self.shape(x)),
            ));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        self.push("gather_rows", value, Op::GatherRows(x, rows.to_vec()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::SumAll(x), &[x])
    }

    /// Mean of all elements; zero for an empty tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let value = Tensor::scalar(if n == 0 { 0.0 } else { self.value(x).sum() / n as f64 });
        self.push("mean", value, Op::MeanAll(x), &[x])
    }

    /// Apply the constant matrix `a[r×J]` to every consecutive block of `J`
    /// rows of `x`, giving `(blocks·r) × H`.
    pub fn block_left_matmul(&mut self, a: &Tensor, x: Var) -> Result<Var> {
        let (r, j) = a.dims2("block_left_matmul")?;
        let (m, h) = self.value(x).dims2("block_left_matmul")?;
        if j == 0 || m % j != 0 {
            return Err(Error::shape(
                "block_left_matmul",
                format!("{:?} rows are not blocks of {:?}", self.shape(x), a.shape()),
            ));
        }
        let blocks = m / j;
        let src = self.value(x).data();
        let mut data = vec![0.0; blocks * r * h];
        for b in 0..blocks {
            let xb = Tensor::new(vec![j, h], src[b * j * h..(b + 1) * j * h].to_vec())?;
            let yb = a.matmul(&xb)?;
            data[b * r * h..(b + 1) * r * h].copy_from_slice(yb.data());
        }
        let value = Tensor::new(vec![blocks * r, h], data)?;
        self.push(
            "block_left_matmul",
            value,
            Op::BlockLeftMatmul(a.clone(), x),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Affine map over the last axis: `x[…×d_in] · w[d_in×d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (d_in, d_out) = self.value(w).dims2("linear")?;
        if xs.last() != Some(&d_in) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in weight rows {:?}", xs, self.shape(w)),
            ));
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        self.stats.linear_rows += rows;
        let x2 = if xs.len() == 2 { x } else { self.reshape(x, &[rows, d_in])? };
        let y = self.matmul(x2, w)?;
        let y = self.add_row(y, b)?;
        if xs.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = xs[..xs.len() - 1].to_vec();
            out_shape.push(d_out);
            self.reshape(y, &out_shape)
        }
    }

    /// Attention in which query row `i` reads only key/value rows
    /// `0..prefix[i]`. Masked rows are skipped entirely.
    pub fn prefix_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Arc<[usize]>,
        scale: f64,
    ) -> Result<Var> {
        let (m, d) = self.value(q).dims2("prefix_attention")?;
        let (n, dk) = self.value(k).dims2("prefix_attention")?;
        let (nv, dv) = self.value(v).dims2("prefix_attention")?;
        if dk != d || nv != n {
            return Err(Error::shape(
                "prefix_attention",
                format!(
                    "query {:?}, key {:?}, value {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        check_prefix("prefix_attention", &prefix, m, n)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; m * dv];
        let mut weights = Vec::with_capacity(m);
        for i in 0..m {
            let p = prefix[i];
            let qi = qv.row(i);
            let logits: Vec<f64> = (0..p).map(|j| scale * dot(qi, kv.row(j))).collect();
            let w = softmax_slice(&logits);
            let o = &mut out[i * dv..(i + 1) * dv];
            for (j, &wj) in w.iter().enumerate() {
                for (oc, &vc) in o.iter_mut().zip(vv.row(j)) {
                    *oc += wj * vc;
                }
            }
            weights.push(w);
        }
        let value = Tensor::new(vec![m, dv], out)?;
        self.push(
            "prefix_attention",
            value,
            Op::PrefixAttention {
                q,
                k,
                v,
                prefix,
                scale,
                weights,
            },
            &[q, k, v],
        )
    }

    /// Attention weights recorded by a [`Graph::prefix_attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::PrefixAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`; returns the gradient of every bound
    /// parameter the loss depends on.
    pub fn gradients(&self, loss: Var) -> Result<GradMap> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, delta) in self.input_grads(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            }
        }
        let mut out = GradMap::new();
        for (path, &v) in &self.params {
            if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                check_finite("backward", &g)?;
                out.insert(path.clone(), g);
            }
        }
        Ok(out)
    }

    /// Accumulate `∂loss/∂p` into the gradient slot of every parameter in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate_all(&grads)
    }

    fn input_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.matmul_nt(val(*b))?));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, val(*a).matmul_tn(g)?));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |gv, bv| gv * bv)),
                (*b, g.zip_map(val(*a), |gv, av| gv * av)),
            ],
            Op::AddRow(x, b) => {
                let (m, n) = g.dims2("add_row")?;
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for (d, &gv) in db.iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(vec![n], db)?)]
            }
            Op::Affine(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s)))],
            Op::Pow(x, e) => {
                let e = *e;
                vec![(
                    *x,
                    g.zip_map(val(*x), |gv, xv| {
                        if e == 0.0 {
                            0.0
                        } else if xv == 0.0 && e >= 1.0 {
                            if e == 1.0 {
                                gv
                            } else {
                                0.0
                            }
                        } else {
                            gv * e * xv.powf(e - 1.0)
                        }
                    }),
                )]
            }
            Op::LnClamped(x, floor) => {
                let floor = *floor;
                vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > floor { gv / xv } else { 0.0 }))]
            }
            Op::SmoothL1(x) => vec![(
                *x,
                g.zip_map(val(*x), |gv, xv| {
                    if xv.abs() < 1.0 {
                        gv * xv
                    } else {
                        gv * xv.signum()
                    }
                }),
            )],
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(
                    *x,
                    g.zip_map(val(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
                )]
            }
            Op::Softmax(x) => {
                let (m, n) = node.value.dims2("softmax_rows")?;
                let full: Vec<usize> = vec![n; m];
                vec![(*x, softmax_backward(&node.value, g, &full)?)]
            }
            Op::MaskedSoftmax(x, prefix) => vec![(*x, softmax_backward(&node.value, g, prefix)?)],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = g.dims2("layer_norm")?;
                let gam = val(*gamma).data();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let gr = g.row(i);
                    let hr = xhat.row(i);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gam[j];
                        dx[i * n + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::new(vec![m, n], dx)?),
                    (*gamma, Tensor::new(vec![n], dgamma)?),
                    (*beta, Tensor::new(vec![n], dbeta)?),
                ]
            }
            Op::Transpose(x) => vec![(*x, g.transpose()?)],
            Op::SliceCols(x, start) => {
                let (m, n) = val(*x).dims2("slice_cols")?;
                let (_, w) = g.dims2("slice_cols")?;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                vec![(*x, Tensor::new(vec![m, n], dx)?)]
            }
            Op::ConcatCols(parts) => {
                let (m, _) = g.dims2("concat_cols")?;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, c) = val(p).dims2("concat_cols")?;
                    let mut d = Vec::with_capacity(m * c);
                    for i in 0..m {
                        d.extend_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    out.push((p, Tensor::new(vec![m, c], d)?));
                    offset += c;
                }
                out
            }
            Op::SliceRows(x, start) => {
                let (m, n) = val(*x).dims2("slice_rows")?;
                let mut dx = vec![0.0; m * n];
                dx[start * n..start * n + g.numel()].copy_from_slice(g.data());
                vec![(*x, Tensor::new(vec![m, n], dx)?)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).numel();
                    let d = g.data()[offset..offset + len].to_vec();
                    out.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                    offset += len;
                }
                out
            }
            Op::Gather(x, idx) => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![(*x, dx)]
            }
            Op::GatherRows(x, rows) => {
                let (_, n) = val(*x).dims2("gather_rows")?;
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (r, &src) in rows.iter().enumerate() {
                    for (o, &gv) in d[src * n..(src + 1) * n].iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::SumAll(x) => {
                let gv = g.item()?;
                vec![(*x, Tensor::full(val(*x).shape(), gv))]
            }
            Op::MeanAll(x) => {
                let n = val(*x).numel().max(1) as f64;
                let gv = g.item()? / n;
                vec![(*x, Tensor::full(val(*x).shape(), gv))]
            }
            Op::BlockLeftMatmul(a, x) => {
                let (r, j) = a.dims2("block_left_matmul")?;
                let (m, h) = val(*x).dims2("block_left_matmul")?;
                let blocks = m / j;
                let mut dx = vec![0.0; m * h];
                for b in 0..blocks {
                    let gb = Tensor::new(vec![r, h], g.data()[b * r * h..(b + 1) * r * h].to_vec())?;
                    let db = a.matmul_tn(&gb)?;
                    dx[b * j * h..(b + 1) * j * h].copy_from_slice(db.data());
                }
                vec![(*x, Tensor::new(vec![m, h], dx)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::PrefixAttention {
                q,
                k,
                v,
                prefix,
                scale,
                weights,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (m, d) = qv.dims2("prefix_attention")?;
                let (n, dv) = vv.dims2("prefix_attention")?;
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; n * d];
                let mut dvv = vec![0.0; n * dv];
                for i in 0..m {
                    let p = prefix[i];
                    let gi = g.row(i);
                    let w = &weights[i];
                    let dp: Vec<f64> = (0..p).map(|j| dot(gi, vv.row(j))).collect();
                    let inner: f64 = w.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = qv.row(i);
                    for j in 0..p {
                        for (o, &gc) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                            *o += w[j] * gc;
                        }
                        let ds = w[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = kv.row(j);
                        for c in 0..d {
                            dq[i * d + c] += ds * kj[c];
                            dk[j * d + c] += ds * qi[c];
                        }
                    }
                }
                vec![
                    (*q, Tensor::new(vec![m, d], dq)?),
                    (*k, Tensor::new(vec![n, d], dk)?),
                    (*v, Tensor::new(vec![n, dv], dvv)?),
                ]
            }
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn check_prefix(op: &'static str, prefix: &[usize], m: usize, n: usize) -> Result<()> {
    if prefix.len() != m {
        return Err(Error::shape(op, format!("{} mask rows for {m} query rows", prefix.len())));
    }
    if let Some(&bad) = prefix.iter().find(|&&p| p == 0 || p > n) {
        return Err(Error::InvalidArgument(format!(
            "{op}: mask row prefix {bad} outside 1..={n}"
        )));
    }
    Ok(())
}

/// Softmax of a slice with max subtraction.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn masked_softmax_value(x: &Tensor, prefix: &[usize]) -> Tensor {
    let n = x.shape()[1];
    let mut out = vec![0.0; x.numel()];
    for (i, &p) in prefix.iter().enumerate() {
        let w = softmax_slice(&x.row(i)[..p]);
        out[i * n..i * n + p].copy_from_slice(&w);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

fn softmax_backward(y: &Tensor, g: &Tensor, prefix: &[usize]) -> Result<Tensor> {
    let (m, n) = y.dims2("softmax_rows")?;
    let mut dx = vec![0.0; m * n];
    for i in 0..m {
        let p = prefix[i];
        let yr = &y.row(i)[..p];
        let gr = &g.row(i)[..p];
        let inner = dot(yr, gr);
        for j in 0..p {
            dx[i * n + j] = yr[j] * (gr[j] - inner);
        }
    }
    Tensor::new(vec![m, n], dx)
}
