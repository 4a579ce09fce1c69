use super::{as_matrix, kernels, Tensor, LOG_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Softmax {
        x: Var,
        temperature: f64,
        n: usize,
        inner: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes only ever reference earlier nodes, so insertion order is a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires_grad: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Nodes that require grad but were not
    /// reached get zeros; nodes that do not require grad get `None`.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        })
    }

    /// Borrow the raw buffer if the node was reached.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    Ok(())
}

fn validate_distribution(what: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Validation(format!("{what} row {r} has entry {v}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::shape("add_bias", &tx.shape, &tb.shape));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let v = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(v, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Matrix product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(ta, "matmul")?;
        let (k2, n) = as_matrix(tb, "matmul")?;
        if k != k2 || ta.shape.len() != 2 || tb.shape.len() != 2 {
            return Err(Error::shape("matmul", &ta.shape, &tb.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&ta.data, &tb.data, &mut out, m, k, n);
        let v = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(ta, "matmul_nt")?;
        let (n, k2) = as_matrix(tb, "matmul_nt")?;
        if k != k2 || ta.shape.len() != 2 || tb.shape.len() != 2 {
            return Err(Error::shape("matmul_nt", &ta.shape, &tb.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(&ta.data, &tb.data, &mut out, m, k, n);
        let v = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(v, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Softmax of `x / temperature` along `axis`.
    pub fn softmax(&mut self, x: Var, temperature: f64, axis: usize) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let tx = self.value(x);
        let shape = if tx.shape.is_empty() { vec![1] } else { tx.shape.clone() };
        if axis >= shape.len() {
            return Err(Error::Parameter(format!("axis {axis} out of range for {shape:?}")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; tx.data.len()];
        let mut buf_in = vec![0.0; n];
        let mut buf_out = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    buf_in[k] = tx.data[(o * n + k) * inner + i];
                }
                kernels::softmax_into(&buf_in, temperature, &mut buf_out);
                for k in 0..n {
                    out[(o * n + k) * inner + i] = buf_out[k];
                }
            }
        }
        let v = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        Ok(self.push(
            v,
            Op::Softmax {
                x,
                temperature,
                n,
                inner,
            },
            &[x],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::shape("layer_norm", &tx.shape, &tg.shape));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.data.len()];
        for r in 0..rows {
            let row = &tx.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let v = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows `ids` of `table[V, d]` into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = as_matrix(t, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary(format!("token id {bad} outside table of {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Validation("embedding lookup with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let val = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push(
            val,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks 2-D inputs along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", &self.value(*first).shape, &t.shape));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let v = Tensor {
            shape: vec![rows, c],
            data,
        };
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins 2-D inputs side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of nothing".into()))?;
        let r = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::shape(
                    "concat_cols",
                    &self.value(*first).shape,
                    &self.value(p).shape,
                ));
            }
        }
        let c: usize = widths.iter().sum();
        let mut data = vec![0.0; r * c];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..r {
                data[i * c + off..i * c + off + w].copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let v = Tensor {
            shape: vec![r, c],
            data,
        };
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = as_matrix(t, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", &t.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data[i * c + start..i * c + start + len]);
        }
        let v = Tensor {
            shape: vec![r, len],
            data,
        };
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = as_matrix(t, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Validation("gather of no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", &t.shape, &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let v = Tensor {
            shape: vec![rows.len(), c],
            data,
        };
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over rows of `H(target, softmax(logits))`. `target` rows must be
    /// non-negative and sum to 1 within 1e-6.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = as_matrix(t, "cross_entropy")?;
        if target.numel() != t.numel() {
            return Err(Error::shape("cross_entropy", &t.shape, &target.shape));
        }
        validate_distribution("cross-entropy target", rows, cols, &target.data)?;
        let mut probs = vec![0.0; t.data.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let z = &t.data[r * cols..(r + 1) * cols];
            let lse = kernels::log_sum_exp(z);
            for j in 0..cols {
                let y = target.data[r * cols + j];
                probs[r * cols + j] = (z[j] - lse).exp();
                if y > 0.0 {
                    loss -= y * (z[j] - lse);
                }
            }
        }
        loss /= rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.data.clone(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over rows of `KL(q ‖ p)`; `q` is a detached target, gradient flows into `p`.
    pub fn kl_divergence(&mut self, q: &Tensor, p: Var) -> Result<Var> {
        let tp = self.value(p);
        let (rows, cols) = as_matrix(tp, "kl_divergence")?;
        if q.numel() != tp.numel() {
            return Err(Error::shape("kl_divergence", &q.shape, &tp.shape));
        }
        if let Some(v) = q.data.iter().chain(&tp.data).find(|v| !(**v >= 0.0)) {
            return Err(Error::Validation(format!("negative probability {v} in KL input")));
        }
        let mut loss = 0.0;
        for (&qi, &pi) in q.data.iter().zip(&tp.data) {
            if qi > 0.0 {
                loss += qi * (qi.max(LOG_EPS).ln() - pi.max(LOG_EPS).ln());
            }
        }
        loss /= rows as f64;
        let _ = cols;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv {
                p,
                q: q.data.clone(),
            },
            &[p],
        ))
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(LOG_EPS);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let v = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push(v, Op::L2Normalize { x, norms }, &[x])
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            requires_grad: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.data.len()]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += s * v);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                let c = node.value.cols();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt(g, &tb.data, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn(&ta.data, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[0];
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul(g, &tb.data, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn(g, &ta.data, gb, m, n, k);
                }
            }
            Op::Softmax {
                x,
                temperature,
                n,
                inner,
            } => {
                let y = &node.value.data;
                let (n, inner) = (*n, *inner);
                let outer = y.len() / (n * inner);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let s: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - s) / temperature;
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * kernels::gelu_grad(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gam = &self.nodes[gamma.0].value.data;
                if let Some(gb) = self.acc(grads, *beta) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = c as f64;
                    let mut dh = vec![0.0; c];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = grow[j] * gam[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += is / nf * (nf * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.data.len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(o, &v)| *o += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * c + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.cols();
                let w = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, row) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            gx[i * c + start + j] += row[j];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let t = &self.nodes[logits.0].value;
                let (rows, cols) = (t.rows(), t.cols());
                if let Some(gl) = self.acc(grads, *logits) {
                    for r in 0..rows {
                        let row_mass: f64 = target[r * cols..(r + 1) * cols].iter().sum();
                        for j in 0..cols {
                            let idx = r * cols + j;
                            gl[idx] += g[0] * (probs[idx] * row_mass - target[idx]) / rows as f64;
                        }
                    }
                }
            }
            Op::KlDiv { p, q } => {
                let t = &self.nodes[p.0].value;
                let rows = t.rows() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for ((o, &qi), &pi) in gp.iter_mut().zip(q).zip(&t.data) {
                        if qi > 0.0 && pi > LOG_EPS {
                            *o -= g[0] * qi / (pi * rows);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                let y = &node.value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let d = kernels::dot(yr, gr);
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * d) / n;
                        }
                    }
                }
            }
        }
    }
}
