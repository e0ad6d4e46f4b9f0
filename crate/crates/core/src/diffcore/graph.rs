use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// RMS normalization epsilon, added inside the root.
pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Detached,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Silu(usize),
    Softmax(usize),
    Mean {
        a: usize,
        axis: usize,
    },
    Sum(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<S>,
    },
    Reshape(usize),
    SliceRows {
        a: usize,
        start: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        a: usize,
        idx: Vec<usize>,
    },
    Gather {
        a: usize,
        idx: Vec<usize>,
    },
    ScaleRows {
        a: usize,
        s: usize,
    },
    Combine {
        weights: usize,
        items: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order, so
/// backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of leaf tensors, keyed by node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn empty() -> Self {
        Gradients { grads: Vec::new() }
    }

    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<S> {
        self.get(var).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); len])
    }

    fn slot(&mut self, id: usize, len: usize) -> &mut Vec<S> {
        if self.grads.len() <= id {
            self.grads.resize(id + 1, None);
        }
        self.grads[id].get_or_insert_with(|| vec![S::zero(); len])
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same values as `x`; nothing upstream of the result sees a gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Detached, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (n, k2, rsb, csb) = if trans_b {
            (tb.shape()[0], tb.shape()[1], 1, tb.shape()[1] as isize)
        } else {
            (tb.shape()[1], tb.shape()[0], tb.shape()[1] as isize, 1)
        };
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            rsb,
            csb,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64_lossy(c);
        let ta = &self.nodes[a.0].value;
        let t = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * c);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::from_fn(ta.shape(), |i| {
            let x = ta.data()[i];
            x * sigmoid(x)
        });
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Silu(a.0), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false).expect("unmasked softmax accepts any shape")
    }

    /// Softmax over the last axis of a square matrix with entries above the
    /// diagonal masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = ta.dims2();
        if causal && (ta.shape().len() != 2 || rows != cols) {
            return Err(Error::shape("causal_softmax", ta.shape(), &[rows, rows]));
        }
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let width = if causal { r + 1 } else { cols };
            let src = &ta.data()[r * cols..r * cols + width];
            let dst = &mut out[r * cols..r * cols + width];
            let max = src.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Softmax(a.0), rg))
    }

    /// Arithmetic mean over `axis` of a rank-1 or rank-2 tensor; the axis is dropped.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        let (rows, cols) = match (shape.len(), axis) {
            (1, 0) => (shape[0], 1),
            (2, 0 | 1) => (shape[0], shape[1]),
            _ => return Err(Error::shape("mean_axis", shape, &[axis])),
        };
        let t = if shape.len() == 1 {
            let m = ta.data().iter().copied().sum::<S>() / S::from_usize(rows).unwrap();
            Tensor::scalar(m)
        } else if axis == 0 {
            let mut acc = vec![S::zero(); cols];
            for r in 0..rows {
                for (s, &v) in acc.iter_mut().zip(ta.row(r)) {
                    *s = *s + v;
                }
            }
            let inv = S::one() / S::from_usize(rows).unwrap();
            Tensor::from_vec(acc.into_iter().map(|v| v * inv).collect())
        } else {
            let inv = S::one() / S::from_usize(cols).unwrap();
            Tensor::from_vec((0..rows).map(|r| ta.row(r).iter().copied().sum::<S>() * inv).collect())
        };
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Mean { a: a.0, axis }, rg))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum::<S>();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if tt.shape().len() != 2 {
            return Err(Error::shape("embedding", tt.shape(), &[ids.len()]));
        }
        let (rows, cols) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let (rows, cols) = tx.dims2();
        if tg.len() != cols {
            return Err(Error::shape("rmsnorm", tx.shape(), tg.shape()));
        }
        let eps = S::from_f64_lossy(RMS_EPS);
        let n = S::from_usize(cols).unwrap();
        let mut out = Vec::with_capacity(rows * cols);
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<S>() / n;
            let inv = S::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(tg.data()).map(|(&v, &g)| v * inv * g));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0, gain.0]);
        Ok(self.push(
            t,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = ta.dims2();
        if ta.shape().len() != 2 || start >= end || end > rows {
            return Err(Error::shape("slice_rows", ta.shape(), &[start, end]));
        }
        let t = Tensor::new(vec![end - start, cols], ta.data()[start * cols..end * cols].to_vec())?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::SliceRows { a: a.0, start }, rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = ta.dims2();
        if ta.shape().len() != 2 || start >= end || end > cols {
            return Err(Error::shape("slice_cols", ta.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&ta.row(r)[start..end]);
        }
        let t = Tensor::new(vec![rows, end - start], out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::SliceCols { a: a.0, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.nodes[first.0].value.dims2().1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.shape()[1] != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.nodes[first.0].value.shape(),
                    t.shape(),
                ));
            }
            rows += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.nodes[first.0].value.dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.nodes[first.0].value.shape(),
                    t.shape(),
                ));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(ids), rg))
    }

    /// Rows of `a` at `idx`, in that order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = ta.dims2();
        if ta.shape().len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather_rows", ta.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(ta.row(i));
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// A `rows`-row zero matrix with row `i` of `a` added at row `idx[i]`.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, cols) = ta.dims2();
        if ta.shape().len() != 2 || m != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_rows", ta.shape(), &[idx.len(), rows]));
        }
        let mut out = vec![S::zero(); rows * cols];
        for (src, &dst) in idx.iter().enumerate() {
            for (o, &v) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(ta.row(src)) {
                *o = *o + v;
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ScatterRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Flat entries of `a` at `idx`, as a rank-1 tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if idx.is_empty() || idx.iter().any(|&i| i >= ta.len()) {
            return Err(Error::shape("gather", ta.shape(), &[idx.len()]));
        }
        let t = Tensor::from_vec(idx.iter().map(|&i| ta.data()[i]).collect());
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            t,
            Op::Gather {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Row `r` of `a` multiplied by `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let (rows, cols) = ta.dims2();
        if ta.shape().len() != 2 || ts.len() != rows {
            return Err(Error::shape("scale_rows", ta.shape(), ts.shape()));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let f = ts.data()[r];
            out.extend(ta.row(r).iter().map(|&v| v * f));
        }
        let rg = self.rg(&[a.0, s.0]);
        Ok(self.push(
            Tensor::new(ta.shape().to_vec(), out)?,
            Op::ScaleRows { a: a.0, s: s.0 },
            rg,
        ))
    }

    /// `Σ_i weights[i] · items[i]` over equally shaped items.
    pub fn combine(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let tw = &self.nodes[weights.0].value;
        if tw.len() != items.len() || items.is_empty() {
            return Err(Error::shape("combine", tw.shape(), &[items.len()]));
        }
        let shape = self.nodes[items[0].0].value.shape().to_vec();
        let mut out = vec![S::zero(); self.nodes[items[0].0].value.len()];
        for (i, it) in items.iter().enumerate() {
            let t = &self.nodes[it.0].value;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("combine", &shape, t.shape()));
            }
            let w = tw.data()[i];
            for (o, &v) in out.iter_mut().zip(t.data()) {
                *o = *o + w * v;
            }
        }
        let mut ids = vec![weights.0];
        ids.extend(items.iter().map(|v| v.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Combine {
                weights: weights.0,
                items: items.iter().map(|v| v.0).collect(),
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy (nats) of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (rows, cols) = tl.dims2();
        if tl.shape().len() != 2 || rows != targets.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Contract(format!("target {bad} out of range for {cols} classes")));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = 0.0f64;
        for (r, &target) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += (log_z - row[target]).as_f64();
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = S::from_f64_lossy(total / rows as f64);
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let mut grads = Gradients::empty();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Graph::backward`], adding into existing gradients.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients<S>) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut work: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = out.slot(id, g.len());
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s = *s + *v;
                }
                continue;
            }
            self.propagate(id, &g, &mut work);
        }
        Ok(())
    }

    fn acc<'w>(&self, work: &'w mut [Option<Vec<S>>], id: usize) -> Option<&'w mut Vec<S>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(work[id].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn propagate(&self, id: usize, g: &[S], work: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if let Some(ga) = self.acc(work, *a) {
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    S::gemm(
                        m,
                        n,
                        k,
                        g,
                        n as isize,
                        1,
                        tb.data(),
                        rsb,
                        csb,
                        S::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = self.acc(work, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        S::gemm(
                            n,
                            m,
                            k,
                            g,
                            1,
                            n as isize,
                            ta.data(),
                            k as isize,
                            1,
                            S::one(),
                            gb,
                            k as isize,
                            1,
                        );
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        S::gemm(
                            k,
                            m,
                            n,
                            ta.data(),
                            1,
                            k as isize,
                            g,
                            n as isize,
                            1,
                            S::one(),
                            gb,
                            n as isize,
                            1,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for (src, sign) in [(*a, S::one()), (*b, S::one())] {
                    if let Some(ga) = self.acc(work, src) {
                        axpy(ga, g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (src, sign) in [(*a, S::one()), (*b, -S::one())] {
                    if let Some(ga) = self.acc(work, src) {
                        axpy(ga, g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.acc(work, *a) {
                    for ((s, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *s = *s + gi * bi;
                    }
                }
                if let Some(gb) = self.acc(work, *b) {
                    for ((s, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *s = *s + gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(work, *a) {
                    axpy(ga, g, *c);
                }
            }
            Op::Silu(a) => {
                let x = self.nodes[*a].value.data();
                if let Some(ga) = self.acc(work, *a) {
                    for ((s, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        let sg = sigmoid(xi);
                        *s = *s + gi * sg * (S::one() + xi * (S::one() - sg));
                    }
                }
            }
            Op::Softmax(a) => {
                let (rows, cols) = node.value.dims2();
                if let Some(ga) = self.acc(work, *a) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((s, &p), &q) in ga[span].iter_mut().zip(yr).zip(gr) {
                            *s = *s + p * (q - dot);
                        }
                    }
                }
            }
            Op::Mean { a, axis } => {
                let ta = &self.nodes[*a].value;
                if let Some(ga) = self.acc(work, *a) {
                    if ta.shape().len() == 1 {
                        let v = g[0] / S::from_usize(ta.len()).unwrap();
                        ga.iter_mut().for_each(|s| *s = *s + v);
                    } else {
                        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                        if *axis == 0 {
                            let inv = S::one() / S::from_usize(rows).unwrap();
                            for r in 0..rows {
                                for (s, &gi) in ga[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                                    *s = *s + gi * inv;
                                }
                            }
                        } else {
                            let inv = S::one() / S::from_usize(cols).unwrap();
                            for r in 0..rows {
                                let v = g[r] * inv;
                                ga[r * cols..(r + 1) * cols].iter_mut().for_each(|s| *s = *s + v);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(work, *a) {
                    ga.iter_mut().for_each(|s| *s = *s + g[0]);
                }
            }
            Op::Embedding { table, ids } => {
                let cols = self.nodes[*table].value.shape()[1];
                if let Some(gt) = self.acc(work, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(
                            &mut gt[i * cols..(i + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            S::one(),
                        );
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (&self.nodes[*x].value, &self.nodes[*gain].value);
                let (rows, cols) = tx.dims2();
                let n = S::from_usize(cols).unwrap();
                if let Some(gx) = self.acc(work, *x) {
                    for r in 0..rows {
                        let xr = tx.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inv = inv_rms[r];
                        let dot: S = xr.iter().zip(gr).zip(tg.data()).map(|((&a, &b), &w)| a * b * w).sum();
                        let coef = inv * inv * inv * dot / n;
                        for (j, s) in gx[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                            *s = *s + inv * tg.data()[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if let Some(gg) = self.acc(work, *gain) {
                    for r in 0..rows {
                        let xr = tx.row(r);
                        let inv = inv_rms[r];
                        for (j, s) in gg.iter_mut().enumerate() {
                            *s = *s + g[r * cols + j] * xr[j] * inv;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(work, *a) {
                    axpy(ga, g, S::one());
                }
            }
            Op::SliceRows { a, start } => {
                let cols = node.value.shape()[1];
                if let Some(ga) = self.acc(work, *a) {
                    axpy(&mut ga[start * cols..start * cols + g.len()], g, S::one());
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, width) = node.value.dims2();
                let cols = self.nodes[*a].value.shape()[1];
                if let Some(ga) = self.acc(work, *a) {
                    for r in 0..rows {
                        axpy(
                            &mut ga[r * cols + start..r * cols + start + width],
                            &g[r * width..(r + 1) * width],
                            S::one(),
                        );
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(gp) = self.acc(work, p) {
                        axpy(gp, &g[offset..offset + len], S::one());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut col = 0;
                for &p in parts {
                    let width = self.nodes[p].value.shape()[1];
                    if let Some(gp) = self.acc(work, p) {
                        for r in 0..rows {
                            axpy(
                                &mut gp[r * width..(r + 1) * width],
                                &g[r * total + col..r * total + col + width],
                                S::one(),
                            );
                        }
                    }
                    col += width;
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.shape()[1];
                if let Some(ga) = self.acc(work, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(
                            &mut ga[i * cols..(i + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            S::one(),
                        );
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                let cols = node.value.shape()[1];
                if let Some(ga) = self.acc(work, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(
                            &mut ga[r * cols..(r + 1) * cols],
                            &g[i * cols..(i + 1) * cols],
                            S::one(),
                        );
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(ga) = self.acc(work, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        ga[i] = ga[i] + g[r];
                    }
                }
            }
            Op::ScaleRows { a, s } => {
                let (ta, ts) = (&self.nodes[*a].value, &self.nodes[*s].value);
                let (rows, cols) = ta.dims2();
                if let Some(ga) = self.acc(work, *a) {
                    for r in 0..rows {
                        axpy(
                            &mut ga[r * cols..(r + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                            ts.data()[r],
                        );
                    }
                }
                if let Some(gs) = self.acc(work, *s) {
                    for (r, gsr) in gs.iter_mut().enumerate().take(rows) {
                        let dot: S = ta
                            .row(r)
                            .iter()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .map(|(&p, &q)| p * q)
                            .sum();
                        *gsr = *gsr + dot;
                    }
                }
            }
            Op::Combine { weights, items } => {
                let tw = self.nodes[*weights].value.data().to_vec();
                if let Some(gw) = self.acc(work, *weights) {
                    for (i, &it) in items.iter().enumerate() {
                        let v = self.nodes[it].value.data();
                        gw[i] = gw[i] + v.iter().zip(g).map(|(&p, &q)| p * q).sum::<S>();
                    }
                }
                for (i, &it) in items.iter().enumerate() {
                    if let Some(gi) = self.acc(work, it) {
                        axpy(gi, g, tw[i]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.nodes[*logits].value.shape()[1];
                let scale = g[0] / S::from_usize(targets.len()).unwrap();
                if let Some(gl) = self.acc(work, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * cols..(r + 1) * cols];
                        for (s, &p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *s = *s + p * scale;
                        }
                        row[t] = row[t] - scale;
                    }
                }
            }
        }
    }
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S], alpha: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}
