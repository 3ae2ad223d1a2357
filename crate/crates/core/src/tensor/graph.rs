//! The tape. Every op appends a node holding its value and enough state to
//! run its backward rule; [`Graph::backward`] walks the nodes in reverse
//! creation order, so each node is visited exactly once.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{bail, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Token layout for the fine-grained similarity op: `offsets[b]..offsets[b+1]`
/// are the rows belonging to sample `b`.
#[derive(Clone, Debug)]
pub struct Segments(pub Vec<usize>);

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut off = Vec::with_capacity(lengths.len() + 1);
        off.push(0);
        for l in lengths {
            off.push(off.last().unwrap() + l);
        }
        Segments(off)
    }
    pub fn count(&self) -> usize {
        self.0.len() - 1
    }
    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.0[b]..self.0[b + 1]
    }
    pub fn total(&self) -> usize {
        *self.0.last().unwrap()
    }
}

enum Op<S: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    ClampMax(Var, S),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    L2NormRows { x: Var, norms: Vec<S> },
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Pick { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    Conv1d { x: Var, w: Var, dilation: usize },
    Similarity(Box<SimState<S>>),
}

struct SimState<S: Real> {
    et: Var,
    wt: Var,
    ev: Var,
    wv: Var,
    tseg: Segments,
    vseg: Segments,
    dots: Vec<S>,
    // per (a, b): best video row for each text row of a, best text row for each video row of b
    best_v: Vec<Vec<usize>>,
    best_t: Vec<Vec<usize>>,
}

struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A reverse-mode differentiation tape, optionally bound to a parameter store.
pub struct Graph<'p, S: Real = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    params: Option<&'p ParamStore<S>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
}

impl<'p, S: Real> Default for Graph<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Real> Graph<'p, S> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), params: None, bound: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// Graph whose [`Graph::param`] lookups resolve against `store`.
    /// Frozen (non-trainable) parameters enter as constants.
    pub fn with_params(store: &'p ParamStore<S>) -> Self {
        Graph { params: Some(store), ..Self::new() }
    }

    /// Graph that records no gradients at all.
    pub fn inference(store: &'p ParamStore<S>) -> Self {
        Graph { params: Some(store), grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            bail!(Numeric, "non-finite value produced by {}", op_name(&op));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Ok(Var(nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Same value as `v` with the gradient path cut.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let t = self.to_tensor(v);
        self.input(t)
    }

    /// Bind a parameter from the attached store (memoised per graph).
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let store = self.params.expect("graph has no parameter store bound");
        let t = store.get(id).clone();
        let trainable = store.is_trainable(id);
        // parameter values are finite by construction, so push cannot fail here
        let v = self.push(t, Op::Leaf, trainable).expect("non-finite parameter");
        self.bound.borrow_mut().insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            bail!(Shape, "{what}: shapes {sa:?} and {sb:?} differ");
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        Tensor { shape: x.shape.clone(), data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect() }
    }

    fn unary(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        self.nodes.borrow()[a.0].value.map(f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), self.ng(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), self.ng(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), self.ng(&[a, b]))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let t = self.zip_map(a, b, |x, y| x / y);
        self.push(t, Op::Div(a, b), self.ng(&[a, b]))
    }

    fn row_broadcast(&self, x: Var, r: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let nodes = self.nodes.borrow();
        let (xv, rv) = (&nodes[x.0].value, &nodes[r.0].value);
        let (_, c) = xv.dims2();
        if rv.len() != c {
            bail!(Shape, "{what}: row vector of length {} against {:?}", rv.len(), xv.shape());
        }
        let data = xv.data.iter().enumerate().map(|(i, &v)| f(v, rv.data[i % c])).collect();
        Ok(Tensor { shape: xv.shape.clone(), data })
    }

    /// `x[N,D] + b[D]` broadcast over rows.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast(x, b, "add_row", |p, q| p + q)?;
        self.push(t, Op::AddRow(x, b), self.ng(&[x, b]))
    }

    /// `x[N,D] * g[D]` broadcast over rows.
    pub fn mul_row(&self, x: Var, g: Var) -> Result<Var> {
        let t = self.row_broadcast(x, g, "mul_row", |p, q| p * q)?;
        self.push(t, Op::MulRow(x, g), self.ng(&[x, g]))
    }

    /// `x * s` where `s` is a one-element tensor.
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let sv = {
            let v = self.value(s);
            if v.len() != 1 {
                bail!(Shape, "mul_scalar_var needs a scalar, got {:?}", v.shape());
            }
            v.data[0]
        };
        let t = self.unary(x, |p| p * sv);
        self.push(t, Op::MulScalarVar(x, s), self.ng(&[x, s]))
    }

    pub fn scale(&self, x: Var, c: S) -> Result<Var> {
        let t = self.unary(x, |p| p * c);
        self.push(t, Op::Scale(x, c), self.ng(&[x]))
    }

    pub fn add_scalar(&self, x: Var, c: S) -> Result<Var> {
        let t = self.unary(x, |p| p + c);
        self.push(t, Op::AddScalar(x), self.ng(&[x]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
                bail!(Shape, "matmul: {:?} x {:?}", av.shape, bv.shape);
            }
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut out = vec![S::zero(); m * n];
            gemm_nn(&av.data, &bv.data, &mut out, m, k, n);
            Tensor { shape: vec![m, n], data: out }
        };
        self.push(t, Op::MatMul(a, b), self.ng(&[a, b]))
    }

    /// `a[m,k] * b[n,k]^T`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[1] {
                bail!(Shape, "matmul_nt: {:?} x {:?}^T", av.shape, bv.shape);
            }
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[0]);
            let mut out = vec![S::zero(); m * n];
            gemm_nt(&av.data, &bv.data, &mut out, m, k, n);
            Tensor { shape: vec![m, n], data: out }
        };
        self.push(t, Op::MatMulNT(a, b), self.ng(&[a, b]))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            if v.rank() != 2 {
                bail!(Shape, "transpose needs rank 2, got {:?}", v.shape());
            }
            let (r, c) = (v.shape[0], v.shape[1]);
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v.data[i * c + j];
                }
            }
            Tensor { shape: vec![c, r], data: out }
        };
        self.push(t, Op::Transpose(x), self.ng(&[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x), self.ng(&[x]))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let t = self.unary(x, |p| p.max(S::zero()));
        self.push(t, Op::Relu(x), self.ng(&[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        let t = self.unary(x, gelu_fwd);
        self.push(t, Op::Gelu(x), self.ng(&[x]))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let t = self.unary(x, |p| p.exp());
        self.push(t, Op::Exp(x), self.ng(&[x]))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        let t = self.unary(x, |p| p.ln());
        self.push(t, Op::Log(x), self.ng(&[x]))
    }

    pub fn clamp_max(&self, x: Var, c: S) -> Result<Var> {
        let t = self.unary(x, |p| p.min(c));
        self.push(t, Op::ClampMax(x, c), self.ng(&[x]))
    }

    /// Softmax along the last axis, stabilised by max subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (r, c) = v.dims2();
            let mut out = v.data.clone();
            for i in 0..r {
                softmax_in_place(&mut out[i * c..(i + 1) * c]);
            }
            Tensor { shape: v.shape.clone(), data: out }
        };
        self.push(t, Op::Softmax(x), self.ng(&[x]))
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (r, c) = v.dims2();
            let mut out = v.data.clone();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|p| *p -= lse);
            }
            Tensor { shape: v.shape.clone(), data: out }
        };
        self.push(t, Op::LogSoftmax(x), self.ng(&[x]))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let (r, c) = xv.dims2();
            if gv.len() != c || bv.len() != c {
                bail!(Shape, "layer_norm: affine params of length {} / {} for width {c}", gv.len(), bv.len());
            }
            let mut xhat = vec![S::zero(); r * c];
            let mut rstd = vec![S::zero(); r];
            let mut out = vec![S::zero(); r * c];
            let n = S::lit(c as f64);
            for i in 0..r {
                let row = &xv.data[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<S>() / n;
                let var = row.iter().map(|&p| (p - mean) * (p - mean)).sum::<S>() / n;
                let rs = S::one() / (var + S::lit(eps)).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * gv.data[j] + bv.data[j];
                }
            }
            (Tensor { shape: xv.shape.clone(), data: out }, xhat, rstd)
        };
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, self.ng(&[x, gamma, beta]))
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Result<Var> {
        let (t, norms) = {
            let v = self.value(x);
            let (r, c) = v.dims2();
            let mut out = v.data.clone();
            let mut norms = vec![S::zero(); r];
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let n = dot(row, row).sqrt().max(S::lit(1e-12));
                norms[i] = n;
                row.iter_mut().for_each(|p| *p /= n);
            }
            (Tensor { shape: v.shape.clone(), data: out }, norms)
        };
        self.push(t, Op::L2NormRows { x, norms }, self.ng(&[x]))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.ng(&[x]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let s = {
            let v = self.value(x);
            v.data.iter().copied().sum::<S>() / S::lit(v.len() as f64)
        };
        self.push(Tensor::scalar(s), Op::MeanAll(x), self.ng(&[x]))
    }

    /// `[N,D] -> [D]`, summing over rows.
    pub fn sum_rows(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (r, c) = v.dims2();
            let mut out = vec![S::zero(); c];
            for i in 0..r {
                for (o, &p) in out.iter_mut().zip(&v.data[i * c..(i + 1) * c]) {
                    *o += p;
                }
            }
            Tensor { shape: vec![c], data: out }
        };
        self.push(t, Op::SumRows(x), self.ng(&[x]))
    }

    /// `[N,D] -> [N]`, summing over columns.
    pub fn sum_cols(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (r, c) = v.dims2();
            let out = (0..r).map(|i| v.data[i * c..(i + 1) * c].iter().copied().sum()).collect();
            Tensor { shape: vec![r], data: out }
        };
        self.push(t, Op::SumCols(x), self.ng(&[x]))
    }

    /// Rows of a matrix by index (embedding lookup, slicing, repetition).
    pub fn gather_rows(&self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(src);
            let (r, c) = v.dims2();
            if idx.is_empty() {
                bail!(Shape, "gather_rows with no indices");
            }
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    bail!(Index, "row {i} out of range for {r} rows");
                }
                out.extend_from_slice(&v.data[i * c..(i + 1) * c]);
            }
            Tensor { shape: vec![idx.len(), c], data: out }
        };
        self.push(t, Op::GatherRows { src, idx: idx.to_vec() }, self.ng(&[src]))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let Some(first) = parts.first() else { bail!(Shape, "concat_rows of nothing") };
            let c = nodes[first.0].value.dims2().1;
            let mut out = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                let (r, pc) = v.dims2();
                if pc != c {
                    bail!(Shape, "concat_rows: width {pc} vs {c}");
                }
                rows += r;
                out.extend_from_slice(&v.data);
            }
            Tensor { shape: vec![rows, c], data: out }
        };
        self.push(t, Op::ConcatRows(parts.to_vec()), self.ng(parts))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let Some(first) = parts.first() else { bail!(Shape, "concat_cols of nothing") };
            let r = nodes[first.0].value.dims2().0;
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.dims2().1).collect();
            if parts.iter().any(|p| nodes[p.0].value.dims2().0 != r) {
                bail!(Shape, "concat_cols: row counts differ");
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data[i * w..(i + 1) * w]);
                }
            }
            Tensor { shape: vec![r, total], data: out }
        };
        self.push(t, Op::ConcatCols(parts.to_vec()), self.ng(parts))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (r, c) = v.dims2();
            if len == 0 || start + len > c {
                bail!(Shape, "slice_cols {start}..{} of width {c}", start + len);
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&v.data[i * c + start..i * c + start + len]);
            }
            Tensor { shape: vec![r, len], data: out }
        };
        self.push(t, Op::SliceCols { x, start }, self.ng(&[x]))
    }

    /// `[N,K] -> [N]` picking column `idx[i]` of row `i`.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (r, c) = v.dims2();
            if idx.len() != r {
                bail!(Shape, "pick: {} indices for {r} rows", idx.len());
            }
            let mut out = Vec::with_capacity(r);
            for (i, &j) in idx.iter().enumerate() {
                if j >= c {
                    bail!(Index, "pick: column {j} out of range {c}");
                }
                out.push(v.data[i * c + j]);
            }
            Tensor { shape: vec![r], data: out }
        };
        self.push(t, Op::Pick { x, idx: idx.to_vec() }, self.ng(&[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits[N,K]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let v = self.value(logits);
            let (r, c) = v.dims2();
            if targets.len() != r {
                bail!(Shape, "cross_entropy: {} targets for {r} rows", targets.len());
            }
            let mut probs = v.data.clone();
            let mut total = 0.0f64;
            for (i, &t) in targets.iter().enumerate() {
                if t >= c {
                    bail!(Index, "target class {t} out of range for {c} classes");
                }
                let row = &mut probs[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                total += (lse - row[t]).as_f64();
                row.iter_mut().for_each(|p| *p = (*p - lse).exp());
            }
            (S::lit(total / r as f64), probs)
        };
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, self.ng(&[logits]))
    }

    /// Same-padded dilated temporal convolution.
    ///
    /// `x` is `[T, C_in]`, `w` is `[k, C_in, C_out]` with odd `k`; output is
    /// `[T, C_out]` with `out[t] = sum_j x[t + (j - k/2) * dilation] W_j`,
    /// zeros outside the sequence.
    pub fn conv1d(&self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            if wv.rank() != 3 {
                bail!(Shape, "conv1d kernel must be [k, C_in, C_out], got {:?}", wv.shape());
            }
            let (k, cin, cout) = (wv.shape[0], wv.shape[1], wv.shape[2]);
            if k % 2 == 0 {
                bail!(Config, "conv1d kernel length must be odd, got {k}");
            }
            if dilation == 0 {
                bail!(Config, "conv1d dilation must be positive");
            }
            let (len, c) = xv.dims2();
            if c != cin {
                bail!(Shape, "conv1d: input width {c} vs kernel C_in {cin}");
            }
            let mut out = vec![S::zero(); len * cout];
            for j in 0..k {
                let off = (j as isize - (k / 2) as isize) * dilation as isize;
                if let Some((o0, i0, n)) = tap_range(len, off) {
                    gemm_nn(
                        &xv.data[i0 * cin..(i0 + n) * cin],
                        &wv.data[j * cin * cout..(j + 1) * cin * cout],
                        &mut out[o0 * cout..(o0 + n) * cout],
                        n,
                        cin,
                        cout,
                    );
                }
            }
            Tensor { shape: vec![len, cout], data: out }
        };
        self.push(t, Op::Conv1d { x, w, dilation }, self.ng(&[x, w]))
    }

    /// Fine-grained bidirectional similarity between every text sample and
    /// every video sample.
    ///
    /// `et[Nt, D]` / `ev[Nv, D]` hold token embeddings of all samples stacked
    /// along rows, partitioned by `tseg` / `vseg`; `wt[Nt]` / `wv[Nv]` are the
    /// per-token weights. Entry `(a, b)` of the `[A, B]` output is
    /// `1/2 * sum_i wt_i * max_j <et_i, ev_j> + 1/2 * sum_j wv_j * max_i <et_i, ev_j>`
    /// with `i` ranging over sample `a`'s text rows and `j` over sample `b`'s video rows.
    pub fn similarity_matrix(&self, et: Var, wt: Var, tseg: Segments, ev: Var, wv: Var, vseg: Segments) -> Result<Var> {
        let (out, dots, best_v, best_t) = {
            let nodes = self.nodes.borrow();
            let (etv, wtv, evv, wvv) = (&nodes[et.0].value, &nodes[wt.0].value, &nodes[ev.0].value, &nodes[wv.0].value);
            let (nt, d) = etv.dims2();
            let (nv, d2) = evv.dims2();
            if d != d2 {
                bail!(Shape, "similarity: embedding widths {d} vs {d2}");
            }
            if tseg.total() != nt || vseg.total() != nv || wtv.len() != nt || wvv.len() != nv {
                bail!(Shape, "similarity: segment layout does not match token counts");
            }
            if (0..tseg.count()).any(|a| tseg.range(a).is_empty()) || (0..vseg.count()).any(|b| vseg.range(b).is_empty()) {
                bail!(Input, "similarity: empty token set");
            }
            let mut dots = vec![S::zero(); nt * nv];
            gemm_nt(&etv.data, &evv.data, &mut dots, nt, d, nv);
            let (na, nb) = (tseg.count(), vseg.count());
            let mut out = vec![S::zero(); na * nb];
            let mut best_v = Vec::with_capacity(na * nb);
            let mut best_t = Vec::with_capacity(na * nb);
            let half = S::lit(0.5);
            for a in 0..na {
                for b in 0..nb {
                    let (tr, vr) = (tseg.range(a), vseg.range(b));
                    let mut bv = Vec::with_capacity(tr.len());
                    let mut text_side = S::zero();
                    for i in tr.clone() {
                        let row = &dots[i * nv..(i + 1) * nv];
                        let (arg, m) = argmax(&row[vr.clone()]);
                        bv.push(vr.start + arg);
                        text_side += wtv.data[i] * m;
                    }
                    let mut bt = Vec::with_capacity(vr.len());
                    let mut video_side = S::zero();
                    for j in vr.clone() {
                        let mut arg = tr.start;
                        let mut m = dots[tr.start * nv + j];
                        for i in tr.clone().skip(1) {
                            if dots[i * nv + j] > m {
                                m = dots[i * nv + j];
                                arg = i;
                            }
                        }
                        bt.push(arg);
                        video_side += wvv.data[j] * m;
                    }
                    out[a * nb + b] = half * text_side + half * video_side;
                    best_v.push(bv);
                    best_t.push(bt);
                }
            }
            (Tensor { shape: vec![na, nb], data: out }, dots, best_v, best_t)
        };
        let ng = self.ng(&[et, wt, ev, wv]);
        self.push(out, Op::Similarity(Box::new(SimState { et, wt, ev, wv, tseg, vseg, dots, best_v, best_t })), ng)
    }

    /// Reverse pass from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one(); nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        let params = self.bound.borrow().iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Graph::backward`]: gradients of differentiable leaves.
pub struct Gradients<S: Real> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of a leaf; `None` if the root did not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of bound trainable parameters, sorted by id.
    pub fn params(&self) -> Vec<(ParamId, &[S])> {
        let mut out: Vec<_> = self.params.iter().filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g))).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    /// Owned copy of [`Gradients::params`], ready for clipping and optimiser steps.
    pub fn into_param_grads(self) -> Vec<(ParamId, Vec<S>)> {
        let mut grads = self.grads;
        let mut out: Vec<_> = self.params.iter().filter_map(|(p, v)| grads[v.0].take().map(|g| (*p, g))).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn op_name<S: Real>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::MulScalarVar(..) => "mul_scalar_var",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::ClampMax(..) => "clamp_max",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::L2NormRows { .. } => "l2_normalize_rows",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::SumRows(..) => "sum_rows",
        Op::SumCols(..) => "sum_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::Pick { .. } => "pick",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Conv1d { .. } => "conv1d",
        Op::Similarity(..) => "similarity_matrix",
    }
}

fn argmax<S: Real>(xs: &[S]) -> (usize, S) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Output rows `o0..o0+n` read input rows `i0..i0+n` for a tap at offset `off`.
fn tap_range(len: usize, off: isize) -> Option<(usize, usize, usize)> {
    let len = len as isize;
    let o0 = (-off).max(0);
    let o1 = (len - off).min(len);
    if o1 <= o0 {
        return None;
    }
    Some((o0 as usize, (o0 + off) as usize, (o1 - o0) as usize))
}

pub(crate) fn log_sum_exp<S: Real>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    m + row.iter().map(|&p| (p - m).exp()).sum::<S>().ln()
}

pub(crate) fn softmax_in_place<S: Real>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for p in row.iter_mut() {
        *p = (*p - m).exp();
        z += *p;
    }
    row.iter_mut().for_each(|p| *p /= z);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    S::lit(0.5) * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::lit(3.0 * 0.044715) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dinner
}

fn accumulate<S: Real>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
    f(slot);
}

fn backprop<S: Real>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| axpy(S::one(), g, s));
            accumulate(nodes, grads, *b, |s| axpy(S::one(), g, s));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| axpy(S::one(), g, s));
            accumulate(nodes, grads, *b, |s| axpy(-S::one(), g, s));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).zip(bv).for_each(|((s, &g), &b)| *s += g * b));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).zip(av).for_each(|((s, &g), &a)| *s += g * a));
        }
        Op::Div(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).zip(bv).for_each(|((s, &g), &b)| *s += g / b));
            accumulate(nodes, grads, *b, |s| {
                for k in 0..s.len() {
                    s[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                }
            });
        }
        Op::AddRow(x, b) => {
            accumulate(nodes, grads, *x, |s| axpy(S::one(), g, s));
            let c = val(*b).len();
            accumulate(nodes, grads, *b, |s| {
                for (k, &gk) in g.iter().enumerate() {
                    s[k % c] += gk;
                }
            });
        }
        Op::MulRow(x, r) => {
            let (xv, rv) = (&val(*x).data, &val(*r).data);
            let c = rv.len();
            accumulate(nodes, grads, *x, |s| {
                for (k, &gk) in g.iter().enumerate() {
                    s[k] += gk * rv[k % c];
                }
            });
            accumulate(nodes, grads, *r, |s| {
                for (k, &gk) in g.iter().enumerate() {
                    s[k % c] += gk * xv[k];
                }
            });
        }
        Op::MulScalarVar(x, sc) => {
            let sv = val(*sc).data[0];
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |s| axpy(sv, g, s));
            accumulate(nodes, grads, *sc, |s| s[0] += dot(g, xv));
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, |s| axpy(*c, g, s)),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |s| axpy(S::one(), g, s)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            accumulate(nodes, grads, *a, |s| gemm_nt(g, &bv.data, s, m, n, k));
            accumulate(nodes, grads, *b, |s| gemm_tn(&av.data, g, s, m, k, n));
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[0]);
            // out = a b^T: da = g b, db = g^T a
            accumulate(nodes, grads, *a, |s| gemm_nn(g, &bv.data, s, m, n, k));
            accumulate(nodes, grads, *b, |s| gemm_tn(g, &av.data, s, m, n, k));
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape[0], out.shape[1]);
            accumulate(nodes, grads, *x, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] += g[i * c + j];
                    }
                }
            });
        }
        Op::Relu(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |s| {
                for k in 0..s.len() {
                    if xv[k] > S::zero() {
                        s[k] += g[k];
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * gelu_grad(xv[k]);
                }
            });
        }
        Op::Exp(x) => accumulate(nodes, grads, *x, |s| {
            for k in 0..s.len() {
                s[k] += g[k] * out.data[k];
            }
        }),
        Op::Log(x) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] / xv[k];
                }
            });
        }
        Op::ClampMax(x, c) => {
            let xv = &val(*x).data;
            accumulate(nodes, grads, *x, |s| {
                for k in 0..s.len() {
                    if xv[k] < *c {
                        s[k] += g[k];
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let (r, c) = out.dims2();
            accumulate(nodes, grads, *x, |s| {
                for i in 0..r {
                    let y = &out.data[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let inner = dot(y, gy);
                    for j in 0..c {
                        s[i * c + j] += y[j] * (gy[j] - inner);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let (r, c) = out.dims2();
            accumulate(nodes, grads, *x, |s| {
                for i in 0..r {
                    let gy = &g[i * c..(i + 1) * c];
                    let total: S = gy.iter().copied().sum();
                    for j in 0..c {
                        s[i * c + j] += gy[j] - out.data[i * c + j].exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (r, c) = out.dims2();
            let gv = &val(*gamma).data;
            accumulate(nodes, grads, *gamma, |s| {
                for k in 0..g.len() {
                    s[k % c] += g[k] * xhat[k];
                }
            });
            accumulate(nodes, grads, *beta, |s| {
                for k in 0..g.len() {
                    s[k % c] += g[k];
                }
            });
            accumulate(nodes, grads, *x, |s| {
                let n = S::lit(c as f64);
                for i in 0..r {
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..c {
                        let dh = g[i * c + j] * gv[j];
                        m1 += dh;
                        m2 += dh * xhat[i * c + j];
                    }
                    m1 /= n;
                    m2 /= n;
                    for j in 0..c {
                        let dh = g[i * c + j] * gv[j];
                        s[i * c + j] += rstd[i] * (dh - m1 - xhat[i * c + j] * m2);
                    }
                }
            });
        }
        Op::L2NormRows { x, norms } => {
            let (r, c) = out.dims2();
            accumulate(nodes, grads, *x, |s| {
                for i in 0..r {
                    let y = &out.data[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let inner = dot(y, gy);
                    for j in 0..c {
                        s[i * c + j] += (gy[j] - y[j] * inner) / norms[i];
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(nodes, grads, *x, |s| s.iter_mut().for_each(|p| *p += g[0])),
        Op::MeanAll(x) => {
            let n = S::lit(val(*x).len() as f64);
            accumulate(nodes, grads, *x, |s| s.iter_mut().for_each(|p| *p += g[0] / n));
        }
        Op::SumRows(x) => {
            let c = out.len();
            accumulate(nodes, grads, *x, |s| {
                for (k, p) in s.iter_mut().enumerate() {
                    *p += g[k % c];
                }
            });
        }
        Op::SumCols(x) => {
            let (_, c) = val(*x).dims2();
            accumulate(nodes, grads, *x, |s| {
                for (k, p) in s.iter_mut().enumerate() {
                    *p += g[k / c];
                }
            });
        }
        Op::GatherRows { src, idx } => {
            let c = out.dims2().1;
            accumulate(nodes, grads, *src, |s| {
                for (r, &i) in idx.iter().enumerate() {
                    axpy(S::one(), &g[r * c..(r + 1) * c], &mut s[i * c..(i + 1) * c]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(*p).len();
                accumulate(nodes, grads, *p, |s| axpy(S::one(), &g[off..off + n], s));
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = out.dims2();
            let mut start = 0;
            for p in parts {
                let w = val(*p).dims2().1;
                accumulate(nodes, grads, *p, |s| {
                    for i in 0..r {
                        axpy(S::one(), &g[i * total + start..i * total + start + w], &mut s[i * w..(i + 1) * w]);
                    }
                });
                start += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (r, w) = out.dims2();
            let c = val(*x).dims2().1;
            accumulate(nodes, grads, *x, |s| {
                for i in 0..r {
                    axpy(S::one(), &g[i * w..(i + 1) * w], &mut s[i * c + start..i * c + start + w]);
                }
            });
        }
        Op::Pick { x, idx } => {
            let c = val(*x).dims2().1;
            accumulate(nodes, grads, *x, |s| {
                for (i, &j) in idx.iter().enumerate() {
                    s[i * c + j] += g[i];
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = val(*logits).dims2().1;
            let n = S::lit(targets.len() as f64);
            accumulate(nodes, grads, *logits, |s| {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let y = if j == t { S::one() } else { S::zero() };
                        s[i * c + j] += g[0] * (probs[i * c + j] - y) / n;
                    }
                }
            });
        }
        Op::Conv1d { x, w, dilation } => {
            let (xv, wv) = (val(*x), val(*w));
            let (k, cin, cout) = (wv.shape[0], wv.shape[1], wv.shape[2]);
            let len = xv.dims2().0;
            for j in 0..k {
                let off = (j as isize - (k / 2) as isize) * *dilation as isize;
                let Some((o0, i0, n)) = tap_range(len, off) else { continue };
                let gs = &g[o0 * cout..(o0 + n) * cout];
                let wj = &wv.data[j * cin * cout..(j + 1) * cin * cout];
                accumulate(nodes, grads, *x, |s| gemm_nt(gs, wj, &mut s[i0 * cin..(i0 + n) * cin], n, cout, cin));
                accumulate(nodes, grads, *w, |s| {
                    gemm_tn(&xv.data[i0 * cin..(i0 + n) * cin], gs, &mut s[j * cin * cout..(j + 1) * cin * cout], n, cin, cout)
                });
            }
        }
        Op::Similarity(st) => {
            let SimState { et, wt, ev, wv, tseg, vseg, dots, best_v, best_t } = st.as_ref();
            let (etv, evv) = (val(*et), val(*ev));
            let (wtv, wvv) = (&val(*wt).data, &val(*wv).data);
            let (nt, d) = etv.dims2();
            let nv = evv.dims2().0;
            let nb = vseg.count();
            let half = S::lit(0.5);
            let mut ddots = vec![S::zero(); nt * nv];
            let mut dwt = vec![S::zero(); nt];
            let mut dwv = vec![S::zero(); nv];
            for a in 0..tseg.count() {
                for b in 0..nb {
                    let gab = g[a * nb + b] * half;
                    let pair = a * nb + b;
                    for (r, i) in tseg.range(a).enumerate() {
                        let j = best_v[pair][r];
                        dwt[i] += gab * dots[i * nv + j];
                        ddots[i * nv + j] += gab * wtv[i];
                    }
                    for (r, j) in vseg.range(b).enumerate() {
                        let i = best_t[pair][r];
                        dwv[j] += gab * dots[i * nv + j];
                        ddots[i * nv + j] += gab * wvv[j];
                    }
                }
            }
            accumulate(nodes, grads, *wt, |s| axpy(S::one(), &dwt, s));
            accumulate(nodes, grads, *wv, |s| axpy(S::one(), &dwv, s));
            accumulate(nodes, grads, *et, |s| gemm_nn(&ddots, &evv.data, s, nt, nv, d));
            accumulate(nodes, grads, *ev, |s| gemm_tn(&ddots, &etv.data, s, nt, nv, d));
        }
    }
}
