//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to the tape; node order is a topological
//! order, so `backward` walks the tape once in reverse. No op broadcasts:
//! shapes must match exactly, and bias-style addition goes through
//! [`Graph::tile_rows`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    /// Values are rounded through `f32` after every forward op.
    F32,
}

/// Epsilon added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    Constant,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalarVar { x: Var, s: Var },
    Exp(Var),
    TileRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Pick { a: Var, idx: Vec<usize> },
    Reshape(Var),
    LayerNorm { a: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSumExp(Var),
    Gelu(Var),
    Relu(Var),
    Dropout { a: Var, mask: Vec<f64> },
    Sum(Var),
    L2NormRows(Var),
    NormalizeRows { a: Var, norms: Vec<f64> },
    SpanCompose {
        a: Var,
        b: Var,
        c: Var,
        spans: Vec<(usize, usize)>,
    },
    InfoNce { scores: Var, pos: usize, pool: Vec<usize>, probs: Vec<f64> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
///
/// Parameters are borrowed from a [`ParamStore`]; their values are never
/// copied into the tape.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    precision: Precision,
    dropout_seed: u64,
    dropout_calls: u64,
    consumed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// Eval-mode graph without a parameter store.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode: Mode::Eval,
            precision: Precision::F64,
            dropout_seed: 0,
            dropout_calls: 0,
            consumed: false,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Switches to train mode. Dropout masks are drawn from a ChaCha stream
    /// keyed by `(seed, call index)`, so identical seeds give identical masks.
    pub fn train(mut self, dropout_seed: u64) -> Self {
        self.mode = Mode::Train;
        self.dropout_seed = dropout_seed;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.store.expect("param node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        let mut value = value;
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----- leaves -------------------------------------------------------

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))?
            .id(name)?;
        Ok(self.param(id))
    }

    /// Leaf whose gradient is reported by `backward` when `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Input, requires_grad, "input")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false, "constant")
    }

    // ----- algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `op(a) @ op(b)` with optional transposes; both operands rank 2.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (ar, ac) = av.dims2();
        let (br, bc) = bv.dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), ar, ac, ta, bv.data(), br, bc, tb, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg, "matmul")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg, "scale")
    }

    /// Divide by a constant.
    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(NumError::NonFinite { op: "div_scalar" });
        }
        self.scale(a, 1.0 / s)
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != 1 {
            return Err(shape_err("mul_scalar_var", xv, sv));
        }
        let k = sv.item();
        let data = xv.data().iter().map(|v| v * k).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        self.push(t, Op::MulScalarVar { x, s }, rg, "mul_scalar_var")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg, "exp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of a list of same-shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs
            .split_first()
            .ok_or_else(|| NumError::Invalid("add_n of empty list".into()))?;
        let mut acc = *first;
        for x in rest {
            acc = self.add(acc, *x)?;
        }
        Ok(acc)
    }

    // ----- shape ops ----------------------------------------------------

    /// Repeats a vector `[n]` into `m` rows `[m, n]`.
    pub fn tile_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(NumError::Shape {
                op: "tile_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![m],
            });
        }
        let n = av.numel();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(av.data());
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![m, n], data)?, Op::TileRows(a), rg, "tile_rows")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).dims2().0;
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 2 || v.dims2().0 != rows {
                return Err(shape_err("concat_cols", self.value(xs[0]), v));
            }
            total += v.dims2().1;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(xs.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 2 || v.dims2().1 != cols {
                return Err(shape_err("concat_rows", self.value(xs[0]), v));
            }
            rows += v.dims2().0;
            data.extend_from_slice(v.data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(xs.to_vec()), rg, "concat_rows")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        if av.rank() != 2 || start > end || end > c {
            return Err(NumError::Index {
                op: "slice_cols",
                index: end,
                extent: c,
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r, end - start], data)?, Op::SliceCols { a, start }, rg, "slice_cols")
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        if av.rank() != 2 || start > end || end > r {
            return Err(NumError::Index {
                op: "slice_rows",
                index: end,
                extent: r,
            });
        }
        let data = av.data()[start * c..end * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![end - start, c], data)?, Op::SliceRows { a, start }, rg, "slice_rows")
    }

    /// Row lookup: output row `r` is `a[idx[r]]`. Used for embeddings.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(av.row(i));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows { a, idx: idx.to_vec() },
            rg,
            "gather_rows",
        )
    }

    /// Gathers flat elements into a vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n = av.numel();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(NumError::Index {
                    op: "pick",
                    index: i,
                    extent: n,
                });
            }
            data.push(av.data()[i]);
        }
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::Pick { a, idx: idx.to_vec() }, rg, "pick")
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if j >= c {
            return Err(NumError::Index {
                op: "column",
                index: j,
                extent: c,
            });
        }
        let idx: Vec<usize> = (0..r).map(|i| i * c + j).collect();
        self.pick(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    // ----- nonlinearities and normalisation ------------------------------

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = av.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|x| (x - mean) * is));
        }
        let t = Tensor::new(av.shape().to_vec(), xhat.clone())?;
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm { a, xhat, inv_std }, rg, "layer_norm")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, _) = av.dims2();
        let mut data = Vec::with_capacity(av.numel());
        for i in 0..r {
            let row = av.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for x in row {
                let e = (x - m).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= z;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg, "softmax_rows")
    }

    /// `ln Σ exp(a)` over every element.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let lse = log_sum_exp(self.value(a).data());
        let rg = self.rg(a);
        self.push(Tensor::scalar(lse), Op::LogSumExp(a), rg, "log_sum_exp")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg, "relu")
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::Invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        rng.set_stream(self.dropout_calls);
        self.dropout_calls += 1;
        let keep = 1.0 / (1.0 - p);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Dropout { a, mask }, rg, "dropout")
    }

    /// Euclidean norm of every row: `[m, n] -> [m]`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, _) = av.dims2();
        let data = (0..r).map(|i| norm(av.row(i))).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::L2NormRows(a), rg, "l2_norm_rows")
    }

    /// Every row divided by `(‖row‖ + 1e-12)`.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, _) = av.dims2();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(av.numel());
        for i in 0..r {
            let row = av.row(i);
            let n = norm(row);
            norms.push(n);
            data.extend(row.iter().map(|x| x / (n + NORM_EPS)));
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::NormalizeRows { a, norms }, rg, "normalize_rows")
    }

    /// Pairwise cosine similarities between rows: `[s, p] x [k, p] -> [s, k]`.
    pub fn cosine_matrix(&mut self, x: Var, y: Var) -> Result<Var> {
        let xn = self.normalize_rows(x)?;
        let yn = self.normalize_rows(y)?;
        self.matmul_nt(xn, yn)
    }

    /// Cosine similarity of two vectors (any shape, flattened) as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        if na != nb {
            return Err(shape_err("cosine", self.value(a), self.value(b)));
        }
        let a2 = self.reshape(a, &[1, na])?;
        let b2 = self.reshape(b, &[1, nb])?;
        let c = self.cosine_matrix(a2, b2)?;
        self.reshape(c, &[])
    }

    // ----- fused ops used by the span head and losses --------------------

    /// Rows `a[i] + b[j] + c[j - i]` for every `(i, j)` in `spans`.
    pub fn span_compose(&mut self, a: Var, b: Var, c: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (av, bv, cv) = (self.value(a), self.value(b), self.value(c));
        let (ar, p) = av.dims2();
        let (br, pb) = bv.dims2();
        let (cr, pc) = cv.dims2();
        if av.rank() != 2 || bv.rank() != 2 || cv.rank() != 2 || p != pb || p != pc || ar != br {
            return Err(shape_err("span_compose", av, bv));
        }
        let mut data = Vec::with_capacity(spans.len() * p);
        for &(i, j) in spans {
            if i > j || j >= ar || j - i >= cr {
                return Err(NumError::Index {
                    op: "span_compose",
                    index: j,
                    extent: ar,
                });
            }
            let (ra, rb, rc) = (av.row(i), bv.row(j), cv.row(j - i));
            data.extend((0..p).map(|d| ra[d] + rb[d] + rc[d]));
        }
        let rg = self.rg(a) || self.rg(b) || self.rg(c);
        self.push(
            Tensor::new(vec![spans.len(), p], data)?,
            Op::SpanCompose {
                a,
                b,
                c,
                spans: spans.to_vec(),
            },
            rg,
            "span_compose",
        )
    }

    /// InfoNCE term `−log softmax(scores[pool ∪ {pos}])[pos]`.
    ///
    /// `scores` is flat; `pool` may contain `pos` or duplicates, the
    /// candidate set is deduplicated first.
    pub fn info_nce(&mut self, scores: Var, pos: usize, pool: &[usize]) -> Result<Var> {
        let sv = self.value(scores);
        let n = sv.numel();
        let set: BTreeSet<usize> = pool.iter().copied().chain(std::iter::once(pos)).collect();
        if let Some(&bad) = set.iter().find(|&&i| i >= n) {
            return Err(NumError::Index {
                op: "info_nce",
                index: bad,
                extent: n,
            });
        }
        let pool: Vec<usize> = set.into_iter().collect();
        let vals: Vec<f64> = pool.iter().map(|&i| sv.data()[i]).collect();
        let lse = log_sum_exp(&vals);
        let loss = lse - sv.data()[pos];
        let probs = vals.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.rg(scores);
        self.push(
            Tensor::scalar(loss.max(0.0)),
            Op::InfoNce {
                scores,
                pos,
                pool,
                probs,
            },
            rg,
            "info_nce",
        )
    }

    /// Mean over rows of `−log softmax(logits[r])[targets[r]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2();
        if r != targets.len() || r == 0 {
            return Err(NumError::Shape {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumError::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    extent: c,
                });
            }
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / r as f64),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// `x @ w + tile(b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let rows = self.value(y).dims2().0;
        let bt = self.tile_rows(b, rows)?;
        self.add(y, bt)
    }

    // ----- backward -----------------------------------------------------

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumError::NotScalar(lv.shape().to_vec()));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.backward_from(vec![(loss, seed)])
    }

    /// Reverse pass seeded with upstream gradients for arbitrary nodes.
    pub fn backward_from(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        if self.consumed {
            return Err(NumError::GraphConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(shape_err("backward_from", self.value(v), &g));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut out = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Param(id) => {
                    out.params.insert(*id, g);
                    continue;
                }
                Op::Input => {
                    out.vars.insert(idx, g);
                    continue;
                }
                Op::Constant => continue,
                _ => {}
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.as_ref().expect("op node has value");
        match &node.op {
            Op::Param(_) | Op::Input | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = av.dims2();
                let (br, bc) = bv.dims2();
                let (m, n) = out.dims2();
                if self.rg(*a) {
                    let mut da = vec![0.0; ar * ac];
                    if *ta {
                        gemm(bv.data(), br, bc, *tb, g.data(), m, n, true, &mut da, 0.0);
                    } else {
                        gemm(g.data(), m, n, false, bv.data(), br, bc, !*tb, &mut da, 0.0);
                    }
                    self.send(grads, *a, Tensor::new(vec![ar, ac], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; br * bc];
                    if *tb {
                        gemm(g.data(), m, n, true, av.data(), ar, ac, *ta, &mut db, 0.0);
                    } else {
                        gemm(av.data(), ar, ac, !*ta, g.data(), m, n, false, &mut db, 0.0);
                    }
                    self.send(grads, *b, Tensor::new(vec![br, bc], db)?);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                let mut nb = g.clone();
                nb.scale_in_place(-1.0);
                self.send(grads, *b, nb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.send(grads, *a, map2(g, bv, |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.send(grads, *b, map2(g, av, |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_in_place(*s);
                self.send(grads, *a, d);
            }
            Op::MulScalarVar { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.rg(*x) {
                    let mut d = g.clone();
                    d.scale_in_place(sv.item());
                    self.send(grads, *x, d);
                }
                if self.rg(*s) {
                    let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.send(grads, *s, Tensor::new(sv.shape().to_vec(), vec![ds])?);
                }
            }
            Op::Exp(a) => self.send(grads, *a, map2(g, out, |x, y| x * y)?),
            Op::TileRows(a) => {
                let (m, n) = g.dims2();
                let mut d = vec![0.0; n];
                for i in 0..m {
                    for (acc, v) in d.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                self.send(grads, *a, Tensor::vector(d));
            }
            Op::ConcatCols(xs) => {
                let (rows, _) = g.dims2();
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).dims2().1;
                    if self.rg(x) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[off..off + c]);
                        }
                        self.send(grads, x, Tensor::new(vec![rows, c], d)?);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let (_, cols) = g.dims2();
                let mut off = 0;
                for &x in xs {
                    let r = self.value(x).dims2().0;
                    if self.rg(x) {
                        let d = g.data()[off * cols..(off + r) * cols].to_vec();
                        self.send(grads, x, Tensor::new(vec![r, cols], d)?);
                    }
                    off += r;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let (r, c) = av.dims2();
                let w = g.dims2().1;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let (_, c) = av.dims2();
                let mut d = vec![0.0; av.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::GatherRows { a, idx } => {
                let av = self.value(*a);
                let (_, c) = av.dims2();
                let mut d = vec![0.0; av.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Pick { a, idx } => {
                let av = self.value(*a);
                let mut d = vec![0.0; av.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    d[i] += g.data()[k];
                }
                self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.value(*a).shape().to_vec())?;
                self.send(grads, *a, d);
            }
            Op::LayerNorm { a, xhat, inv_std } => {
                let (r, c) = g.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gy = g.row(i);
                    let xh = &xhat[i * c..(i + 1) * c];
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let k = inv_std[i] / c as f64;
                    for t in 0..c {
                        d[i * c + t] = k * (c as f64 * gy[t] - sum_g - xh[t] * sum_gx);
                    }
                }
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = g.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (gy, y) = (g.row(i), out.row(i));
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for t in 0..c {
                        d[i * c + t] = y[t] * (gy[t] - dot);
                    }
                }
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let lse = out.item();
                let gs = g.item();
                let d = av.data().iter().map(|x| gs * (x - lse).exp()).collect();
                self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = map2(g, av, |gy, x| {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                })?;
                self.send(grads, *a, d);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = map2(g, av, |gy, x| if x > 0.0 { gy } else { 0.0 })?;
                self.send(grads, *a, d);
            }
            Op::Dropout { a, mask } => {
                let d = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.send(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::L2NormRows(a) => {
                let av = self.value(*a);
                let (r, c) = av.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let n = out.data()[i];
                    if n > 0.0 {
                        for (t, x) in av.row(i).iter().enumerate() {
                            d[i * c + t] = g.data()[i] * x / n;
                        }
                    }
                }
                self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::NormalizeRows { a, norms } => {
                let av = self.value(*a);
                let (r, c) = av.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let n = norms[i];
                    let rr = n + NORM_EPS;
                    let x = av.row(i);
                    let gy = g.row(i);
                    let dot: f64 = gy.iter().zip(x).map(|(a, b)| a * b).sum();
                    let k = if n > 0.0 { dot / (rr * rr * n) } else { 0.0 };
                    for t in 0..c {
                        d[i * c + t] = gy[t] / rr - x[t] * k;
                    }
                }
                self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::SpanCompose { a, b, c, spans } => {
                let p = g.dims2().1;
                let mut da = vec![0.0; self.value(*a).numel()];
                let mut db = vec![0.0; self.value(*b).numel()];
                let mut dc = vec![0.0; self.value(*c).numel()];
                for (s, &(i, j)) in spans.iter().enumerate() {
                    let gr = g.row(s);
                    let w = j - i;
                    for d in 0..p {
                        da[i * p + d] += gr[d];
                        db[j * p + d] += gr[d];
                        dc[w * p + d] += gr[d];
                    }
                }
                for (v, d) in [(*a, da), (*b, db), (*c, dc)] {
                    if self.rg(v) {
                        self.send(grads, v, Tensor::new(self.value(v).shape().to_vec(), d)?);
                    }
                }
            }
            Op::InfoNce {
                scores,
                pos,
                pool,
                probs,
            } => {
                let sv = self.value(*scores);
                let gs = g.item();
                let mut d = vec![0.0; sv.numel()];
                for (&i, p) in pool.iter().zip(probs) {
                    d[i] += gs * p;
                }
                d[*pos] -= gs;
                self.send(grads, *scores, Tensor::new(sv.shape().to_vec(), d)?);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (r, c) = lv.dims2();
                let k = g.item() / r as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * k).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= k;
                }
                self.send(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

/// Gradients of leaf nodes after a backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    vars: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of an `input` leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Numerically stable `ln Σ exp(x)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
