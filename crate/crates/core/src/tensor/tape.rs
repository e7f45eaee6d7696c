use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of packed rows that forms one causal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// A fixed linear map applied independently to every row.
pub trait RowMap: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// Accumulates `Mᵀ·g` into `out`.
    fn apply_transpose(&self, g: &[f64], out: &mut [f64]);
}

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct CombinePart {
    rows: Var,
    expert: usize,
    tokens: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    /// Input and, when it needs a gradient, the derivative at each element.
    Gelu(Var, Option<Vec<f64>>),
    Softmax(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    ConcatCols(Var, Var),
    RowMap {
        x: Var,
        map: Arc<dyn RowMap>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[Segment]>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<f64>,
    },
    Combine {
        probs: Option<Var>,
        parts: Vec<CombinePart>,
    },
    LoadBalance {
        probs: Var,
        fraction: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records operations for a single forward pass and replays their adjoints.
///
/// Parameters are read from a borrowed [`ParamStore`]; a parameter leaf needs
/// a gradient exactly when the stored tensor has `requires_grad` set.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_leaf: HashMap<ParamId, Var>,
}

/// Gradients of leaves (inputs and parameters) after a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.leaves.get(n).map(Vec::as_slice))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(p, n)| self.leaves.get(n).map(|g| (*p, g.as_slice())))
    }
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    // v·0 is NaN exactly when v is not finite. Independent lanes let the
    // loop vectorize, unlike a short-circuiting scan.
    let mut lanes = [0.0f64; 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (l, v) in lanes.iter_mut().zip(c) {
            *l += v * 0.0;
        }
    }
    if lanes.iter().chain(tail).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

/// Fresh row-major `m×n` buffer holding `a·b`. The output is never zeroed:
/// with beta = 0 `dgemm` writes every element without reading it.
fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    let len = m * n;
    if len == 0 || k == 0 {
        return vec![0.0; len];
    }
    let mut out: Vec<f64> = Vec::with_capacity(len);
    // SAFETY: as in `gemm`; the destination is written through a raw pointer
    // into reserved capacity, and the length is set only after every element
    // has been written (dgemm with beta = 0 stores all m·n outputs).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        out.set_len(len);
    }
    out
}

/// `c = a·b + beta·c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the strided extents described by
    // (m, k, n) and the strides; `c` is a distinct, row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// GeLU and its derivative from one erf evaluation.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if shape.len() == 1 {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    };
    (rows, cols)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_leaf: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(&data, name)?;
        Ok(self.push(shape, data, op, needs_grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(&self.nodes[v.0].shape)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape values always have valid shapes")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Constant leaf.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same handle
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_leaf.get(&id) {
            return *v;
        }
        let t = self.store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaf.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm_new(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1));
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("matmul", vec![m, n], out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = gemm_new(m, k, n, self.value(a), (k, 1), self.value(b), (1, k));
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("matmul_nt", vec![m, n], out, Op::MatMulNt(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("add", self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        self.push_checked("scale", self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if self.value(bias).len() != cols {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        self.push_checked("add_bias", self.shape(x).to_vec(), out, Op::AddBias(x, bias), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push_checked("sum", vec![1], vec![s], Op::Sum(x), ng)
    }

    /// Exact GeLU, `x·Φ(x)` with Φ from the error function.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ng = self.needs(x);
        let (out, deriv) = if ng {
            let (out, d): (Vec<f64>, Vec<f64>) = self.value(x).iter().map(|&v| gelu_with_grad(v)).unzip();
            (out, Some(d))
        } else {
            (self.value(x).iter().map(|&v| gelu_scalar(v)).collect(), None)
        };
        self.push_checked("gelu", self.shape(x).to_vec(), out, Op::Gelu(x, deriv), ng)
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.needs(x);
        self.push_checked("softmax", self.shape(x).to_vec(), out, Op::Softmax(x), ng)
    }

    pub fn rms_norm(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if self.value(weight).len() != cols {
            return Err(Error::Dimension {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(weight).to_vec(),
            });
        }
        let w = self.value(weight);
        let mut inv_rms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(w).map(|(v, g)| v * inv * g));
        }
        let ng = self.needs(x) || self.needs(weight);
        self.push_checked(
            "rms_norm",
            self.shape(x).to_vec(),
            out,
            Op::RmsNorm { x, weight, inv_rms },
            ng,
        )
    }

    /// Selects rows of a matrix (embedding lookup, expert dispatch).
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.dims(src);
        if index.is_empty() {
            return Err(Error::Contract("gather_rows with an empty index".into()));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let s = self.value(src);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            out.extend_from_slice(&s[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(src);
        let shape = vec![index.len(), cols];
        self.push_checked("gather_rows", shape, out, Op::GatherRows { src, index }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.dims(a), self.dims(b));
        if ra != rb {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("concat_cols", vec![ra, ca + cb], out, Op::ConcatCols(a, b), ng)
    }

    /// Applies a constant linear map to each row; gradients flow to `x` only.
    pub fn row_map(&mut self, x: Var, map: Arc<dyn RowMap>) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if cols != map.dim() {
            return Err(Error::Dimension {
                op: "row_map",
                lhs: self.shape(x).to_vec(),
                rhs: vec![map.dim()],
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (src, dst) in self.value(x).chunks(cols).zip(out.chunks_mut(cols)) {
            map.apply(src, dst);
        }
        let ng = self.needs(x);
        self.push_checked("row_map", vec![rows, cols], out, Op::RowMap { x, map }, ng)
    }

    /// Causal multi-head attention over packed sequences. `q`, `k`, `v` hold
    /// already-projected rows; heads are contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[Segment]>,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (rows, d) = self.dims(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} columns not divisible by {heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != rows || segments.iter().any(|s| s.start + s.len > rows) {
            return Err(Error::Contract("segments do not tile the packed rows".into()));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| heads * s.len * s.len).sum());
        let mut scores = Vec::new();
        for seg in segments.iter() {
            for h in 0..heads {
                let col = h * hd;
                for i in 0..seg.len {
                    let qi = &qv[(seg.start + i) * d + col..][..hd];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kv[(seg.start + j) * d + col..][..hd];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push(s * scale);
                    }
                    softmax_in_place(&mut scores);
                    let o = &mut out[(seg.start + i) * d + col..][..hd];
                    for (j, p) in scores.iter().enumerate() {
                        let vj = &vv[(seg.start + j) * d + col..][..hd];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                    probs.extend_from_slice(&scores);
                    probs.extend(std::iter::repeat_n(0.0, seg.len - 1 - i));
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push_checked(
            "causal_attention",
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Mean negative log-likelihood over rows with `mask[r] == true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims(logits);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let active: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
        if active.is_empty() {
            return Err(Error::DegenerateBatch("every position is masked".into()));
        }
        if let Some(t) = active.iter().map(|&r| targets[r]).find(|&t| t >= vocab) {
            return Err(Error::Contract(format!("target {t} outside vocabulary of {vocab}")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(active.len() * vocab);
        let mut total = 0.0;
        for &r in &active {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[r]];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = total / active.len() as f64;
        let ng = self.needs(logits);
        self.push_checked(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows: active,
                probs,
            },
            ng,
        )
    }

    /// Scatter-adds expert outputs back to token rows. Part `i` holds the rows
    /// produced by expert `experts[i]` for tokens `tokens[i]`; with `probs`
    /// each row is scaled by the token's routing probability for that expert.
    pub fn combine_experts(
        &mut self,
        n_rows: usize,
        probs: Option<Var>,
        parts: Vec<(Var, usize, Vec<usize>)>,
    ) -> Result<Var> {
        let d = match parts.first() {
            Some((v, _, _)) => self.dims(*v).1,
            None => return Err(Error::Contract("combine with no expert outputs".into())),
        };
        let n_experts = probs.map(|p| self.dims(p).1);
        let mut out = vec![0.0; n_rows * d];
        let mut ng = probs.is_some_and(|p| self.needs(p));
        let mut recorded = Vec::with_capacity(parts.len());
        for (rows, expert, tokens) in parts {
            let (r, c) = self.dims(rows);
            if r != tokens.len() || c != d {
                return Err(Error::Dimension {
                    op: "combine_experts",
                    lhs: vec![r, c],
                    rhs: vec![tokens.len(), d],
                });
            }
            if tokens.iter().any(|&t| t >= n_rows) {
                return Err(Error::Contract("combine token index out of range".into()));
            }
            let y = self.value(rows);
            for (j, &t) in tokens.iter().enumerate() {
                let w = match (probs, n_experts) {
                    (Some(p), Some(n)) => self.value(p)[t * n + expert],
                    _ => 1.0,
                };
                for (o, v) in out[t * d..(t + 1) * d].iter_mut().zip(&y[j * d..(j + 1) * d]) {
                    *o += w * v;
                }
            }
            ng |= self.needs(rows);
            recorded.push(CombinePart {
                rows,
                expert,
                tokens,
            });
        }
        self.push_checked(
            "combine_experts",
            vec![n_rows, d],
            out,
            Op::Combine {
                probs,
                parts: recorded,
            },
            ng,
        )
    }

    /// `n · Σ_i f_i · P_i` with `P_i` the mean probability of expert `i` and
    /// `fraction` the (constant) share of tokens whose top choice is `i`.
    pub fn load_balance(&mut self, probs: Var, fraction: Vec<f64>) -> Result<Var> {
        let (t, n) = self.dims(probs);
        if fraction.len() != n {
            return Err(Error::Dimension {
                op: "load_balance",
                lhs: vec![t, n],
                rhs: vec![fraction.len()],
            });
        }
        let p = self.value(probs);
        let mut mean = vec![0.0; n];
        for row in p.chunks(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let loss = n as f64 * mean.iter().zip(&fraction).map(|(m, f)| f * m / t as f64).sum::<f64>();
        let ng = self.needs(probs);
        self.push_checked(
            "load_balance",
            vec![1],
            vec![loss],
            Op::LoadBalance { probs, fraction },
            ng,
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    check_finite(&g, "backward")?;
                    out.params.push((*id, i));
                    out.leaves.insert(i, g);
                }
                _ => self.adjoint(i, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn adjoint(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => unreachable!(),
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if let Some(ga) = self.slot(grads, a) {
                    gemm(m, n, k, g, (n, 1), self.value(b), (1, n), ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(k, m, n, self.value(a), (1, k), g, (n, 1), gb, 1.0);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                if let Some(ga) = self.slot(grads, a) {
                    gemm(m, n, k, g, (n, 1), self.value(b), (k, 1), ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(n, m, k, g, (1, n), self.value(a), (k, 1), gb, 1.0);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    let vb = self.value(b);
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    let va = self.value(a);
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * w;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let cols = self.value(bias).len();
                if let Some(gb) = self.slot(grads, bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Gelu(x, deriv) => {
                if let (Some(gx), Some(d)) = (self.slot(grads, *x), deriv) {
                    for ((a, b), dv) in gx.iter_mut().zip(g).zip(d) {
                        *a += b * dv;
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = self.value(Var(i));
                let cols = self.dims(x).1;
                if let Some(gx) = self.slot(grads, x) {
                    for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (x, weight) = (*x, *weight);
                let cols = self.dims(x).1;
                let xv = self.value(x);
                let w = self.value(weight);
                if let Some(gx) = self.slot(grads, x) {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = gr.iter().zip(w).zip(xr).map(|((a, b), c)| a * b * c).sum();
                        let coef = inv * inv * inv * dot / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += inv * gr[c] * w[c] - xr[c] * coef;
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, weight) {
                    for (r, inv) in inv_rms.iter().enumerate() {
                        for c in 0..cols {
                            gw[c] += g[r * cols + c] * xv[r * cols + c] * inv;
                        }
                    }
                }
            }
            Op::GatherRows { src, index } => {
                let cols = self.dims(*src).1;
                if let Some(gs) = self.slot(grads, *src) {
                    for (j, &r) in index.iter().enumerate() {
                        let dst = &mut gs[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(&g[j * cols..(j + 1) * cols]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let ((rows, ca), (_, cb)) = (self.dims(a), self.dims(b));
                let w = ca + cb;
                if let Some(ga) = self.slot(grads, a) {
                    for r in 0..rows {
                        ga[r * ca..(r + 1) * ca]
                            .iter_mut()
                            .zip(&g[r * w..r * w + ca])
                            .for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for r in 0..rows {
                        gb[r * cb..(r + 1) * cb]
                            .iter_mut()
                            .zip(&g[r * w + ca..(r + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::RowMap { x, map } => {
                let cols = map.dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (gr, dr) in g.chunks(cols).zip(gx.chunks_mut(cols)) {
                        map.apply_transpose(gr, dr);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_adjoint(g, grads, (*q, *k, *v), segments, *heads, probs),
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                probs,
            } => {
                let vocab = self.dims(*logits).1;
                let scale = g[0] / rows.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (j, &r) in rows.iter().enumerate() {
                        let p = &probs[j * vocab..(j + 1) * vocab];
                        let dst = &mut gl[r * vocab..(r + 1) * vocab];
                        for (d, pv) in dst.iter_mut().zip(p) {
                            *d += scale * pv;
                        }
                        dst[targets[r]] -= scale;
                    }
                }
            }
            Op::Combine { probs, parts } => {
                let d = self.dims(Var(i)).1;
                let n_experts = probs.map(|p| self.dims(p).1);
                let pv = probs.map(|p| self.value(p));
                for part in parts {
                    if let Some(gy) = self.slot(grads, part.rows) {
                        for (j, &t) in part.tokens.iter().enumerate() {
                            let w = match (pv, n_experts) {
                                (Some(p), Some(n)) => p[t * n + part.expert],
                                _ => 1.0,
                            };
                            let dst = &mut gy[j * d..(j + 1) * d];
                            dst.iter_mut().zip(&g[t * d..(t + 1) * d]).for_each(|(a, b)| *a += w * b);
                        }
                    }
                }
                if let (Some(p), Some(n)) = (*probs, n_experts) {
                    let mut acc: Vec<(usize, f64)> = Vec::new();
                    for part in parts {
                        let y = self.value(part.rows);
                        for (j, &t) in part.tokens.iter().enumerate() {
                            let dot: f64 = g[t * d..(t + 1) * d]
                                .iter()
                                .zip(&y[j * d..(j + 1) * d])
                                .map(|(a, b)| a * b)
                                .sum();
                            acc.push((t * n + part.expert, dot));
                        }
                    }
                    if let Some(gp) = self.slot(grads, p) {
                        for (idx, dot) in acc {
                            gp[idx] += dot;
                        }
                    }
                }
            }
            Op::LoadBalance { probs, fraction } => {
                let (t, n) = self.dims(*probs);
                if let Some(gp) = self.slot(grads, *probs) {
                    for row in gp.chunks_mut(n) {
                        for (d, f) in row.iter_mut().zip(fraction) {
                            *d += g[0] * n as f64 * f / t as f64;
                        }
                    }
                }
            }
        }
    }

    fn attention_adjoint(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
    ) {
        let (rows, d) = self.dims(q);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let col = h * hd;
                for i in 0..l {
                    let p = &probs[off + i * l..off + i * l + i + 1];
                    let gi = &g[(seg.start + i) * d + col..][..hd];
                    dp.clear();
                    for j in 0..=i {
                        let vj = &vv[(seg.start + j) * d + col..][..hd];
                        dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = &qv[(seg.start + i) * d + col..][..hd];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let rj = (seg.start + j) * d + col;
                        let ri = (seg.start + i) * d + col;
                        for c in 0..hd {
                            dq[ri + c] += ds * kv[rj + c];
                            dk[rj + c] += ds * qi[c];
                            dv[rj + c] += p[j] * gi[c];
                        }
                    }
                }
                off += l * l;
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.slot(grads, var) {
                gv.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let i2 = tape.input(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = tape.input(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.input(&t(vec![2, 1], vec![5.0, 6.0]));
        let id = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(id), &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.matmul(m, c).unwrap();
        assert_eq!(tape.value(p), &[17.0, 39.0]);
        let z = tape.input(&Tensor::zeros(vec![3, 2]).unwrap());
        let zp = tape.matmul(z, m).unwrap();
        assert!(tape.value(zp).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.input(&Tensor::zeros(vec![2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Φ(1) from the erf oracle: 0.5·(1 + erf(1/√2)).
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.841_344_746_068_543, epsilon = 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&t(vec![4], vec![0.0; 4]));
        let sa = tape.softmax(a).unwrap();
        assert_eq!(tape.value(sa), &[0.25; 4]);
        let b = tape.input(&t(vec![2], vec![1000.0, 0.0]));
        let sb = tape.softmax(b).unwrap();
        assert_abs_diff_eq!(tape.value(sb)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(sb)[1], 0.0, epsilon = 1e-12);
        let c = tape.input(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let sc = tape.softmax(c).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, x) in tape.value(sc).iter().zip([1.0f64, 2.0, 3.0]) {
            assert_abs_diff_eq!(*got, x.exp() / z, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(tape.value(sc)[0], 0.09003, epsilon = 1e-5);
        assert_abs_diff_eq!(tape.value(sc)[2], 0.66524, epsilon = 1e-5);
    }

    #[test]
    fn cross_entropy_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let u = tape.input(&Tensor::zeros(vec![3, 4]).unwrap());
        let l = tape.cross_entropy(u, &[0, 1, 3], &[true; 3]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 4f64.ln(), epsilon = 1e-12);

        let sharp = tape.input(&t(vec![1, 3], vec![0.0, 800.0, 0.0]));
        let l = tape.cross_entropy(sharp, &[1], &[true]).unwrap();
        assert!(tape.scalar(l) < 1e-12);

        let raw = [0.3, -1.2, 2.0, 0.5, 0.1, -0.7];
        let x = tape.input(&t(vec![2, 3], raw.to_vec()));
        let l = tape.cross_entropy(x, &[2, 0], &[true, true]).unwrap();
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let oracle = ((lse(&raw[..3]) - raw[2]) + (lse(&raw[3..]) - raw[3])) / 2.0;
        assert_abs_diff_eq!(tape.scalar(l), oracle, epsilon = 1e-14);

        let err = tape.cross_entropy(x, &[2, 0], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn backward_simple_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input_with_grad(&t(vec![3], vec![1.0, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new(&store);
        let x = tape.input_with_grad(&t(vec![2], vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn param_leaf_accumulates_across_uses() {
        let mut store = ParamStore::new();
        let mut w = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        w.set_requires_grad(true);
        let id = store.add("w", w).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let s1 = tape.sum(a).unwrap();
        let s2 = tape.sum(b).unwrap();
        let tot = tape.add(s1, s2).unwrap();
        let g = tape.backward(tot).unwrap();
        assert_eq!(g.param(id).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn finite_check_sees_every_position() {
        for len in [1, 7, 8, 9, 17] {
            assert!(check_finite(&vec![1.5; len], "x").is_ok());
            for pos in 0..len {
                for bad in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
                    let mut v = vec![-2.0; len];
                    v[pos] = bad;
                    assert!(matches!(check_finite(&v, "x"), Err(Error::NonFinite { .. })), "len {len} pos {pos}");
                }
            }
        }
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(vec![2], vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let x = tape.input_with_grad(&t(vec![2], vec![3.0, 4.0]));
        let p = tape.mul(w, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.param(id).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 2.0]);
    }
}
