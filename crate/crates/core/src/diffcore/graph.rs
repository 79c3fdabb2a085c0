use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1 x c` against `r x c`.
    Row,
    /// `r x 1` against `r x c`.
    Col,
    /// `1 x 1` against anything.
    Scalar,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, F),
    Sum(Var),
    Mean { x: Var, axis: usize },
    MeanGroups { x: Var, group: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, groups: usize, heads: usize, probs: Vec<F>, mask: Option<Vec<F>> },
    GatherRows { x: Var, index: Vec<usize> },
    L1(Var),
    Dropout { x: Var, mask: Vec<F> },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanGroups { .. } => "mean_groups",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Attention { .. } => "attention",
            Op::GatherRows { .. } => "gather_rows",
            Op::L1(..) => "l1_norm",
            Op::Dropout { .. } => "dropout",
        }
    }
}

/// Every differentiable operation the tape supports.
pub const OP_SET: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "mean_groups",
    "concat",
    "slice",
    "transpose",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "layer_norm",
    "gelu",
    "attention",
    "gather_rows",
    "l1_norm",
    "dropout",
];

pub fn op_set() -> &'static [&'static str] {
    OP_SET
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower clamp applied inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize), DiffError> {
    t.dims2().ok_or_else(|| DiffError::Shape { op, detail: format!("expected rank 1 or 2, got {:?}", t.shape()) })
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh-approximation GELU written as x * sigmoid(2u), one exp per element
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044715);
    let one = F::one();
    let two = F::lit(2.0);
    let u = c * (x + a * x * x * x);
    let s = one / (one + (-two * u).exp());
    let y = x * s;
    let dy = s + two * x * s * (one - s) * c * (one + F::lit(3.0) * a * x * x);
    (y, dy)
}

/// Bernoulli(keep) threshold on a uniform `u32`.
fn keep_threshold(keep: f64) -> u64 {
    (keep * 4_294_967_296.0) as u64
}

fn softmax_rows<F: Scalar>(src: &[F], cols: usize, out: &mut [F]) {
    for (row, orow) in src.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), train: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Training-mode graph: dropout masks are drawn from a stream seeded by `seed`.
    pub fn training(seed: u64) -> Self {
        Self { nodes: Vec::new(), train: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Result<Var, DiffError> {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Result<Var, DiffError> {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Result<Var, DiffError> {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn d(&self, v: Var, op: &'static str) -> Result<(usize, usize), DiffError> {
        dims(&self.nodes[v.0].value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.d(a, "matmul")?;
        let (k2, n) = self.d(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast, DiffError> {
        let (r, c) = self.d(a, op)?;
        let (rb, cb) = self.d(b, op)?;
        Ok(match (rb, cb) {
            _ if (rb, cb) == (r, c) => Bcast::Same,
            (1, 1) => Bcast::Scalar,
            (1, cb) if cb == c => Bcast::Row,
            (rb, 1) if rb == r => Bcast::Col,
            _ => return Err(shape_err(op, format!("{r}x{c} with {rb}x{cb}"))),
        })
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, Bcast), DiffError> {
        let bc = self.bcast(a, b, op)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let (_, c) = dims(av, op)?;
        let ad = av.data();
        let mut out: Vec<F> = Vec::with_capacity(ad.len());
        match bc {
            Bcast::Same => out.extend(ad.iter().zip(bv).map(|(&x, &y)| f(x, y))),
            Bcast::Scalar => out.extend(ad.iter().map(|&x| f(x, bv[0]))),
            Bcast::Row => {
                for row in ad.chunks(c) {
                    out.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
                }
            }
            Bcast::Col => {
                for (row, &y) in ad.chunks(c).zip(bv) {
                    out.extend(row.iter().map(|&x| f(x, y)));
                }
            }
        }
        Ok((Tensor::new(av.shape().to_vec(), out)?, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (t, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b, bc), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (t, bc) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b, bc), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (t, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b, bc), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var, DiffError> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    /// Mean over `axis` (0: rows collapse to `1 x c`, 1: columns collapse to `r x 1`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let (r, c) = self.d(a, "mean")?;
        let x = self.value(a).data();
        let t = match axis {
            0 => {
                let mut out = vec![F::zero(); c];
                for row in x.chunks(c) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let inv = F::one() / F::lit(r as f64);
                Tensor::matrix(1, c, out.into_iter().map(|v| v * inv).collect())?
            }
            1 => {
                let inv = F::one() / F::lit(c as f64);
                Tensor::matrix(r, 1, x.chunks(c).map(|row| row.iter().copied().sum::<F>() * inv).collect())?
            }
            _ => return Err(shape_err("mean", format!("axis {axis} on rank-2 tensor"))),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean { x: a, axis }, rg)
    }

    /// Mean over consecutive blocks of `group` rows: `r x c -> (r / group) x c`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var, DiffError> {
        let (r, c) = self.d(a, "mean_groups")?;
        if group == 0 || r % group != 0 {
            return Err(shape_err("mean_groups", format!("{r} rows in groups of {group}")));
        }
        let x = self.value(a).data();
        let inv = F::one() / F::lit(group as f64);
        let mut out = vec![F::zero(); (r / group) * c];
        for (i, row) in x.chunks(c).enumerate() {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            for (o, &v) in o.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r / group, c, out)?, Op::MeanGroups { x: a, group }, rg)
    }

    /// Concatenates along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let shapes: Vec<(usize, usize)> = parts.iter().map(|&p| self.d(p, "concat")).collect::<Result<_, _>>()?;
        let t = match axis {
            0 => {
                let c = shapes[0].1;
                if shapes.iter().any(|s| s.1 != c) {
                    return Err(shape_err("concat", format!("column mismatch {shapes:?}")));
                }
                let rows: usize = shapes.iter().map(|s| s.0).sum();
                let mut out = Vec::with_capacity(rows * c);
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, c, out)?
            }
            1 => {
                let r = shapes[0].0;
                if shapes.iter().any(|s| s.0 != r) {
                    return Err(shape_err("concat", format!("row mismatch {shapes:?}")));
                }
                let cols: usize = shapes.iter().map(|s| s.1).sum();
                let mut out = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::matrix(r, cols, out)?
            }
            _ => return Err(shape_err("concat", format!("axis {axis}"))),
        };
        let rg = self.rg(parts);
        self.push(t, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Contiguous block of `len` rows (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let (r, c) = self.d(a, "slice")?;
        let x = self.value(a);
        let t = match axis {
            0 if start + len <= r => Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?,
            1 if start + len <= c => {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&x.row_slice(i)[start..start + len]);
                }
                Tensor::matrix(r, len, out)?
            }
            _ => return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {r}x{c}", start + len))),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Slice { x: a, axis, start }, rg)
    }

    /// Splits into consecutive pieces of the given sizes along `axis`.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, DiffError> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.d(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let (_, c) = self.d(a, "softmax")?;
        let x = self.value(a);
        let mut out = vec![F::zero(); x.len()];
        softmax_rows(x.data(), c, &mut out);
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let (_, c) = self.d(a, "log_softmax")?;
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let floor = F::lit(LOG_FLOOR);
        let t = self.value(a).map(|v| v.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(|v| v.exp());
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    /// Per-row normalisation with learnable `1 x c` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let (r, c) = self.d(a, "layer_norm")?;
        if self.d(gain, "layer_norm")? != (1, c) || self.d(bias, "layer_norm")? != (1, c) {
            return Err(shape_err("layer_norm", format!("gain/bias must be 1x{c}")));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let n = F::lit(c as f64);
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(&[a, gain, bias]);
        self.push(t, Op::LayerNorm { x: a, gain, bias, xhat, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences stacked row-wise. `q`, `k`, `v` are `(groups * t) x d`;
    /// heads split the `d` columns evenly. Attention weights are dropped with
    /// probability `drop` in training mode.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize, drop: f64) -> Result<Var, DiffError> {
        let (n, d) = self.d(q, "attention")?;
        if self.d(k, "attention")? != (n, d) || self.d(v, "attention")? != (n, d) {
            return Err(shape_err("attention", "q, k, v shapes differ".into()));
        }
        if groups == 0 || n % groups != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{n}x{d} with {groups} groups, {heads} heads")));
        }
        let t = n / groups;
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut probs = vec![F::zero(); groups * heads * t * t];
        let mask = if self.train && drop > 0.0 {
            let keep = 1.0 - drop;
            let thr = keep_threshold(keep);
            let s = F::lit(1.0 / keep);
            Some((0..probs.len()).map(|_| if (self.rng.next_u32() as u64) < thr { s } else { F::zero() }).collect::<Vec<F>>())
        } else {
            None
        };
        let mut out = vec![F::zero(); n * d];
        let mut scores = vec![F::zero(); t * t];
        let mut dropped = vec![F::zero(); t * t];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for g in 0..groups {
            for h in 0..heads {
                let off = g * t * d + h * dh;
                let poff = (g * heads + h) * t * t;
                F::gemm(t, dh, t, scale, &qd[off..], d as isize, 1, &kd[off..], 1, d as isize, F::zero(), &mut scores, t as isize, 1);
                let p = &mut probs[poff..poff + t * t];
                softmax_rows(&scores, t, p);
                let pv: &[F] = match &mask {
                    Some(m) => {
                        for ((o, &pp), &mm) in dropped.iter_mut().zip(p.iter()).zip(&m[poff..poff + t * t]) {
                            *o = pp * mm;
                        }
                        &dropped
                    }
                    None => p,
                };
                F::gemm(t, t, dh, F::one(), pv, t as isize, 1, &vd[off..], d as isize, 1, F::zero(), &mut out[off..], d as isize, 1);
            }
        }
        let tensor = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(tensor, Op::Attention { q, k, v, groups, heads, probs, mask }, rg)
    }

    /// Row gather: output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = self.d(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {r} rows")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(x.row_slice(i));
        }
        let t = Tensor::matrix(index.len(), c, out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::GatherRows { x: a, index: index.to_vec() }, rg)
    }

    /// Sum of absolute values, as a `1 x 1` tensor.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = Tensor::scalar(self.value(a).data().iter().map(|v| v.abs()).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::L1(a), rg)
    }

    /// Inverted dropout. Identity outside training mode or when `drop == 0`.
    pub fn dropout(&mut self, a: Var, drop: f64) -> Result<Var, DiffError> {
        if !self.train || drop <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - drop;
        let thr = keep_threshold(keep);
        let s = F::lit(1.0 / keep);
        let n = self.value(a).len();
        let mask: Vec<F> = (0..n).map(|_| if (self.rng.next_u32() as u64) < thr { s } else { F::zero() }).collect();
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Dropout { x: a, mask }, rg)
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, DiffError> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(DiffError::Contract(format!("backward needs a scalar output, got shape {:?}", value.shape())));
        }
        self.backward_seeded(&[(loss, Tensor::full(value.shape(), F::one()))])
    }

    /// Reverse pass from arbitrary upstream gradients. Used when a batch-level
    /// term couples several per-sample graphs.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<F>)]) -> Result<Gradients<F>, DiffError> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(DiffError::Contract(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
            accumulate(&mut grads, *v, g.clone());
            top = top.max(v.0);
        }
        for i in (0..=top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<(), DiffError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a), "matmul")?;
                let (_, n) = dims(self.value(*b), "matmul")?;
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, F::one(), gd, n as isize, 1, self.value(*b).data(), 1, n as isize, F::zero(), &mut da, k as isize, 1);
                    accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    F::gemm(k, m, n, F::one(), self.value(*a).data(), 1, k as isize, gd, n as isize, 1, F::zero(), &mut db, n as isize, 1);
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let mut db = self.reduce_bcast(g, *b, *bc);
                    if matches!(node.op, Op::Sub(..)) {
                        db.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b).data();
                let c = av.cols();
                let bval = |i: usize| match bc {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Row => bv[i % c],
                    Bcast::Col => bv[i / c],
                };
                if self.wants(*a) {
                    let da: Vec<F> = gd.iter().enumerate().map(|(i, &gv)| gv * bval(i)).collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let prod = Tensor::new(av.shape().to_vec(), gd.iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect())?;
                    accumulate(grads, *b, self.reduce_bcast(&prod, *b, *bc));
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, g.map(|v| v * *s));
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gd[0]));
            }
            Op::Mean { x, axis } => {
                let xv = self.value(*x);
                let (r, c) = dims(xv, "mean")?;
                let out: Vec<F> = match axis {
                    0 => {
                        let inv = F::one() / F::lit(r as f64);
                        (0..r * c).map(|i| gd[i % c] * inv).collect()
                    }
                    _ => {
                        let inv = F::one() / F::lit(c as f64);
                        (0..r * c).map(|i| gd[i / c] * inv).collect()
                    }
                };
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::MeanGroups { x, group } => {
                let xv = self.value(*x);
                let (r, c) = dims(xv, "mean_groups")?;
                let inv = F::one() / F::lit(*group as f64);
                let out: Vec<F> = (0..r * c).map(|i| gd[(i / c / group) * c + i % c] * inv).collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::Concat { parts, axis } => {
                let (r, cols) = dims(g, "concat")?;
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (pr, pc) = dims(pv, "concat")?;
                    if self.wants(p) {
                        let piece = if *axis == 0 {
                            gd[offset * cols..(offset + pr) * cols].to_vec()
                        } else {
                            let mut v = Vec::with_capacity(pr * pc);
                            for i in 0..r {
                                v.extend_from_slice(&gd[i * cols + offset..i * cols + offset + pc]);
                            }
                            v
                        };
                        accumulate(grads, p, Tensor::new(pv.shape().to_vec(), piece)?);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (r, c) = dims(xv, "slice")?;
                let (gr, gc) = dims(g, "slice")?;
                let mut out = vec![F::zero(); r * c];
                if *axis == 0 {
                    out[start * c..(start + gr) * c].copy_from_slice(gd);
                } else {
                    for i in 0..r {
                        out[i * c + start..i * c + start + gc].copy_from_slice(&gd[i * gc..(i + 1) * gc]);
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::Transpose(a) => {
                let (r, c) = dims(g, "transpose")?;
                let mut out = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = gd[i * c + j];
                    }
                }
                accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), out)?);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut out = vec![F::zero(); y.len()];
                for ((yr, gr), o) in y.chunks(c).zip(gd.chunks(c)).zip(out.chunks_mut(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), out)?);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut out = vec![F::zero(); y.len()];
                for ((yr, gr), o) in y.chunks(c).zip(gd.chunks(c)).zip(out.chunks_mut(c)) {
                    let total: F = gr.iter().copied().sum();
                    for j in 0..c {
                        o[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), out)?);
            }
            Op::Log(a) => {
                let floor = F::lit(LOG_FLOOR);
                let xv = self.value(*a);
                let out = xv.data().iter().zip(gd).map(|(&x, &gv)| if x > floor { gv / x } else { F::zero() }).collect();
                accumulate(grads, *a, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::Exp(a) => {
                let out = node.value.data().iter().zip(gd).map(|(&y, &gv)| y * gv).collect();
                accumulate(grads, *a, Tensor::new(node.value.shape().to_vec(), out)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let r = node.value.rows();
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let n = F::lit(c as f64);
                    let mut dx = vec![F::zero(); r * c];
                    let mut dxhat = vec![F::zero(); c];
                    for i in 0..r {
                        let h = &xhat[i * c..(i + 1) * c];
                        let gr = &gd[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: F = dxhat.iter().copied().sum();
                        let s2: F = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[i] / n;
                        for j in 0..c {
                            dx[i * c + j] = k * (n * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![F::zero(); c];
                    let mut db = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * xhat[i * c + j];
                            db[j] += gd[i * c + j];
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(grads, *gain, Tensor::new(self.value(*gain).shape().to_vec(), dg)?);
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let out = xv.data().iter().zip(gd).map(|(&x, &gv)| gv * gelu_parts(x).1).collect();
                accumulate(grads, *a, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::Attention { q, k, v, groups, heads, probs, mask } => {
                self.backprop_attention(*q, *k, *v, *groups, *heads, probs, mask.as_deref(), gd, grads)?
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut out = vec![F::zero(); xv.len()];
                for (row, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += gd[row * c + j];
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::L1(a) => {
                let xv = self.value(*a);
                let out = xv
                    .data()
                    .iter()
                    .map(|&x| {
                        if x > F::zero() {
                            gd[0]
                        } else if x < F::zero() {
                            -gd[0]
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *a, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::Dropout { x, mask } => {
                let out = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), out)?);
            }
        }
        Ok(())
    }

    fn reduce_bcast(&self, g: &Tensor<F>, target: Var, bc: Bcast) -> Tensor<F> {
        let shape = self.value(target).shape().to_vec();
        let c = g.cols();
        let gd = g.data();
        let data = match bc {
            Bcast::Same => gd.to_vec(),
            Bcast::Scalar => vec![g.sum()],
            Bcast::Row => {
                let mut out = vec![F::zero(); c];
                for row in gd.chunks(c) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
            Bcast::Col => gd.chunks(c).map(|row| row.iter().copied().sum()).collect(),
        };
        Tensor::new(shape, data).expect("broadcast reduction preserves operand shape")
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: &[F],
        mask: Option<&[F]>,
        gd: &[F],
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<(), DiffError> {
        let (n, d) = dims(self.value(q), "attention")?;
        let t = n / groups;
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![F::zero(); n * d];
        let mut dk = vec![F::zero(); n * d];
        let mut dv = vec![F::zero(); n * d];
        let mut pdrop = vec![F::zero(); t * t];
        let mut dp = vec![F::zero(); t * t];
        for g in 0..groups {
            for h in 0..heads {
                let off = g * t * d + h * dh;
                let poff = (g * heads + h) * t * t;
                let p = &probs[poff..poff + t * t];
                let pv: &[F] = match mask {
                    Some(m) => {
                        for ((o, &pp), &mm) in pdrop.iter_mut().zip(p).zip(&m[poff..poff + t * t]) {
                            *o = pp * mm;
                        }
                        &pdrop
                    }
                    None => p,
                };
                // dV = P'^T dO
                F::gemm(t, t, dh, F::one(), pv, 1, t as isize, &gd[off..], d as isize, 1, F::zero(), &mut dv[off..], d as isize, 1);
                // dP' = dO V^T
                F::gemm(t, dh, t, F::one(), &gd[off..], d as isize, 1, &vd[off..], 1, d as isize, F::zero(), &mut dp, t as isize, 1);
                if let Some(m) = mask {
                    for (x, &mm) in dp.iter_mut().zip(&m[poff..poff + t * t]) {
                        *x *= mm;
                    }
                }
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..t {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                F::gemm(t, t, dh, scale, &dp, t as isize, 1, &kd[off..], d as isize, 1, F::zero(), &mut dq[off..], d as isize, 1);
                F::gemm(t, t, dh, scale, &dp, 1, t as isize, &qd[off..], d as isize, 1, F::zero(), &mut dk[off..], d as isize, 1);
            }
        }
        let shape = vec![n, d];
        if self.wants(q) {
            accumulate(grads, q, Tensor::new(shape.clone(), dq)?);
        }
        if self.wants(k) {
            accumulate(grads, k, Tensor::new(shape.clone(), dk)?);
        }
        if self.wants(v) {
            accumulate(grads, v, Tensor::new(shape, dv)?);
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
