//! Small reverse-mode differentiation substrate: a vector-valued tape over a
//! flat parameter vector, dense layers, Adam and a finite-difference check.
//!
//! Forward evaluation through [`Mlp::forward`] and through the tape share the
//! same kernels, so both paths produce bit-identical outputs.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("unknown parameter block `{0}`")]
    UnknownBlock(String),
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector partitioned into named blocks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<Block>,
}

impl ParamVector {
    /// Appends a zero block and returns its offset.
    pub fn push_block(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.values.len();
        self.values.resize(offset + len, 0.0);
        self.layout.push(Block { name: name.into(), offset, len });
        offset
    }

    pub fn block(&self, name: &str) -> Result<&Block, LearnError> {
        self.layout.iter().find(|b| b.name == name).ok_or_else(|| LearnError::UnknownBlock(name.to_string()))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64], LearnError> {
        let b = self.block(name)?;
        Ok(&self.values[b.offset..b.offset + b.len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Blocks are contiguous, in order, and cover every value.
    pub fn layout_is_partition(&self) -> bool {
        let mut next = 0;
        for b in &self.layout {
            if b.offset != next {
                return false;
            }
            next += b.len;
        }
        next == self.values.len()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Kernels

/// `out = W x + b` with `W` stored row-major as `n_out x n_in`.
pub fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        let mut acc = *bias;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Sum of a diagonal-Gaussian log density over dimensions. `log_std` is
/// clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn gaussian_loglik(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((m, ls), x) in mean.iter().zip(log_std).zip(a) {
        let ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let z = (x - m) * (-ls).exp();
        total += -0.5 * z * z - ls - HALF_LN_TAU;
    }
    total
}

/// Sum of vectors, computed per coordinate over the sorted addends so the
/// result does not depend on the order of `parts`.
fn sorted_sum(parts: &[&[f64]], out: &mut [f64], scratch: &mut Vec<f64>) {
    for (k, o) in out.iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(parts.iter().map(|p| p[k]));
        scratch.sort_by(f64::total_cmp);
        *o = scratch.iter().sum();
    }
}

// ---------------------------------------------------------------------------
// Tape

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Dense { x: Var, w: usize, b: usize },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    SumSorted(Vec<Var>),
    Add(Var, Var),
    Scale(Var, f64),
    /// Scalar sum of entries.
    Sum(Var),
    /// Scalar `sum (x - t)^2`.
    SqErr(Var, Vec<f64>),
    /// Scalar log-likelihood of `target` under `(mean, log_std)`.
    GaussianLogLik { mean: Var, log_std: Var, target: Vec<f64> },
    /// Scalar mean of scalar nodes.
    Mean(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::SumSorted(_) => "sum",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "reduce-sum",
            Op::SqErr(..) => "squared-error",
            Op::GaussianLogLik { .. } => "gaussian-loglik",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    start: usize,
    len: usize,
}

/// Records operations over a borrowed parameter vector.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    vals: Vec<f64>,
    scratch: Vec<f64>,
    /// Sign bits of ReLU inputs and clamp activity, in evaluation order.
    pattern: Vec<bool>,
    first_nonfinite: Option<usize>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self { params, nodes: Vec::new(), vals: Vec::new(), scratch: Vec::new(), pattern: Vec::new(), first_nonfinite: None }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.vals[n.start..n.start + n.len]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    /// Activation pattern used to detect kink-straddling perturbations.
    pub fn pattern(&self) -> &[bool] {
        &self.pattern
    }

    fn push(&mut self, op: Op, vals: impl IntoIterator<Item = f64>) -> Var {
        let start = self.vals.len();
        self.vals.extend(vals);
        let len = self.vals.len() - start;
        if self.first_nonfinite.is_none() && !self.vals[start..].iter().all(|v| v.is_finite()) {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node { op, start, len });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, x: &[f64]) -> Var {
        self.push(Op::Input, x.iter().copied())
    }

    /// Dense layer reading `n_out x n_in` weights at `w` and `n_out` biases at `b`.
    pub fn dense(&mut self, x: Var, w: usize, b: usize, n_out: usize) -> Var {
        let n_in = self.len(x);
        let mut out = vec![0.0; n_out];
        dense(&self.params[w..w + n_in * n_out], &self.params[b..b + n_out], self.value(x), &mut out);
        self.push(Op::Dense { x, w, b }, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (s, l) = (n.start, n.len);
        for k in s..s + l {
            let v = self.vals[k];
            self.pattern.push(v > 0.0);
        }
        let out: Vec<f64> = self.vals[s..s + l].iter().map(|&v| relu(v)).collect();
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid(x), out)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let out: Vec<f64> = parts.iter().flat_map(|p| self.value(*p).to_vec()).collect();
        self.push(Op::Concat(parts.to_vec()), out)
    }

    /// Entries `start..start + len` of `x`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x)[start..start + len].to_vec();
        self.push(Op::Slice(x, start), out)
    }

    /// Elementwise sum of equal-length vectors, independent of their order.
    /// An empty list yields a zero vector of length `len`.
    pub fn sum_all(&mut self, parts: &[Var], len: usize) -> Var {
        let mut out = vec![0.0; len];
        if !parts.is_empty() {
            let mut scratch = std::mem::take(&mut self.scratch);
            let slices: Vec<&[f64]> = parts.iter().map(|p| self.value(*p)).collect();
            assert!(slices.iter().all(|s| s.len() == len), "sum_all over vectors of unequal length");
            sorted_sum(&slices, &mut out, &mut scratch);
            self.scratch = scratch;
        }
        self.push(Op::SumSorted(parts.to_vec()), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(Op::Sum(a), [s])
    }

    pub fn sq_err(&mut self, a: Var, target: &[f64]) -> Var {
        let s: f64 = self.value(a).iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum();
        self.push(Op::SqErr(a, target.to_vec()), [s])
    }

    pub fn gaussian_loglik(&mut self, mean: Var, log_std: Var, target: &[f64]) -> Var {
        let n = &self.nodes[log_std.0];
        for &ls in &self.vals[n.start..n.start + n.len] {
            self.pattern.push(ls < LOG_STD_MIN);
            self.pattern.push(ls > LOG_STD_MAX);
        }
        let s = gaussian_loglik(self.value(mean), self.value(log_std), target);
        self.push(Op::GaussianLogLik { mean, log_std, target: target.to_vec() }, [s])
    }

    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let s: f64 = parts.iter().map(|p| self.scalar(*p)).sum::<f64>() / parts.len() as f64;
        self.push(Op::Mean(parts.to_vec()), [s])
    }

    /// Gradient of the scalar node `loss` with respect to the parameters.
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>, LearnError> {
        if let Some(node) = self.first_nonfinite {
            return Err(LearnError::NonFinite { op: self.nodes[node].op.name(), node });
        }
        let mut adj = vec![0.0; self.vals.len()];
        let mut grad = vec![0.0; self.params.len()];
        adj[self.nodes[loss.0].start] = 1.0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let (s, l) = (node.start, node.len);
            if adj[s..s + l].iter().all(|&g| g == 0.0) {
                continue;
            }
            let span = |v: &Var| {
                let n = &self.nodes[v.0];
                n.start..n.start + n.len
            };
            match &node.op {
                Op::Input => {}
                Op::Dense { x, w, b } => {
                    let xs = span(x);
                    let n_in = xs.len();
                    for o in 0..l {
                        let g = adj[s + o];
                        if g == 0.0 {
                            continue;
                        }
                        grad[b + o] += g;
                        let row = w + o * n_in;
                        for k in 0..n_in {
                            grad[row + k] += g * self.vals[xs.start + k];
                            adj[xs.start + k] += g * self.params[row + k];
                        }
                    }
                }
                Op::Relu(x) => {
                    let xs = span(x);
                    for k in 0..l {
                        if self.vals[xs.start + k] > 0.0 {
                            adj[xs.start + k] += adj[s + k];
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let xs = span(x);
                    for k in 0..l {
                        let y = self.vals[s + k];
                        adj[xs.start + k] += adj[s + k] * y * (1.0 - y);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = s;
                    for p in parts {
                        let ps = span(p);
                        for k in 0..ps.len() {
                            adj[ps.start + k] += adj[off + k];
                        }
                        off += ps.len();
                    }
                }
                Op::Slice(x, start) => {
                    let xs = span(x);
                    for k in 0..l {
                        adj[xs.start + start + k] += adj[s + k];
                    }
                }
                Op::SumSorted(parts) => {
                    for p in parts {
                        let ps = span(p);
                        for k in 0..l {
                            adj[ps.start + k] += adj[s + k];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let vs = span(v);
                        for k in 0..l {
                            adj[vs.start + k] += adj[s + k];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let vs = span(a);
                    for k in 0..l {
                        adj[vs.start + k] += adj[s + k] * c;
                    }
                }
                Op::Sum(a) => {
                    let g = adj[s];
                    for k in span(a) {
                        adj[k] += g;
                    }
                }
                Op::SqErr(a, t) => {
                    let g = adj[s];
                    let vs = span(a);
                    for (k, tk) in t.iter().enumerate() {
                        adj[vs.start + k] += g * 2.0 * (self.vals[vs.start + k] - tk);
                    }
                }
                Op::GaussianLogLik { mean, log_std, target } => {
                    let g = adj[s];
                    let (ms, ls) = (span(mean), span(log_std));
                    for (k, x) in target.iter().enumerate() {
                        let raw = self.vals[ls.start + k];
                        let lsc = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                        let inv = (-lsc).exp();
                        let z = (x - self.vals[ms.start + k]) * inv;
                        adj[ms.start + k] += g * z * inv;
                        if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                            adj[ls.start + k] += g * (z * z - 1.0);
                        }
                    }
                }
                Op::Mean(parts) => {
                    let g = adj[s] / parts.len() as f64;
                    for p in parts {
                        adj[self.nodes[p.0].start] += g;
                    }
                }
            }
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(LearnError::NonFinite { op: "backward", node: k });
        }
        Ok(grad)
    }
}

/// Evaluates `f` on a fresh tape over `params` and returns the loss and its gradient.
pub fn value_and_grad<F>(params: &[f64], f: F) -> Result<(f64, Vec<f64>), LearnError>
where
    F: Fn(&mut Tape) -> Var,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape);
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), g))
}

// ---------------------------------------------------------------------------
// Dense networks

/// Fully connected network with ReLU hidden layers and a linear output,
/// stored as consecutive `(weights, bias)` blocks in a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    /// Offset of each layer's weights and bias.
    pub layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Allocates the layers in `p` under `name/<layer>/{w,b}`.
    pub fn allocate(p: &mut ParamVector, name: &str, sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, s)| {
                let w = p.push_block(format!("{name}/{k}/w"), s[0] * s[1]);
                let b = p.push_block(format!("{name}/{k}/b"), s[1]);
                (w, b)
            })
            .collect();
        Self { sizes: sizes.to_vec(), layers }
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("non-empty architecture")
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero biases.
    pub fn init(&self, p: &mut ParamVector, rng: &mut SimRng) {
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for v in &mut p.values[*w..w + n_in * n_out] {
                *v = rng.random_range(-bound..bound);
            }
            p.values[*b..b + n_out].fill(0.0);
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Result<Vec<f64>, LearnError> {
        if x.len() != self.input_width() {
            return Err(LearnError::Dimension { expected: self.input_width(), got: x.len() });
        }
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let mut out = vec![0.0; n_out];
            dense(&p[*w..w + n_in * n_out], &p[*b..b + n_out], &cur, &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = relu(*v));
            }
            cur = out;
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            cur = tape.dense(cur, *w, *b, self.sizes[k + 1]);
            if k < last {
                cur = tape.relu(cur);
            }
        }
        cur
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update of `p` in place.
    pub fn update(&mut self, p: &mut [f64], g: &[f64]) {
        assert_eq!(p.len(), self.m.len(), "parameter length differs from optimizer state");
        assert_eq!(g.len(), self.m.len(), "gradient length differs from optimizer state");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..p.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over checked coordinates.
    pub max_rel_err: f64,
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbation changes the activation pattern.
    pub excluded: Vec<usize>,
}

/// Relative error `|a - b| / max(|a| + |b|, 1e-6)`; the floor keeps
/// near-zero gradients from dominating through roundoff.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Compares the tape gradient against central differences with step `h`
/// on every coordinate, skipping those whose perturbation flips a ReLU or
/// clamp.
pub fn finite_diff_check<F>(params: &[f64], h: f64, f: F) -> Result<GradCheck, LearnError>
where
    F: Fn(&mut Tape) -> Var,
{
    finite_diff_check_coords(params, h, 0..params.len(), f)
}

/// [`finite_diff_check`] restricted to the given coordinates.
pub fn finite_diff_check_coords<F>(
    params: &[f64],
    h: f64,
    coords: impl IntoIterator<Item = usize>,
    f: F,
) -> Result<GradCheck, LearnError>
where
    F: Fn(&mut Tape) -> Var,
{
    let mut base = Tape::new(params);
    let loss = f(&mut base);
    let grad = base.backward(loss)?;
    let pattern = base.pattern().to_vec();
    let mut report = GradCheck::default();
    let mut p = params.to_vec();
    for k in coords {
        let eval = |p: &[f64]| {
            let mut t = Tape::new(p);
            let l = f(&mut t);
            (t.scalar(l), t.pattern() == pattern.as_slice())
        };
        p[k] = params[k] + h;
        let (up, same_up) = eval(&p);
        p[k] = params[k] - h;
        let (down, same_down) = eval(&p);
        p[k] = params[k];
        if !(same_up && same_down) {
            report.excluded.push(k);
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(fd, grad[k]);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some(k);
        }
    }
    Ok(report)
}
