//! Wengert tape: records primitive operations during the forward pass and
//! replays them in reverse to accumulate vector-Jacobian products.
//!
//! One tape per batch; build it, call [`Tape::backward`] once, drop it.
//! Custom-gradient nodes let callers splice hand-derived backward rules
//! (e.g. the stopping-time surrogate) into an otherwise autodiff graph.

use super::array::{matmul, matmul_nt, matmul_tn, Array};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for a custom node: maps the upstream gradient to one
/// gradient per input. Must be pure.
pub type CustomVjp = Box<dyn Fn(&Array) -> Vec<Array>>;

enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    Offset(Var, f32),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Concat(Vec<Var>),
    Slice { input: Var, offset: usize },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MaxReduce { input: Var, argmax: usize },
    Clamp { input: Var, lo: f32, hi: f32 },
    Broadcast(Var),
    Tile { input: Var, reps: usize },
    Custom { inputs: Vec<Var>, vjp: CustomVjp },
}

struct Node {
    op: Op,
    value: Array,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
///
/// Every trainable leaf gets an entry (zeros if the loss did not touch it);
/// all other vars report `None`.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a trainable leaf; panics if `v` is not one.
    pub fn expect(&self, v: Var) -> &Array {
        self.get(v).expect("var is not a trainable leaf")
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var(id)
    }

    fn push_checked(&mut self, op: Op, value: Array, ctx: &str) -> Result<Var, DiffError> {
        value.check_finite(ctx)?;
        Ok(self.push(op, value))
    }

    pub fn leaf(&mut self, value: Array, trainable: bool) -> Var {
        self.push(Op::Leaf { trainable }, value)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: f32) -> Var {
        self.leaf(Array::scalar(v), false)
    }

    fn binary_elementwise(&self, a: Var, b: Var, name: &str) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::ShapeMismatch(format!(
                "{name}: {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elementwise(a, b, "add")?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Add(a, b), Array::raw(shape, data), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elementwise(a, b, "sub")?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Sub(a, b), Array::raw(shape, data), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elementwise(a, b, "mul")?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Mul(a, b), Array::raw(shape, data), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elementwise(a, b, "div")?;
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Div(a, b), Array::raw(shape, data), "div")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| -x).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Neg(a), Array::raw(shape, data), "neg")
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Scale(a, c), Array::raw(shape, data), "scale")
    }

    /// Add a constant to every element.
    pub fn offset(&mut self, a: Var, c: f32) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Offset(a, c), Array::raw(shape, data), "offset")
    }

    /// Matrix product. `a` may be 1-D (treated as a single row, yielding a
    /// 1-D result) or 2-D; `b` must be 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sb.len() != 2 {
            return Err(DiffError::ShapeMismatch(format!(
                "matmul rhs must be 2-D, got {sb:?}"
            )));
        }
        let (m, k, one_d) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => {
                return Err(DiffError::ShapeMismatch(format!(
                    "matmul lhs must be 1-D or 2-D, got {sa:?}"
                )))
            }
        };
        if sb[0] != k {
            return Err(DiffError::ShapeMismatch(format!(
                "matmul inner dims: {sa:?} vs {sb:?}"
            )));
        }
        let n = sb[1];
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if one_d { vec![n] } else { vec![m, n] };
        self.push_checked(Op::MatMul { a, b, m, k, n }, Array::raw(shape, data), "matmul")
    }

    /// Concatenates the flattened inputs into a 1-D array.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArg("concat of zero arrays".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let n = data.len();
        self.push_checked(
            Op::Concat(parts.to_vec()),
            Array::raw(vec![n], data),
            "concat",
        )
    }

    /// Contiguous element slice `[offset, offset+len)` of the flattened
    /// input, reshaped to `shape`.
    pub fn slice(
        &mut self,
        input: Var,
        offset: usize,
        len: usize,
        shape: Vec<usize>,
    ) -> Result<Var, DiffError> {
        let src = self.value(input);
        if offset + len > src.numel() {
            return Err(DiffError::ShapeMismatch(format!(
                "slice [{offset}, {}) out of bounds for {} elements",
                offset + len,
                src.numel()
            )));
        }
        if shape.iter().product::<usize>() != len {
            return Err(DiffError::ShapeMismatch(format!(
                "slice shape {shape:?} does not hold {len} elements"
            )));
        }
        let data = src.data()[offset..offset + len].to_vec();
        self.push_checked(Op::Slice { input, offset }, Array::raw(shape, data), "slice")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Tanh(a), Array::raw(shape, data), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Relu(a), Array::raw(shape, data), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Exp(a), Array::raw(shape, data), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Log(a), Array::raw(shape, data), "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Sqrt(a), Array::raw(shape, data), "sqrt")
    }

    /// Row-wise softmax over the last axis (max-subtracted, f64 row sums).
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = self.value(a);
        let d = src.last_dim();
        let data = rowwise_softmax(src.data(), d);
        let shape = src.shape().to_vec();
        self.push_checked(Op::Softmax(a), Array::raw(shape, data), "softmax")
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = self.value(a);
        let d = src.last_dim();
        let mut data = Vec::with_capacity(src.numel());
        for row in src.data().chunks(d) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = row.iter().map(|x| ((x - max) as f64).exp()).sum();
            let lse = lse.ln() as f32 + max;
            data.extend(row.iter().map(|x| x - lse));
        }
        let shape = src.shape().to_vec();
        self.push_checked(Op::LogSoftmax(a), Array::raw(shape, data), "log_softmax")
    }

    /// Full reduction to a scalar, accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s: f64 = self.value(a).data().iter().map(|x| *x as f64).sum();
        self.push_checked(Op::Sum(a), Array::scalar(s as f32), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(DiffError::InvalidArg("mean of empty array".into()));
        }
        let s: f64 = self.value(a).data().iter().map(|x| *x as f64).sum();
        self.push_checked(Op::Mean(a), Array::scalar((s / n as f64) as f32), "mean")
    }

    /// Maximum element (scalar); gradient flows to the first argmax.
    pub fn max(&mut self, a: Var) -> Result<Var, DiffError> {
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(DiffError::InvalidArg("max of empty array".into()));
        }
        let (argmax, best) = data
            .iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        self.push_checked(
            Op::MaxReduce { input: a, argmax },
            Array::scalar(best),
            "max",
        )
    }

    /// Clamp each element to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var, DiffError> {
        if lo > hi {
            return Err(DiffError::InvalidArg(format!("clamp lo {lo} > hi {hi}")));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked(Op::Clamp { input: a, lo, hi }, Array::raw(shape, data), "clamp")
    }

    /// Replicates a scalar into a 1-D array of length `n`.
    pub fn broadcast(&mut self, a: Var, n: usize) -> Result<Var, DiffError> {
        if !self.value(a).is_scalar() {
            return Err(DiffError::ShapeMismatch(format!(
                "broadcast expects a scalar, got {:?}",
                self.value(a).shape()
            )));
        }
        let v = self.value(a).item();
        self.push_checked(Op::Broadcast(a), Array::raw(vec![n], vec![v; n]), "broadcast")
    }

    /// Repeats a 1-D array as the rows of a `reps × d` matrix.
    pub fn tile(&mut self, a: Var, reps: usize) -> Result<Var, DiffError> {
        let src = self.value(a);
        if src.shape().len() != 1 {
            return Err(DiffError::ShapeMismatch(format!(
                "tile expects 1-D input, got {:?}",
                src.shape()
            )));
        }
        let d = src.numel();
        let mut data = Vec::with_capacity(d * reps);
        for _ in 0..reps {
            data.extend_from_slice(src.data());
        }
        self.push_checked(
            Op::Tile { input: a, reps },
            Array::raw(vec![reps, d], data),
            "tile",
        )
    }

    /// Records a node with an arbitrary forward value whose backward pass is
    /// delegated entirely to `vjp`. The rule receives the upstream gradient
    /// and must return one gradient per entry of `inputs`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Array,
        vjp: CustomVjp,
    ) -> Result<Var, DiffError> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(DiffError::InvalidArg("custom input not on tape".into()));
            }
        }
        self.push_checked(
            Op::Custom { inputs: inputs.to_vec(), vjp },
            value,
            "custom",
        )
    }

    /// Passes `a` through unchanged; the backward sweep invokes `vjp`
    /// instead of autodiff.
    pub fn attach_custom_grad(&mut self, a: Var, vjp: CustomVjp) -> Result<Var, DiffError> {
        let value = self.value(a).clone();
        self.custom(&[a], value, vjp)
    }

    /// Forward identity, zero gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, DiffError> {
        let shape = self.value(a).shape().to_vec();
        self.attach_custom_grad(
            a,
            Box::new(move |_| vec![Array::zeros(shape.clone())]),
        )
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// trainable leaf (zeros where the loss does not depend on the leaf).
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.nodes.is_empty() {
            return Err(DiffError::InvalidArg("backward on an empty tape".into()));
        }
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(DiffError::NotScalar {
                numel: loss_val.numel(),
            });
        }

        let mut acc: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        acc[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let up = match acc[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        acc[id] = Some(up);
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    add_into(&mut acc, *a, &up, self);
                    add_into(&mut acc, *b, &up, self);
                }
                Op::Sub(a, b) => {
                    add_into(&mut acc, *a, &up, self);
                    let neg: Vec<f32> = up.iter().map(|g| -g).collect();
                    add_into(&mut acc, *b, &neg, self);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f32> = up
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let gb: Vec<f32> = up
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    add_into(&mut acc, *a, &ga, self);
                    add_into(&mut acc, *b, &gb, self);
                }
                Op::Div(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let ga: Vec<f32> = up.iter().zip(bv).map(|(g, y)| g / y).collect();
                    let gb: Vec<f32> = up
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    add_into(&mut acc, *a, &ga, self);
                    add_into(&mut acc, *b, &gb, self);
                }
                Op::Neg(a) => {
                    let g: Vec<f32> = up.iter().map(|g| -g).collect();
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Scale(a, c) => {
                    let g: Vec<f32> = up.iter().map(|g| g * c).collect();
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Offset(a, _) => {
                    add_into(&mut acc, *a, &up, self);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    let ga = matmul_nt(&up, self.value(*b).data(), m, n, k);
                    let gb = matmul_tn(self.value(*a).data(), &up, k, m, n);
                    add_into(&mut acc, *a, &ga, self);
                    add_into(&mut acc, *b, &gb, self);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        add_into(&mut acc, *p, &up[off..off + len], self);
                        off += len;
                    }
                }
                Op::Slice { input, offset } => {
                    let n = self.value(*input).numel();
                    let mut g = vec![0.0f32; n];
                    g[*offset..*offset + up.len()].copy_from_slice(&up);
                    add_into(&mut acc, *input, &g, self);
                }
                Op::Tanh(a) => {
                    let g: Vec<f32> = up
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Relu(a) => {
                    let g: Vec<f32> = up
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Exp(a) => {
                    let g: Vec<f32> = up
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Log(a) => {
                    let g: Vec<f32> = up
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g / x)
                        .collect();
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Sqrt(a) => {
                    let g: Vec<f32> = up
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * 0.5 / y)
                        .collect();
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Softmax(a) => {
                    let d = node.value.last_dim();
                    let p = node.value.data();
                    let mut g = vec![0.0f32; p.len()];
                    for (r, (prow, uprow)) in p.chunks(d).zip(up.chunks(d)).enumerate() {
                        let dot: f64 = prow
                            .iter()
                            .zip(uprow)
                            .map(|(pj, uj)| (*pj as f64) * (*uj as f64))
                            .sum();
                        for j in 0..d {
                            g[r * d + j] = prow[j] * (uprow[j] - dot as f32);
                        }
                    }
                    add_into(&mut acc, *a, &g, self);
                }
                Op::LogSoftmax(a) => {
                    let d = node.value.last_dim();
                    let y = node.value.data();
                    let mut g = vec![0.0f32; y.len()];
                    for (r, (yrow, uprow)) in y.chunks(d).zip(up.chunks(d)).enumerate() {
                        let upsum: f64 = uprow.iter().map(|u| *u as f64).sum();
                        for j in 0..d {
                            g[r * d + j] = uprow[j] - yrow[j].exp() * upsum as f32;
                        }
                    }
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    let g = vec![up[0]; n];
                    add_into(&mut acc, *a, &g, self);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let g = vec![up[0] / n as f32; n];
                    add_into(&mut acc, *a, &g, self);
                }
                Op::MaxReduce { input, argmax } => {
                    let n = self.value(*input).numel();
                    let mut g = vec![0.0f32; n];
                    g[*argmax] = up[0];
                    add_into(&mut acc, *input, &g, self);
                }
                Op::Clamp { input, lo, hi } => {
                    let g: Vec<f32> = up
                        .iter()
                        .zip(self.value(*input).data())
                        .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                        .collect();
                    add_into(&mut acc, *input, &g, self);
                }
                Op::Broadcast(a) => {
                    let s: f64 = up.iter().map(|g| *g as f64).sum();
                    add_into(&mut acc, *a, &[s as f32], self);
                }
                Op::Tile { input, reps } => {
                    let d = self.value(*input).numel();
                    let mut g = vec![0.0f64; d];
                    for r in 0..*reps {
                        for j in 0..d {
                            g[j] += up[r * d + j] as f64;
                        }
                    }
                    let g: Vec<f32> = g.into_iter().map(|x| x as f32).collect();
                    add_into(&mut acc, *input, &g, self);
                }
                Op::Custom { inputs, vjp } => {
                    let up_arr = Array::raw(node.value.shape().to_vec(), up.clone());
                    let grads = vjp(&up_arr);
                    if grads.len() != inputs.len() {
                        return Err(DiffError::WrongGradShape(format!(
                            "custom vjp returned {} gradients for {} inputs",
                            grads.len(),
                            inputs.len()
                        )));
                    }
                    for (v, g) in inputs.iter().zip(&grads) {
                        if g.shape() != self.value(*v).shape() {
                            return Err(DiffError::WrongGradShape(format!(
                                "custom vjp gradient shape {:?} for input of shape {:?}",
                                g.shape(),
                                self.value(*v).shape()
                            )));
                        }
                        add_into(&mut acc, *v, g.data(), self);
                    }
                }
            }
        }

        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                let shape = node.value.shape().to_vec();
                grads[id] = Some(match acc[id].take() {
                    Some(g) => Array::raw(shape, g),
                    None => Array::zeros(shape),
                });
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_into(acc: &mut [Option<Vec<f32>>], v: Var, g: &[f32], tape: &Tape) {
    match &mut acc[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        None => {
            debug_assert_eq!(tape.value(v).numel(), g.len());
            acc[v.0] = Some(g.to_vec());
        }
    }
}

/// Stable softmax applied independently to each row of `d` entries.
pub fn rowwise_softmax(data: &[f32], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(d) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().map(|x| *x as f64).sum();
        out.extend(exps.iter().map(|x| (*x as f64 / sum) as f32));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mul_product_rule() {
        let mut t = Tape::new();
        let a = t.leaf(Array::from_vec(vec![2.0]), true);
        let b = t.leaf(Array::from_vec(vec![3.0]), true);
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[6.0]);
        let g = t.backward(c).unwrap();
        assert_eq!(g.expect(a).data(), &[3.0]);
        assert_eq!(g.expect(b).data(), &[2.0]);
    }

    #[test]
    fn add_identity_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_vec(vec![5.0]), true);
        let zero = t.constant(Array::from_vec(vec![0.0]));
        let y = t.add(x, zero).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
        let g = t.backward(y).unwrap();
        assert_eq!(g.expect(x).data(), &[1.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Array::from_vec(vec![0.0, 0.0, 0.0]));
        let p = t.softmax(x).unwrap();
        for v in t.value(p).data() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn backward_linear() {
        // loss = w·x with x = [2]
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![0.7]), true);
        let x = t.constant(Array::from_vec(vec![2.0]));
        let wx = t.mul(w, x).unwrap();
        let loss = t.sum(wx).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.expect(w).data(), &[2.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.0, -1.0]), true);
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.expect(w).data(), &[2.0, -2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(
            t.backward(w),
            Err(DiffError::NotScalar { numel: 2 })
        ));
    }

    #[test]
    fn leaf_used_twice_sums_contributions() {
        // loss = w + w should give gradient 2, same as 2*w
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![3.0]), true);
        let s = t.add(w, w).unwrap();
        let loss = t.sum(s).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.expect(w).data(), &[2.0]);
    }

    #[test]
    fn branch_order_does_not_change_gradients() {
        let build = |swap: bool| {
            let mut t = Tape::new();
            let a = t.leaf(Array::from_vec(vec![0.3, -1.2]), true);
            let b = t.leaf(Array::from_vec(vec![0.9, 0.4]), true);
            let (fa, fb);
            if swap {
                fb = t.tanh(b).unwrap();
                fa = t.mul(a, a).unwrap();
            } else {
                fa = t.mul(a, a).unwrap();
                fb = t.tanh(b).unwrap();
            }
            let s = t.add(fa, fb).unwrap();
            let loss = t.sum(s).unwrap();
            let g = t.backward(loss).unwrap();
            (
                g.expect(a).data().to_vec(),
                g.expect(b).data().to_vec(),
            )
        };
        let (ga0, gb0) = build(false);
        let (ga1, gb1) = build(true);
        for (x, y) in ga0.iter().zip(&ga1) {
            assert_relative_eq!(x, y, epsilon = 1e-6);
        }
        for (x, y) in gb0.iter().zip(&gb1) {
            assert_relative_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn unused_trainable_leaf_gets_zeros() {
        let mut t = Tape::new();
        let used = t.leaf(Array::from_vec(vec![1.0]), true);
        let unused = t.leaf(Array::from_vec(vec![1.0, 2.0]), true);
        let loss = t.sum(used).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.expect(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn custom_identity_vjp_matches_plain_value() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.5, -0.5]), true);
        let pass = t
            .attach_custom_grad(w, Box::new(|up| vec![up.clone()]))
            .unwrap();
        assert_eq!(t.value(pass).data(), &[1.5, -0.5]);
        let sq = t.mul(pass, pass).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.expect(w).data(), &[3.0, -1.0]);
    }

    #[test]
    fn stop_gradient_blocks_upstream() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![2.0]), true);
        let blocked = t.stop_gradient(w).unwrap();
        let sq = t.mul(blocked, blocked).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.expect(w).data(), &[0.0]);
    }

    #[test]
    fn custom_vjp_wrong_shape_is_an_error() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.0, 2.0]), true);
        let bad = t
            .attach_custom_grad(w, Box::new(|_| vec![Array::scalar(1.0)]))
            .unwrap();
        let loss = t.sum(bad).unwrap();
        assert!(matches!(
            t.backward(loss),
            Err(DiffError::WrongGradShape(_))
        ));
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let mut t = Tape::new();
        let x = t.constant(Array::from_vec(vec![0.0]));
        assert!(matches!(t.log(x), Err(DiffError::NonFinite { .. })));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Array::new(vec![2, 3], vec![0.0; 6]).unwrap());
        let b = t.constant(Array::new(vec![2, 2], vec![0.0; 4]).unwrap());
        assert!(matches!(t.matmul(a, b), Err(DiffError::ShapeMismatch(_))));
    }

    #[test]
    fn slice_and_concat_roundtrip_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.0, 2.0, 3.0, 4.0]), true);
        let head = t.slice(w, 0, 2, vec![2]).unwrap();
        let tail = t.slice(w, 2, 2, vec![2]).unwrap();
        let back = t.concat(&[tail, head]).unwrap();
        let sq = t.mul(back, back).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.expect(w).data(), &[2.0, 4.0, 6.0, 8.0]);
    }
}
