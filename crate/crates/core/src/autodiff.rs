//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Each
//! operation appends a new [`DiffTensor`] node holding its value buffer, a
//! same-shaped gradient buffer, and the rule needed to push gradients back
//! into its operands. [`Tape::backward`] replays the records once, in
//! reverse creation order, which is a valid topological order by
//! construction (an operand always exists before its output).
//!
//! Tensors are rank 1 to 3, row-major, double precision. The op set is
//! deliberately small: matrix product, transpose, broadcasting add/mul, a
//! handful of pointwise functions, tempered softmax, axis reductions, and
//! concatenation. Everything the model graph needs is composed from these.
//!
//! Tapes are rebuilt per step (define-by-run) and are not shared across
//! threads; distinct tapes may run on distinct workers concurrently.

use crate::error::{Error, Result};

/// Handle to a tensor on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Sum,
    Max,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Log { a: usize },
    Neg { a: usize },
    Relu { a: usize },
    Pow { a: usize, exponent: f64 },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Softmax { a: usize, axis: usize, temperature: f64 },
    Reduce { a: usize, axis: usize, kind: ReduceKind },
    Concat { a: usize, b: usize, axis: usize },
    Reshape { a: usize },
}

/// One node on the tape: a value buffer, its accumulated gradient, and the
/// record of the operation that produced it (`None` for leaves).
#[derive(Debug, Clone)]
pub struct DiffTensor {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Option<Op>,
    name: Option<String>,
}

impl DiffTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn is_leaf(&self) -> bool {
        self.op.is_none()
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::Config(format!(
            "tensor rank must be 1..=3, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Config(format!(
            "tensor extents must be strictly positive, got shape {shape:?}"
        )));
    }
    Ok(())
}

/// Right-aligned broadcast of two shapes: each aligned axis pair must be
/// equal or have one side of extent 1 (missing leading axes count as 1).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[d] = da.max(db);
        } else {
            return Err(Error::Config(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            )));
        }
    }
    Ok(out)
}

/// Per-axis flat strides of `shape` padded to `rank`, with stride 0 on
/// broadcast axes so a walked offset stays put along them.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Visits every element of the broadcast output in row-major order,
/// yielding `(out_flat, a_flat, b_flat)`.
fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for out_flat in 0..total {
        f(out_flat, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= a_strides[d] * out_shape[d];
            ib -= b_strides[d] * out_shape[d];
        }
    }
}

/// Splits `shape` at `axis` into (outer, axis extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Recording tape. All operations append a node and return its id.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<DiffTensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: TensorId) -> &DiffTensor {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Option<Op>) -> TensorId {
        let n = value.len();
        self.nodes.push(DiffTensor {
            shape,
            value,
            grad: vec![0.0; n],
            op,
            name: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>) -> Result<TensorId> {
        check_shape(shape)?;
        if value.len() != numel(shape) {
            return Err(Error::Config(format!(
                "leaf value length {} does not match shape {shape:?}",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, None))
    }

    /// Leaf carrying a name used in diagnostics (gradient checks, training
    /// aborts on non-finite values).
    pub fn leaf_named(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<TensorId> {
        let id = self.leaf(shape, value)?;
        self.nodes[id.0].name = Some(name.to_string());
        Ok(id)
    }

    /// Single-element leaf.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], None)
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Config(format!(
                "matmul requires rank-2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = (sb[0], sb[1]);
        if k != kb {
            return Err(Error::Config(format!(
                "matmul inner extents differ: {sa:?} vs {sb:?}"
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_a = &av[i * k..(i + 1) * k];
            let row_c = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in row_a.iter().enumerate() {
                let row_b = &bv[p * n..(p + 1) * n];
                for j in 0..n {
                    row_c[j] += aip * row_b[j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, Some(Op::Matmul { a: a.0, b: b.0 })))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::Config(format!(
                "transpose requires a rank-2 operand, got {sa:?}"
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Some(Op::Transpose { a: a.0 })))
    }

    fn binary_broadcast(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa == sb {
            let out = self.nodes[a.0]
                .value
                .iter()
                .zip(&self.nodes[b.0].value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(self.push(sa, out, Some(op)));
        }
        let os = broadcast_shape(&sa, &sb)?;
        let stra = broadcast_strides(&sa, os.len());
        let strb = broadcast_strides(&sb, os.len());
        let mut out = vec![0.0; numel(&os)];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for_each_broadcast(&os, &stra, &strb, |o, ia, ib| {
                out[o] = f(av[ia], bv[ib]);
            });
        }
        Ok(self.push(os, out, Some(op)))
    }

    /// Elementwise sum, broadcasting either operand.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    /// Elementwise product, broadcasting either operand.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(shape, out, Some(op))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, stable_sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        self.unary(a, |x| x * factor, Op::Scale { a: a.0, factor })
    }

    pub fn add_scalar(&mut self, a: TensorId, offset: f64) -> TensorId {
        self.unary(a, |x| x + offset, Op::AddScalar { a: a.0 })
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a: a.0, lo, hi })
    }

    /// Natural logarithm. Every input must be strictly positive.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.nodes[a.0].value.iter().find(|v| **v <= 0.0) {
            return Err(Error::Numeric(format!(
                "log: non-positive input {bad}{}",
                self.nodes[a.0]
                    .name
                    .as_deref()
                    .map(|n| format!(" in tensor '{n}'"))
                    .unwrap_or_default()
            )));
        }
        Ok(self.unary(a, f64::ln, Op::Log { a: a.0 }))
    }

    /// Elementwise power with a fixed exponent. A non-integer exponent
    /// requires every base to be non-negative.
    pub fn powf(&mut self, a: TensorId, exponent: f64) -> Result<TensorId> {
        if exponent.fract() != 0.0 && self.nodes[a.0].value.iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric(format!(
                "pow: negative base with non-integer exponent {exponent}"
            )));
        }
        Ok(self.unary(a, |x| x.powf(exponent), Op::Pow { a: a.0, exponent }))
    }

    /// Softmax of `exp((x - slice max) / temperature)` along `axis`,
    /// normalized per slice.
    pub fn softmax_axis(&mut self, a: TensorId, axis: usize, temperature: f64) -> Result<TensorId> {
        if temperature <= 0.0 {
            return Err(Error::Config(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(av[at(k)]);
                }
                let mut sum = 0.0;
                for k in 0..len {
                    let e = ((av[at(k)] - max) / temperature).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        Ok(self.push(shape, out, Some(Op::Softmax { a: a.0, axis, temperature })))
    }

    /// Reduction along `axis`; the axis is removed from the shape (a rank-1
    /// input reduces to a single-element tensor). Max ties resolve to the
    /// first maximal element in row-major order.
    pub fn reduce(&mut self, a: TensorId, axis: usize, kind: ReduceKind) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "reduce axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let v = match kind {
                    ReduceKind::Sum => (0..len).map(|k| av[at(k)]).sum(),
                    ReduceKind::Mean => (0..len).map(|k| av[at(k)]).sum::<f64>() / len as f64,
                    ReduceKind::Max => {
                        let mut best = av[at(0)];
                        for k in 1..len {
                            if av[at(k)] > best {
                                best = av[at(k)];
                            }
                        }
                        best
                    }
                };
                out[o * inner + i] = v;
            }
        }
        Ok(self.push(out_shape, out, Some(Op::Reduce { a: a.0, axis, kind })))
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce(a, axis, ReduceKind::Mean)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce(a, axis, ReduceKind::Sum)
    }

    pub fn max_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce(a, axis, ReduceKind::Max)
    }

    /// Contiguous concatenation along `axis`; all other extents must match.
    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::Config(format!(
                "concat axis {axis} invalid for shapes {sa:?} and {sb:?}"
            )));
        }
        for d in 0..sa.len() {
            if d != axis && sa[d] != sb[d] {
                return Err(Error::Config(format!(
                    "concat non-axis extents differ: {sa:?} vs {sb:?}"
                )));
            }
        }
        let (outer, la, inner) = axis_blocks(&sa, axis);
        let lb = sb[axis];
        let mut out_shape = sa.clone();
        out_shape[axis] = la + lb;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bv[o * lb * inner..(o + 1) * lb * inner]);
        }
        Ok(self.push(out_shape, out, Some(Op::Concat { a: a.0, b: b.0, axis })))
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&mut self, a: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        check_shape(new_shape)?;
        if numel(new_shape) != self.nodes[a.0].value.len() {
            return Err(Error::Config(format!(
                "reshape from {:?} to {new_shape:?} changes element count",
                self.nodes[a.0].shape
            )));
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(new_shape.to_vec(), value, Some(Op::Reshape { a: a.0 })))
    }

    /// Resets every gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulates gradients of every node with respect to `root`, which
    /// must be a single-element tensor. Gradients add onto whatever is
    /// already stored; call [`Tape::zero_grads`] first for a fresh sweep.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Config(format!(
                "backward requires a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        self.nodes[root.0].grad[0] += 1.0;
        for i in (0..=root.0).rev() {
            let Some(op) = self.nodes[i].op else { continue };
            self.step_backward(i, op);
        }
        Ok(())
    }

    fn step_backward(&mut self, out_idx: usize, op: Op) {
        let (head, tail) = self.nodes.split_at_mut(out_idx);
        let out = &tail[0];
        match op {
            Op::Matmul { a, b } => {
                let g = &out.grad;
                let m = head[a].shape[0];
                let k = head[a].shape[1];
                let n = head[b].shape[1];
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                {
                    let av = &head[a].value;
                    let bv = &head[b].value;
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let row_g = &g[i * n..(i + 1) * n];
                            let row_b = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                s += row_g[j] * row_b[j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    for i in 0..m {
                        let row_g = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let row_gb = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                row_gb[j] += aip * row_g[j];
                            }
                        }
                    }
                }
                accumulate(&mut head[a].grad, &ga);
                accumulate(&mut head[b].grad, &gb);
            }
            Op::Transpose { a } => {
                let g = &out.grad;
                let (c, r) = (out.shape[0], out.shape[1]);
                let ga = &mut head[a].grad;
                for i in 0..c {
                    for j in 0..r {
                        ga[j * c + i] += g[i * r + j];
                    }
                }
            }
            Op::Add { a, b } => {
                let g = &out.grad;
                let rank = out.shape.len();
                let stra = broadcast_strides(&head[a].shape, rank);
                let strb = broadcast_strides(&head[b].shape, rank);
                let mut ga = vec![0.0; head[a].value.len()];
                let mut gb = vec![0.0; head[b].value.len()];
                for_each_broadcast(&out.shape, &stra, &strb, |o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] += g[o];
                });
                accumulate(&mut head[a].grad, &ga);
                accumulate(&mut head[b].grad, &gb);
            }
            Op::Mul { a, b } => {
                let g = &out.grad;
                let rank = out.shape.len();
                let stra = broadcast_strides(&head[a].shape, rank);
                let strb = broadcast_strides(&head[b].shape, rank);
                let mut ga = vec![0.0; head[a].value.len()];
                let mut gb = vec![0.0; head[b].value.len()];
                {
                    let av = &head[a].value;
                    let bv = &head[b].value;
                    for_each_broadcast(&out.shape, &stra, &strb, |o, ia, ib| {
                        ga[ia] += g[o] * bv[ib];
                        gb[ib] += g[o] * av[ia];
                    });
                }
                accumulate(&mut head[a].grad, &ga);
                accumulate(&mut head[b].grad, &gb);
            }
            Op::Tanh { a } => {
                for ((ga, &g), &y) in head[a].grad.iter_mut().zip(&out.grad).zip(&out.value) {
                    *ga += g * (1.0 - y * y);
                }
            }
            Op::Sigmoid { a } => {
                for ((ga, &g), &y) in head[a].grad.iter_mut().zip(&out.grad).zip(&out.value) {
                    *ga += g * y * (1.0 - y);
                }
            }
            Op::Log { a } => {
                let xv = head[a].value.clone();
                for ((ga, &g), &x) in head[a].grad.iter_mut().zip(&out.grad).zip(&xv) {
                    *ga += g / x;
                }
            }
            Op::Neg { a } => {
                for (ga, &g) in head[a].grad.iter_mut().zip(&out.grad) {
                    *ga -= g;
                }
            }
            Op::Relu { a } => {
                let xv = head[a].value.clone();
                for ((ga, &g), &x) in head[a].grad.iter_mut().zip(&out.grad).zip(&xv) {
                    if x > 0.0 {
                        *ga += g;
                    }
                }
            }
            Op::Pow { a, exponent } => {
                let xv = head[a].value.clone();
                for ((ga, &g), &x) in head[a].grad.iter_mut().zip(&out.grad).zip(&xv) {
                    // d/dx x^e at x == 0 is taken as 0: the only on-path use
                    // is behind a relu that blocks gradient there anyway,
                    // and e < 1 would otherwise produce an infinity.
                    if x != 0.0 {
                        *ga += g * exponent * x.powf(exponent - 1.0);
                    }
                }
            }
            Op::Scale { a, factor } => {
                for (ga, &g) in head[a].grad.iter_mut().zip(&out.grad) {
                    *ga += g * factor;
                }
            }
            Op::AddScalar { a } => {
                for (ga, &g) in head[a].grad.iter_mut().zip(&out.grad) {
                    *ga += g;
                }
            }
            Op::Clamp { a, lo, hi } => {
                let xv = head[a].value.clone();
                for ((ga, &g), &x) in head[a].grad.iter_mut().zip(&out.grad).zip(&xv) {
                    if x >= lo && x <= hi {
                        *ga += g;
                    }
                }
            }
            Op::Softmax { a, axis, temperature } => {
                let (outer, len, inner) = axis_blocks(&out.shape, axis);
                let y = &out.value;
                let g = &out.grad;
                let ga = &mut head[a].grad;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            ga[at(k)] += y[at(k)] * (g[at(k)] - dot) / temperature;
                        }
                    }
                }
            }
            Op::Reduce { a, axis, kind } => {
                let in_shape = head[a].shape.clone();
                let (outer, len, inner) = axis_blocks(&in_shape, axis);
                let g = &out.grad;
                let xv = head[a].value.clone();
                let ga = &mut head[a].grad;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let go = g[o * inner + i];
                        match kind {
                            ReduceKind::Sum => {
                                for k in 0..len {
                                    ga[at(k)] += go;
                                }
                            }
                            ReduceKind::Mean => {
                                for k in 0..len {
                                    ga[at(k)] += go / len as f64;
                                }
                            }
                            ReduceKind::Max => {
                                let mut best = 0usize;
                                for k in 1..len {
                                    if xv[at(k)] > xv[at(best)] {
                                        best = k;
                                    }
                                }
                                ga[at(best)] += go;
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = {
                    let (o, l, i) = axis_blocks(&head[a].shape, axis);
                    (o, l, i)
                };
                let lb = head[b].shape[axis];
                let g = &out.grad;
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    accumulate(
                        &mut head[a].grad[o * la * inner..(o + 1) * la * inner],
                        &g[base..base + la * inner],
                    );
                    accumulate(
                        &mut head[b].grad[o * lb * inner..(o + 1) * lb * inner],
                        &g[base + la * inner..base + (la + lb) * inner],
                    );
                }
            }
            Op::Reshape { a } => {
                accumulate(&mut head[a].grad, &out.grad);
            }
        }
    }

    /// Errors if any value of `id` is NaN or infinite.
    pub fn check_finite(&self, id: TensorId, context: &str) -> Result<()> {
        if self.nodes[id.0].value.iter().any(|v| !v.is_finite()) {
            let name = self.nodes[id.0].name.as_deref().unwrap_or("<unnamed>");
            return Err(Error::Numeric(format!(
                "non-finite value in tensor '{name}' ({context})"
            )));
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
