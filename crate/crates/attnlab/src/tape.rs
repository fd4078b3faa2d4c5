//! Define-by-run reverse-mode differentiation tape.
//!
//! A `Tape` records every forward operation as an append-only node holding
//! its saved output value and parent handles, so parents always precede
//! their children. `backward` replays the tape once in reverse and returns
//! gradients for every node; it does not mutate the tape, so repeated
//! backward passes over the same tape are bit-identical.

use crate::error::{shape_string, Error, Result};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};

/// Handle of a recorded node within one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Gradient-tracked input.
    Leaf,
    /// Input that never receives a gradient (stop-gradient boundary).
    Constant,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddScalar { a: NodeId },
    AddRow { a: NodeId, row: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { a: NodeId, rows: usize, cols: usize },
    Reshape { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, starts: Vec<usize>, lens: Vec<usize> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SumLastDim { a: NodeId, last: usize },
    Log { a: NodeId },
    Exp { a: NodeId },
    Sqrt { a: NodeId },
    DivScalar { a: NodeId, s: NodeId },
    SoftmaxLastDim { a: NodeId, last: usize },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Detach,
    WriteBox { base: NodeId, patch: NodeId, starts: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar loss with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node; zeros if the node does not reach the loss.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }
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

    /// Saved forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record a gradient-tracked input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Record an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape_string(sa),
                rhs: shape_string(sb),
            });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let values = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, values)?))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let values = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Sub { a, b }, Tensor::new(shape, values)?))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let values = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, values)?))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let values: Vec<f64> = self.value(a).values().iter().map(|x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Scale { a, factor }, Tensor::new(shape, values).expect("same shape"))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let values: Vec<f64> = self.value(a).values().iter().map(|x| x + c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::AddScalar { a }, Tensor::new(shape, values).expect("same shape"))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// Add a 1-D row vector to every row of a 2-D matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: shape_string(sa),
                rhs: shape_string(sr),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a).values();
        let rv = self.value(row).values();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(av[r * cols + c] + rv[c]);
            }
        }
        Ok(self.push(Op::AddRow { a, row }, Tensor::new(vec![rows, cols], values)?))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let values: Vec<f64> = self.value(a).values().iter().map(|x| x.ln()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Log { a }, Tensor::new(shape, values).expect("same shape"))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let values: Vec<f64> = self.value(a).values().iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Exp { a }, Tensor::new(shape, values).expect("same shape"))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let values: Vec<f64> = self.value(a).values().iter().map(|x| x.sqrt()).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Sqrt { a }, Tensor::new(shape, values).expect("same shape"))
    }

    /// Exact Gaussian error linear unit, x·Φ(x).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let values: Vec<f64> = self.value(a).values().iter().map(|&x| x * std_normal_cdf(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Gelu { a }, Tensor::new(shape, values).expect("same shape"))
    }

    /// Divide every element by a scalar node; gradient flows to both.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::InvalidShape {
                op: "div_scalar",
                detail: format!("divisor must be scalar, got {}", shape_string(self.value(s).shape())),
            });
        }
        let sv = self.value(s).values()[0];
        let values: Vec<f64> = self.value(a).values().iter().map(|x| x / sv).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::DivScalar { a, s }, Tensor::new(shape, values)?))
    }

    /// Stop-gradient: value passes through, gradient does not.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::Detach, value)
    }

    // ── Linear algebra and shape ────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: shape_string(sa),
                rhs: shape_string(sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_kernel(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, Tensor::new(vec![m, n], values)?))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("expected 2-D, got {}", shape_string(sa)),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let values = transpose_values(self.value(a).values(), rows, cols);
        Ok(self.push(Op::Transpose { a, rows, cols }, Tensor::new(vec![cols, rows], values)?))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                detail: format!(
                    "cannot reshape {} to {}",
                    shape_string(self.value(a).shape()),
                    shape_string(&shape)
                ),
            });
        }
        let values = self.value(a).values().to_vec();
        Ok(self.push(Op::Reshape { a }, Tensor::new(shape, values)?))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::DegenerateInput("concat of empty list".into()))?;
        let rank = self.value(first).shape().len();
        if axis >= rank {
            return Err(Error::IndexOutOfRange { what: "concat axis", index: axis, limit: rank });
        }
        let mut out_shape = self.value(first).shape().to_vec();
        out_shape[axis] = 0;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != rank
                || sp.iter().enumerate().any(|(i, &d)| i != axis && d != out_shape[i] && out_shape[i] != 0)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: shape_string(&out_shape),
                    rhs: shape_string(sp),
                });
            }
            out_shape[axis] += sp[axis];
        }
        let inner: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let mut values = vec![0.0; out_shape.iter().product()];
        let out_stride = out_shape[axis] * inner;
        let mut offset = 0;
        for &p in parts {
            let sp = self.value(p).shape();
            let part_stride = sp[axis] * inner;
            let pv = self.value(p).values();
            for o in 0..outer {
                let src = &pv[o * part_stride..(o + 1) * part_stride];
                let dst = o * out_stride + offset;
                values[dst..dst + part_stride].copy_from_slice(src);
            }
            offset += part_stride;
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, Tensor::new(out_shape, values)?))
    }

    /// Rectangular sub-box: `starts` and `lens` must match the input rank.
    pub fn slice(&mut self, a: NodeId, starts: &[usize], lens: &[usize]) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if starts.len() != sa.len() || lens.len() != sa.len() {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("rank mismatch with {}", shape_string(sa)),
            });
        }
        for d in 0..sa.len() {
            if lens[d] == 0 || starts[d] + lens[d] > sa[d] {
                return Err(Error::IndexOutOfRange {
                    what: "slice bound",
                    index: starts[d] + lens[d],
                    limit: sa[d],
                });
            }
        }
        let mut values = vec![0.0; lens.iter().product()];
        let src = self.value(a).values();
        for_each_box_run(sa, starts, lens, |src_off, dst_off, run| {
            values[dst_off..dst_off + run].copy_from_slice(&src[src_off..src_off + run]);
        });
        Ok(self.push(
            Op::Slice { a, starts: starts.to_vec(), lens: lens.to_vec() },
            Tensor::new(lens.to_vec(), values)?,
        ))
    }

    /// Copy of `base` with the box at `starts` overwritten by `patch`.
    pub fn write_box(&mut self, base: NodeId, patch: NodeId, starts: &[usize]) -> Result<NodeId> {
        let (sb, sp) = (self.value(base).shape().to_vec(), self.value(patch).shape().to_vec());
        if sb.len() != sp.len() || starts.len() != sb.len() {
            return Err(Error::ShapeMismatch {
                op: "write_box",
                lhs: shape_string(&sb),
                rhs: shape_string(&sp),
            });
        }
        for d in 0..sb.len() {
            if starts[d] + sp[d] > sb[d] {
                return Err(Error::IndexOutOfRange {
                    what: "write_box bound",
                    index: starts[d] + sp[d],
                    limit: sb[d],
                });
            }
        }
        let mut values = self.value(base).values().to_vec();
        let pv = self.value(patch).values();
        for_each_box_run(&sb, starts, &sp, |dst_off, src_off, run| {
            values[dst_off..dst_off + run].copy_from_slice(&pv[src_off..src_off + run]);
        });
        Ok(self.push(Op::WriteBox { base, patch, starts: starts.to_vec() }, Tensor::new(sb, values)?))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Op::Mean { a }, Tensor::scalar(s / n))
    }

    /// Sum over the last dimension; a 1-D input reduces to a scalar.
    pub fn sum_last_dim(&mut self, a: NodeId) -> NodeId {
        let sa = self.value(a).shape();
        let last = *sa.last().expect("tensor rank >= 1");
        let rows = self.value(a).numel() / last;
        let av = self.value(a).values();
        let values: Vec<f64> = (0..rows).map(|r| av[r * last..(r + 1) * last].iter().sum()).collect();
        let out_shape = if sa.len() == 1 { vec![1] } else { sa[..sa.len() - 1].to_vec() };
        self.push(Op::SumLastDim { a, last }, Tensor::new(out_shape, values).expect("reduced shape"))
    }

    // ── Fused neural-network ops ────────────────────────────────────

    /// Softmax over the last dimension, stabilized by subtracting each
    /// slice's maximum before exponentiation.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> NodeId {
        let sa = self.value(a).shape().to_vec();
        let last = *sa.last().expect("tensor rank >= 1");
        let av = self.value(a).values();
        let mut values = vec![0.0; av.len()];
        for r in 0..av.len() / last {
            let row = &av[r * last..(r + 1) * last];
            let out = &mut values[r * last..(r + 1) * last];
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                total += e;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push(Op::SoftmaxLastDim { a, last }, Tensor::new(sa, values).expect("same shape"))
    }

    /// Per-slice normalization over the last dimension followed by γ·x̂+β.
    pub fn layernorm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let last = *sa.last().expect("tensor rank >= 1");
        let (sg, sb) = (self.value(gamma).shape(), self.value(beta).shape());
        if sg != [last] || sb != [last] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: shape_string(&sa),
                rhs: format!("gamma {} beta {}", shape_string(sg), shape_string(sb)),
            });
        }
        let av = self.value(a).values();
        let gv = self.value(gamma).values().to_vec();
        let bv = self.value(beta).values().to_vec();
        let mut values = vec![0.0; av.len()];
        for r in 0..av.len() / last {
            let row = &av[r * last..(r + 1) * last];
            let out = &mut values[r * last..(r + 1) * last];
            let (mean, inv_std) = row_moments(row, eps);
            for ((o, &v), (g, b)) in out.iter_mut().zip(row).zip(gv.iter().zip(&bv)) {
                *o = g * (v - mean) * inv_std + b;
            }
        }
        Ok(self.push(Op::LayerNorm { a, gamma, beta, eps }, Tensor::new(sa, values)?))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each node exactly once and
    /// returns ∂loss/∂node for every node; unreached leaves read as zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: shape_string(self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            // By topological order, grads[idx] is complete once we reach it.
            let grad = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[idx].op {
                // No parents to reach, or (Detach) gradient deliberately cut.
                Op::Leaf | Op::Constant | Op::Detach => {}
                Op::Add { a, b } => {
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| add_assign(dst, &grad));
                    accumulate(&self.nodes, &mut grads, b.0, self.numel_of(*b), |dst| add_assign(dst, &grad));
                }
                Op::Sub { a, b } => {
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| add_assign(dst, &grad));
                    accumulate(&self.nodes, &mut grads, b.0, self.numel_of(*b), |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad) {
                            *d -= g;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).values();
                    let bv = self.value(*b).values();
                    accumulate(&self.nodes, &mut grads, a.0, av.len(), |dst| {
                        for ((d, g), v) in dst.iter_mut().zip(&grad).zip(bv) {
                            *d += g * v;
                        }
                    });
                    accumulate(&self.nodes, &mut grads, b.0, bv.len(), |dst| {
                        for ((d, g), v) in dst.iter_mut().zip(&grad).zip(av) {
                            *d += g * v;
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad) {
                            *d += g * factor;
                        }
                    });
                }
                Op::AddScalar { a } => {
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| add_assign(dst, &grad));
                }
                Op::AddRow { a, row } => {
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| add_assign(dst, &grad));
                    let cols = self.value(*row).numel();
                    accumulate(&self.nodes, &mut grads, row.0, cols, |dst| {
                        for (i, g) in grad.iter().enumerate() {
                            dst[i % cols] += g;
                        }
                    });
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let da = matmul_nt_kernel(&grad, self.value(*b).values(), m, n, k);
                    let db = matmul_tn_kernel(self.value(*a).values(), &grad, m, k, n);
                    accumulate(&self.nodes, &mut grads, a.0, m * k, |dst| add_assign(dst, &da));
                    accumulate(&self.nodes, &mut grads, b.0, k * n, |dst| add_assign(dst, &db));
                }
                Op::Transpose { a, rows, cols } => {
                    // grad has shape [cols x rows]
                    let da = transpose_values(&grad, *cols, *rows);
                    accumulate(&self.nodes, &mut grads, a.0, rows * cols, |dst| add_assign(dst, &da));
                }
                Op::Reshape { a } => {
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| add_assign(dst, &grad));
                }
                Op::Concat { parts, axis } => {
                    let out_shape = self.nodes[idx].value.shape();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let out_stride = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let part_axis = self.value(p).shape()[*axis];
                        let part_stride = part_axis * inner;
                        accumulate(&self.nodes, &mut grads, p.0, part_stride * outer, |dst| {
                            for o in 0..outer {
                                let src = o * out_stride + offset;
                                for (d, g) in dst[o * part_stride..(o + 1) * part_stride]
                                    .iter_mut()
                                    .zip(&grad[src..src + part_stride])
                                {
                                    *d += g;
                                }
                            }
                        });
                        offset += part_stride;
                    }
                }
                Op::Slice { a, starts, lens } => {
                    let sa = self.value(*a).shape().to_vec();
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| {
                        for_each_box_run(&sa, starts, lens, |src_off, dst_off, run| {
                            for (d, g) in dst[src_off..src_off + run].iter_mut().zip(&grad[dst_off..dst_off + run]) {
                                *d += g;
                            }
                        });
                    });
                }
                Op::WriteBox { base, patch, starts } => {
                    let sb = self.value(*base).shape().to_vec();
                    let sp = self.value(*patch).shape().to_vec();
                    accumulate(&self.nodes, &mut grads, patch.0, self.numel_of(*patch), |dst| {
                        for_each_box_run(&sb, starts, &sp, |box_off, patch_off, run| {
                            for (d, g) in dst[patch_off..patch_off + run].iter_mut().zip(&grad[box_off..box_off + run]) {
                                *d += g;
                            }
                        });
                    });
                    let mut outside = grad.clone();
                    for_each_box_run(&sb, starts, &sp, |box_off, _, run| {
                        outside[box_off..box_off + run].iter_mut().for_each(|v| *v = 0.0);
                    });
                    accumulate(&self.nodes, &mut grads, base.0, self.numel_of(*base), |dst| add_assign(dst, &outside));
                }
                Op::Sum { a } => {
                    let g = grad[0];
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| {
                        dst.iter_mut().for_each(|d| *d += g);
                    });
                }
                Op::Mean { a } => {
                    let n = self.numel_of(*a);
                    let g = grad[0] / n as f64;
                    accumulate(&self.nodes, &mut grads, a.0, n, |dst| {
                        dst.iter_mut().for_each(|d| *d += g);
                    });
                }
                Op::SumLastDim { a, last } => {
                    accumulate(&self.nodes, &mut grads, a.0, self.numel_of(*a), |dst| {
                        for (r, g) in grad.iter().enumerate() {
                            for d in dst[r * last..(r + 1) * last].iter_mut() {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Log { a } => {
                    let av = self.value(*a).values();
                    accumulate(&self.nodes, &mut grads, a.0, av.len(), |dst| {
                        for ((d, g), v) in dst.iter_mut().zip(&grad).zip(av) {
                            *d += g / v;
                        }
                    });
                }
                Op::Exp { a } => {
                    let out = self.nodes[idx].value.values();
                    accumulate(&self.nodes, &mut grads, a.0, out.len(), |dst| {
                        for ((d, g), v) in dst.iter_mut().zip(&grad).zip(out) {
                            *d += g * v;
                        }
                    });
                }
                Op::Sqrt { a } => {
                    let out = self.nodes[idx].value.values();
                    accumulate(&self.nodes, &mut grads, a.0, out.len(), |dst| {
                        for ((d, g), v) in dst.iter_mut().zip(&grad).zip(out) {
                            *d += g / (2.0 * v);
                        }
                    });
                }
                Op::DivScalar { a, s } => {
                    let sv = self.value(*s).values()[0];
                    let out = self.nodes[idx].value.values();
                    accumulate(&self.nodes, &mut grads, a.0, out.len(), |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad) {
                            *d += g / sv;
                        }
                    });
                    let ds: f64 = grad.iter().zip(out).map(|(g, y)| -g * y / sv).sum();
                    accumulate(&self.nodes, &mut grads, s.0, 1, |dst| dst[0] += ds);
                }
                Op::SoftmaxLastDim { a, last } => {
                    let out = self.nodes[idx].value.values();
                    accumulate(&self.nodes, &mut grads, a.0, out.len(), |dst| {
                        for r in 0..out.len() / last {
                            let y = &out[r * last..(r + 1) * last];
                            let g = &grad[r * last..(r + 1) * last];
                            let dot: f64 = y.iter().zip(g).map(|(yv, gv)| yv * gv).sum();
                            for ((d, yv), gv) in dst[r * last..(r + 1) * last].iter_mut().zip(y).zip(g) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let last = self.value(*gamma).numel();
                    let av = self.value(*a).values();
                    let gv = self.value(*gamma).values();
                    let rows = av.len() / last;
                    let mut da = vec![0.0; av.len()];
                    let mut dgamma = vec![0.0; last];
                    let mut dbeta = vec![0.0; last];
                    for r in 0..rows {
                        let row = &av[r * last..(r + 1) * last];
                        let g = &grad[r * last..(r + 1) * last];
                        let (mean, inv_std) = row_moments(row, *eps);
                        // x̂ and the two row means the VJP needs
                        let mut mean_gh = 0.0;
                        let mut mean_gh_xhat = 0.0;
                        let mut xhat = vec![0.0; last];
                        let mut gh = vec![0.0; last];
                        for j in 0..last {
                            xhat[j] = (row[j] - mean) * inv_std;
                            gh[j] = g[j] * gv[j];
                            mean_gh += gh[j];
                            mean_gh_xhat += gh[j] * xhat[j];
                            dgamma[j] += g[j] * xhat[j];
                            dbeta[j] += g[j];
                        }
                        mean_gh /= last as f64;
                        mean_gh_xhat /= last as f64;
                        for j in 0..last {
                            da[r * last + j] = inv_std * (gh[j] - mean_gh - xhat[j] * mean_gh_xhat);
                        }
                    }
                    accumulate(&self.nodes, &mut grads, a.0, av.len(), |dst| add_assign(dst, &da));
                    accumulate(&self.nodes, &mut grads, gamma.0, last, |dst| add_assign(dst, &dgamma));
                    accumulate(&self.nodes, &mut grads, beta.0, last, |dst| add_assign(dst, &dbeta));
                }
                Op::Gelu { a } => {
                    let av = self.value(*a).values();
                    accumulate(&self.nodes, &mut grads, a.0, av.len(), |dst| {
                        for ((d, g), &x) in dst.iter_mut().zip(&grad).zip(av) {
                            *d += g * (std_normal_cdf(x) + x * std_normal_pdf(x));
                        }
                    });
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|v| Tensor::new(self.nodes[i].value.shape().to_vec(), v).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn numel_of(&self, id: NodeId) -> usize {
        self.value(id).numel()
    }
}

/// Central-difference gradient (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h per element.
///
/// Independent of the tape: the oracle both unit tests and the acceptance
/// suite check `backward` against.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::DegenerateInput(format!("finite-difference step h={h} must be positive")));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let original = probe.values()[i];
        probe.values_mut()[i] = original + h;
        let plus = f(&probe)?;
        probe.values_mut()[i] = original - h;
        let minus = f(&probe)?;
        probe.values_mut()[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

// ── Shared numeric helpers ──────────────────────────────────────────

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_values(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = values[r * cols + c];
        }
    }
    out
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, numel: usize, write: impl FnOnce(&mut Vec<f64>)) {
    // Constants never receive gradients; skipping them keeps attack
    // backward passes from materializing buffers for frozen weights.
    if matches!(nodes[idx].op, Op::Constant) {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; numel]);
    write(slot);
}

/// Walk a rectangular box of `shape` at `starts`/`lens`, yielding
/// (outer offset, box offset, contiguous run length) per innermost run.
fn for_each_box_run(
    shape: &[usize],
    starts: &[usize],
    lens: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    let run = lens[rank - 1];
    let mut strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let outer_count: usize = lens[..rank - 1].iter().product();
    let mut index = vec![0usize; rank.saturating_sub(1)];
    for step in 0..outer_count.max(1) {
        let mut src = starts[rank - 1];
        for d in 0..rank - 1 {
            src += (starts[d] + index[d]) * strides[d];
        }
        visit(src, step * run, run);
        for d in (0..rank.saturating_sub(1)).rev() {
            index[d] += 1;
            if index[d] < lens[d] {
                break;
            }
            index[d] = 0;
        }
    }
}
