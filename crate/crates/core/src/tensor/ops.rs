//! Differentiable operations: forward constructors on [`Graph`] and the
//! matching backward rules.
//!
//! Broadcasting is limited to one documented rule: in `add` and `mul` the
//! right operand may have a shape equal to a trailing suffix of the left
//! operand's shape, and is repeated over the leading axes.

use rand::Rng;

use super::graph::{grad_slot, Graph, Node, Value, Var};
use super::kernels::{gemm, inverse_axes, permute, split_axis};
use super::{cst, numel, Element, Result, TensorError};

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BatchMatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_t: bool },
    Linear { x: usize, w: usize, bias: Option<usize>, rows: usize, inp: usize, out: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Mean { x: usize, axis: usize },
    Sum { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<T>, rstd: Vec<T> },
    Gelu { x: usize },
    Relu { x: usize },
    Dropout { x: usize, mask: Vec<T> },
    SoftmaxCrossEntropy { logits: usize, probs: Vec<T>, labels: Vec<usize> },
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, axis: usize, shape: &[usize]) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn suffix_broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn gelu_cdf<T: Element>(x: T) -> T {
    cst::<T>(0.5) * (T::one() + (x * cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Element>(x: T) -> T {
    (-(x * x) * cst(0.5)).exp() * cst(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

impl<'p, T: Element> Graph<'p, T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(mismatch("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &na.value, false, &nb.value, false, &mut out, false);
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self.push(out, vec![m, n], Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// Batched product over identical leading axes: `[.., m, k] x [.., k, n]`,
    /// or `[.., m, k] x [.., n, k]ᵀ` when `transpose_b` is set.
    pub fn batch_matmul(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        let (sa, sb) = (&na.shape, &nb.shape);
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for (i, c) in out.chunks_mut((m * n).max(1)).enumerate().take(batch) {
            let ai = &na.value[i * m * k..(i + 1) * m * k];
            let bi = &nb.value[i * k * n..(i + 1) * k * n];
            gemm(m, k, n, ai, false, bi, transpose_b, c, false);
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        let op = Op::BatchMatMul { a: a.0, b: b.0, batch, m, k, n, b_t: transpose_b };
        Ok(self.push(out, shape, op, rg))
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] (+ bias[out])`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
        let inp = *nx.shape.last().unwrap_or(&0);
        if nx.shape.is_empty() || nw.shape.len() != 2 || nw.shape[0] != inp {
            return Err(mismatch("linear", &nx.shape, &nw.shape));
        }
        let out_dim = nw.shape[1];
        let rows = nx.value.len() / inp.max(1);
        let mut out = vec![T::zero(); rows * out_dim];
        gemm(rows, inp, out_dim, &nx.value, false, &nw.value, false, &mut out, false);
        let mut rg = nx.requires_grad || nw.requires_grad;
        if let Some(b) = bias {
            let nb = &nodes[b.0];
            if nb.shape != [out_dim] {
                return Err(mismatch("linear bias", &nw.shape, &nb.shape));
            }
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(nb.value.iter()) {
                    *o = *o + bv;
                }
            }
            rg |= nb.requires_grad;
        }
        let mut shape = nx.shape.clone();
        *shape.last_mut().unwrap() = out_dim;
        drop(nodes);
        let op = Op::Linear { x: x.0, w: w.0, bias: bias.map(|b| b.0), rows, inp, out: out_dim };
        Ok(self.push(out, shape, op, rg))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>, bool)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if !suffix_broadcastable(&na.shape, &nb.shape) {
            return Err(mismatch(name, &na.shape, &nb.shape));
        }
        let inner = nb.value.len();
        let mut out = Vec::with_capacity(na.value.len());
        if inner > 0 {
            for chunk in na.value.chunks(inner) {
                out.extend(chunk.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)));
            }
        }
        Ok((out, na.shape.clone(), na.requires_grad || nb.requires_grad))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, shape, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, shape, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, shape, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, shape, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&self, x: Var, factor: T) -> Var {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        let out = nx.value.iter().map(|&v| v * factor).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        drop(nodes);
        self.push(out, shape, Op::Scale { x: x.0, factor }, rg)
    }

    /// Reinterprets the row-major data under a new shape (no copy).
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        if numel(shape) != nx.value.len() {
            return Err(mismatch("reshape", &nx.shape, shape));
        }
        let (value, rg) = (nx.value.clone(), nx.requires_grad);
        drop(nodes);
        Ok(self.push_value(value, shape.to_vec(), Op::Reshape { x: x.0 }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        let mut seen = vec![false; nx.shape.len()];
        let valid = axes.len() == nx.shape.len()
            && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of the axes of {:?}", nx.shape),
            });
        }
        let out = permute(&nx.value, &nx.shape, axes);
        let shape = axes.iter().map(|&a| nx.shape[a]).collect();
        let rg = nx.requires_grad;
        drop(nodes);
        Ok(self.push(out, shape, Op::Permute { x: x.0, axes: axes.to_vec() }, rg))
    }

    /// Swaps two axes.
    pub fn transpose(&self, x: Var, dim0: usize, dim1: usize) -> Result<Var> {
        let shape = self.shape(x);
        check_axis("transpose", dim0.max(dim1), &shape)?;
        let mut axes: Vec<usize> = (0..shape.len()).collect();
        axes.swap(dim0, dim1);
        self.permute(x, &axes)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let Some(first) = inputs.first() else {
            return Err(TensorError::Invalid { op: "concat", reason: "no inputs".into() });
        };
        let base = &nodes[first.0].shape;
        check_axis("concat", axis, base)?;
        let mut total = 0;
        for v in inputs {
            let s = &nodes[v.0].shape;
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(mismatch("concat", base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = &nodes[v.0];
                let span = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let rg = inputs.iter().any(|v| nodes[v.0].requires_grad);
        drop(nodes);
        let op = Op::Concat { inputs: inputs.iter().map(|v| v.0).collect(), axis };
        Ok(self.push(out, shape, op, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        check_axis("slice", axis, &nx.shape)?;
        if start >= end || end > nx.shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!("range {start}..{end} invalid for axis {axis} of {:?}", nx.shape),
            });
        }
        let (outer, len, inner) = split_axis(&nx.shape, axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&nx.value[base + start * inner..base + end * inner]);
        }
        let mut shape = nx.shape.clone();
        shape[axis] = end - start;
        let rg = nx.requires_grad;
        drop(nodes);
        Ok(self.push(out, shape, Op::Slice { x: x.0, axis, start }, rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        check_axis("mean", axis, &nx.shape)?;
        let (outer, len, inner) = split_axis(&nx.shape, axis);
        let inv = T::one() / cst(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &nx.value[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = nx.shape.clone();
        shape.remove(axis);
        let rg = nx.requires_grad;
        drop(nodes);
        Ok(self.push(out, shape, Op::Mean { x: x.0, axis }, rg))
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        let total = nx.value.iter().copied().sum();
        let rg = nx.requires_grad;
        drop(nodes);
        self.push(vec![total], vec![], Op::Sum { x: x.0 }, rg)
    }

    /// Softmax along `axis`, computed after subtracting the slice maximum.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        check_axis("softmax", axis, &nx.shape)?;
        let (outer, len, inner) = split_axis(&nx.shape, axis);
        let mut out = nx.value.to_vec();
        if inner == 1 {
            for row in out.chunks_mut(len.max(1)) {
                softmax_in_place(row);
            }
        } else {
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    for (l, b) in buf.iter_mut().enumerate() {
                        *b = out[at(l)];
                    }
                    softmax_in_place(&mut buf);
                    for (l, &b) in buf.iter().enumerate() {
                        out[at(l)] = b;
                    }
                }
            }
        }
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        drop(nodes);
        Ok(self.push(out, shape, Op::Softmax { x: x.0, axis }, rg))
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// variance, then applies `gain` and `bias`.
    pub fn layernorm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (nx, ng, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
        let d = *nx.shape.last().unwrap_or(&0);
        if d == 0 || ng.shape != [d] || nb.shape != [d] {
            return Err(mismatch("layernorm", &nx.shape, &ng.shape));
        }
        if !(eps > 0.0) {
            return Err(TensorError::Invalid { op: "layernorm", reason: format!("eps must be positive, got {eps}") });
        }
        let rows = nx.value.len() / d;
        let inv_d = T::one() / cst(d as f64);
        let eps = cst::<T>(eps);
        let mut out = vec![T::zero(); nx.value.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, dst) in nx.value.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, (o, &v)) in dst.iter_mut().zip(row).enumerate() {
                *o = (v - mean) * rstd * ng.value[j] + nb.value[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = nx.shape.clone();
        let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        drop(nodes);
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean: means, rstd: rstds };
        Ok(self.push(out, shape, op, rg))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, |v| v * gelu_cdf(v), |x| Op::Gelu { x })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), |x| Op::Relu { x })
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce(usize) -> Op<T>) -> Var {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        let out = nx.value.iter().map(|&v| f(v)).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        drop(nodes);
        self.push(out, shape, op(x.0), rg)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. Identity when not `training`
    /// or when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid { op: "dropout", reason: format!("rate {rate} outside [0, 1)") });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = cst::<T>(1.0 / keep);
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        let mask: Vec<T> = (0..nx.value.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let out = nx.value.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        drop(nodes);
        Ok(self.push(out, shape, Op::Dropout { x: x.0, mask }, rg))
    }

    /// Mean categorical cross-entropy of `[batch, classes]` logits against
    /// integer labels, fused with the softmax.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let nl = &nodes[logits.0];
        if nl.shape.len() != 2 || nl.shape[0] != labels.len() || nl.shape[0] == 0 {
            return Err(mismatch("softmax_cross_entropy", &nl.shape, &[labels.len()]));
        }
        let classes = nl.shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut probs = nl.value.to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / cst(labels.len() as f64);
        let rg = nl.requires_grad;
        drop(nodes);
        let op = Op::SoftmaxCrossEntropy { logits: logits.0, probs, labels: labels.to_vec() };
        Ok(self.push(vec![loss], vec![], op, rg))
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Element> Op<T> {
    /// Pushes `gout` (the gradient of node `at`) to this op's inputs.
    pub(crate) fn backward(&self, nodes: &[Node<'_, T>], at: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| -> &Value<'_, T> { &nodes[i].value };
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    gemm(m, n, k, gout, false, val(*b), true, ga, true);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    gemm(k, m, n, val(*a), true, gout, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n, b_t } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for i in 0..*batch {
                        let g = &gout[i * m * n..(i + 1) * m * n];
                        let bi = &val(*b)[i * k * n..(i + 1) * k * n];
                        gemm(m, n, k, g, false, bi, !*b_t, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for i in 0..*batch {
                        let g = &gout[i * m * n..(i + 1) * m * n];
                        let ai = &val(*a)[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *b_t {
                            gemm(n, m, k, g, true, ai, false, dst, true);
                        } else {
                            gemm(k, m, n, ai, true, g, false, dst, true);
                        }
                    }
                }
            }
            Op::Linear { x, w, bias, rows, inp, out } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gemm(rows, out, inp, gout, false, val(*w), true, gx, true);
                }
                if let Some(gw) = grad_slot(nodes, grads, *w) {
                    gemm(inp, rows, out, val(*x), true, gout, false, gw, true);
                }
                if let Some(gb) = bias.and_then(|b| grad_slot(nodes, grads, b)) {
                    for row in gout.chunks(out) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    add_into(ga, gout);
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    let inner = gb.len();
                    for chunk in gout.chunks(inner) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let inner = vb.len();
                if let Some(ga) = grad_slot(nodes, grads, *a) {
                    for (dst, g) in ga.chunks_mut(inner).zip(gout.chunks(inner)) {
                        for ((d, &g), &y) in dst.iter_mut().zip(g).zip(vb.iter()) {
                            *d = *d + g * y;
                        }
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for (xa, g) in va.chunks(inner).zip(gout.chunks(inner)) {
                        for ((d, &g), &x) in gb.iter_mut().zip(g).zip(xa) {
                            *d = *d + g * x;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for (d, &g) in gx.iter_mut().zip(gout) {
                        *d = *d + g * *factor;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    add_into(gx, gout);
                }
            }
            Op::Permute { x, axes } => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    let back = permute(gout, &nodes[at].shape, &inverse_axes(axes));
                    add_into(gx, &back);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&nodes[at].shape, *axis);
                let mut offset = 0;
                for &j in inputs {
                    let len = nodes[j].shape[*axis];
                    if let Some(gj) = grad_slot(nodes, grads, j) {
                        for o in 0..outer {
                            let src = &gout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gj[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(&nodes[*x].shape, *axis);
                let width = nodes[at].shape[*axis];
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        add_into(&mut gx[dst..dst + width * inner], &gout[o * width * inner..(o + 1) * width * inner]);
                    }
                }
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(&nodes[*x].shape, *axis);
                let inv = T::one() / cst(len as f64);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &g) in dst.iter_mut().zip(&gout[o * inner..(o + 1) * inner]) {
                                *d = *d + g * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + gout[0]);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&nodes[at].shape, *axis);
                let y = val(at);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..len).map(|l| gout[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] = gx[at(l)] + y[at(l)] * (gout[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = val(*x);
                let gv = val(*gain);
                let d = gv.len();
                let inv_d = T::one() / cst(d as f64);
                let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
                if let Some(gg) = grad_slot(nodes, grads, *gain) {
                    for (r, g) in gout.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] = gg[j] + g[j] * xhat(r, j);
                        }
                    }
                }
                if let Some(gb) = grad_slot(nodes, grads, *bias) {
                    for g in gout.chunks(d) {
                        add_into(gb, g);
                    }
                }
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, g) in gout.chunks(d).enumerate() {
                        let mut sum = T::zero();
                        let mut sum_xhat = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[j] * gv[j];
                            sum = sum + dxhat[j];
                            sum_xhat = sum_xhat + dxhat[j] * xhat(r, j);
                        }
                        let (mean_d, mean_dx) = (sum * inv_d, sum_xhat * inv_d);
                        for j in 0..d {
                            let v = rstd[r] * (dxhat[j] - mean_d - xhat(r, j) * mean_dx);
                            gx[r * d + j] = gx[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((d, &g), &v) in gx.iter_mut().zip(gout).zip(xv.iter()) {
                        *d = *d + g * (gelu_cdf(v) + v * gelu_pdf(v));
                    }
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((d, &g), &v) in gx.iter_mut().zip(gout).zip(xv.iter()) {
                        if v > T::zero() {
                            *d = *d + g;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = grad_slot(nodes, grads, *x) {
                    for ((d, &g), &m) in gx.iter_mut().zip(gout).zip(mask) {
                        *d = *d + g * m;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let classes = nodes[*logits].shape[1];
                let scale = gout[0] / cst(labels.len() as f64);
                if let Some(gl) = grad_slot(nodes, grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            let i = r * classes + c;
                            gl[i] = gl[i] + scale * (probs[i] - onehot);
                        }
                    }
                }
            }
        }
    }
}
