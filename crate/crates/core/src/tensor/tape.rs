use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;

use super::element::vectorized;
use super::kernels::{self, gemm};
use super::{check_permutation, Element, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        scale: T,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// Nodes are appended as ops run, so every op's inputs precede it and
/// [`Tape::backward`] can replay the record once in reverse.
pub struct Tape<T: Element = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients extracted from a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::Usage(format!(
                "variable {var:?} does not belong to tape {}",
                self.id
            )));
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        let idx = self.index(var).expect("variable from another tape");
        &self.nodes[idx].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.index(var)
            .map(|i| self.nodes[i].requires_grad)
            .unwrap_or(false)
    }

    /// Accumulated gradient of a leaf after one or more [`Tape::backward`] calls.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let idx = self.index(var).ok()?;
        let data = self.leaf_grads[idx].as_ref()?;
        Some(Tensor::new(self.nodes[idx].value.shape(), data.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Snapshot of every leaf gradient accumulated so far.
    pub fn gradients(&self) -> Gradients<T> {
        let grads = self
            .leaf_grads
            .iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.as_ref()
                    .map(|d| Tensor::new(node.value.shape(), d.clone()).expect("grad shape"))
            })
            .collect();
        Gradients {
            tape: self.id,
            grads,
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a 2-D matrix shared by every leading batch entry of `a`,
    /// or has exactly the leading axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes, with the same batching rules as [`Tape::matmul`].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let plan = MatMulPlan::new(av.shape(), bv.shape(), trans_b)?;
        let mut out = vec![T::zero(); plan.batch * plan.m * plan.n];
        plan.forward(av.data(), bv.data(), &mut out);
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        shape.push(plan.n);
        let value = Tensor::new(&shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a: ai,
                b: bi,
                trans_b,
            },
            &[ai, bi],
        )
    }

    /// Elementwise sum; `b` may omit leading axes of `a` and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if bv.rank() > av.rank() || av.shape()[av.rank() - bv.rank()..] != *bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let mut out = av.data().to_vec();
        let chunk = bv.numel().max(1);
        if bv.numel() > 0 {
            for row in out.chunks_mut(chunk) {
                add_into(row, bv.data());
            }
        }
        let value = Tensor::new(av.shape(), out)?;
        self.push("add", value, Op::Add { a: ai, b: bi }, &[ai, bi])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(av.shape(), out)?;
        self.push("mul", value, Op::Mul { a: ai, b: bi }, &[ai, bi])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        let out = av.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(av.shape(), out)?;
        self.push("scale", value, Op::Scale { a: ai, factor }, &[ai])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.index(a)?;
        let total = self.nodes[ai].value.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { a: ai }, &[ai])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        if av.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let total: T = av.data().iter().copied().sum();
        let value = Tensor::scalar(total / T::from_f64(av.numel() as f64));
        self.push("mean", value, Op::Mean { a: ai }, &[ai])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        if axis >= av.rank() {
            return Err(TensorError::Invalid {
                op: "softmax",
                reason: format!("axis {axis} out of range for shape {:?}", av.shape()),
            });
        }
        if !av.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(out[idx(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let value = Tensor::new(av.shape(), out)?;
        self.push("softmax", value, Op::Softmax { a: ai, axis }, &[ai])
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let (xv, gv, bv) = (
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
        );
        let width = *xv.shape().last().ok_or_else(|| TensorError::Invalid {
            op: "layer_norm",
            reason: "scalar input".into(),
        })?;
        if gv.shape() != [width] || bv.shape() != [width] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        if eps < T::zero() {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                reason: "negative eps".into(),
            });
        }
        let rows = xv.numel() / width.max(1);
        let n = T::from_f64(width as f64);
        let mut out = vec![T::zero(); xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, dst) in xv.data().chunks(width).zip(out.chunks_mut(width)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, (&v, o)) in row.iter().zip(dst.iter_mut()).enumerate() {
                *o = (v - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let op = Op::LayerNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            mean: means,
            rstd: rstds,
        };
        self.push("layer_norm", value, op, &[xi, gi, bi])
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        let out = kernels::gelu(av.data());
        let value = Tensor::new(av.shape(), out)?;
        self.push("gelu", value, Op::Gelu { a: ai }, &[ai])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = inputs
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<_>>()?;
        let first = idx.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base_shape = self.nodes[*first].value.shape().to_vec();
        if axis >= base_shape.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: format!("axis {axis} out of range for shape {base_shape:?}"),
            });
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let run = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: idx.clone(),
                axis,
            },
            &idx,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        if shape.iter().product::<usize>() != av.numel() {
            return Err(shape_err("reshape", av.shape(), shape));
        }
        let value = Tensor::new(shape, av.data().to_vec())?;
        self.push("reshape", value, Op::Reshape { a: ai }, &[ai])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        check_permutation(av.shape(), axes)?;
        let value = av.permute(axes)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                a: ai,
                axes: axes.to_vec(),
            },
            &[ai],
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        if axis >= av.rank() || start + len > av.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                reason: format!(
                    "range {start}..{} on axis {axis} of shape {:?}",
                    start + len,
                    av.shape()
                ),
            });
        }
        let (outer, extent, inner) = split_axis(av.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            out.extend_from_slice(&av.data()[from..from + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        self.push("narrow", value, Op::Narrow { a: ai, axis, start }, &[ai])
    }

    /// Fused scaled dot-product attention: `softmax(scale·q·kᵀ)·v` over the last two axes.
    ///
    /// Leading axes are independent batches. Only the attention probabilities
    /// are kept for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let (qi, ki, vi) = (self.index(q)?, self.index(k)?, self.index(v)?);
        let (qv, kv, vv) = (
            &self.nodes[qi].value,
            &self.nodes[ki].value,
            &self.nodes[vi].value,
        );
        let rank = qv.rank();
        let consistent = rank >= 2
            && kv.rank() == rank
            && vv.rank() == rank
            && qv.shape()[..rank - 2] == kv.shape()[..rank - 2]
            && qv.shape()[..rank - 2] == vv.shape()[..rank - 2]
            && qv.shape()[rank - 1] == kv.shape()[rank - 1]
            && kv.shape()[rank - 2] == vv.shape()[rank - 2];
        if !consistent {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        let dims = AttnDims {
            batch: qv.shape()[..rank - 2].iter().product(),
            nq: qv.shape()[rank - 2],
            nk: kv.shape()[rank - 2],
            d: qv.shape()[rank - 1],
            dv: vv.shape()[rank - 1],
        };
        let mut out = vec![T::zero(); dims.batch * dims.nq * dims.dv];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        out.par_chunks_mut(dims.nq * dims.dv.max(1))
            .enumerate()
            .for_each_init(
                || vec![T::zero(); dims.nq * dims.nk],
                |p, (b, o)| {
                    let (qb, kb, vb) = dims.slices(b, qd, kd, vd);
                    attention_probs(&dims, scale, qb, kb, p);
                    gemm(dims.nq, dims.nk, dims.dv, p, false, vb, false, o, false);
                },
            );
        let mut shape = qv.shape().to_vec();
        shape[rank - 1] = dims.dv;
        let value = Tensor::new(&shape, out)?;
        let op = Op::Attention {
            q: qi,
            k: ki,
            v: vi,
            scale,
        };
        self.push("attention", value, op, &[qi, ki, vi])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// Rows whose target equals `ignore_index` contribute nothing and are left
    /// out of the mean.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Var> {
        let li = self.index(logits)?;
        let lv = &self.nodes[li].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let classes = lv.shape()[1];
        let mut gated = Vec::with_capacity(targets.len());
        for &t in targets {
            if t == ignore_index {
                gated.push(None);
            } else if t < 0 || t as usize >= classes {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    reason: format!("target {t} outside 0..{classes}"),
                });
            } else {
                gated.push(Some(t as usize));
            }
        }
        let count = gated.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                reason: "every row is ignored; the mean is undefined".into(),
            });
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        for ((row, p), target) in lv
            .data()
            .chunks(classes)
            .zip(probs.chunks_mut(classes))
            .zip(&gated)
        {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - lse).exp();
            }
            if let Some(t) = *target {
                total = total + (lse - row[t]);
            }
        }
        let value = Tensor::scalar(total / T::from_f64(count as f64));
        let op = Op::CrossEntropy {
            logits: li,
            targets: gated,
            probs,
        };
        self.push("cross_entropy", value, op, &[li])
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales survivors.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let ai = self.index(a)?;
        let av = &self.nodes[ai].value;
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..av.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(av.shape(), out)?;
        self.push("dropout", value, Op::Dropout { a: ai, mask }, &[ai])
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(TensorError::Usage(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for idx in (0..=li).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => add_into(acc, &grad),
                    slot @ None => *slot = Some(grad),
                }
                continue;
            }
            self.propagate(idx, &grad, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, grad: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let wants = |i: usize| nodes[i].requires_grad;
        // Returns the gradient slot of input `i`, zero-initialised on first use.
        fn slot<'g, T: Element>(
            grads: &'g mut [Option<Vec<T>>],
            i: usize,
            len: usize,
        ) -> &'g mut Vec<T> {
            grads[i].get_or_insert_with(|| vec![T::zero(); len])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let plan = MatMulPlan::new(av.shape(), bv.shape(), *trans_b)?;
                if wants(*a) {
                    let ga = slot(grads, *a, av.numel());
                    plan.grad_a(grad, bv.data(), ga);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bv.numel());
                    plan.grad_b(grad, av.data(), gb);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(slot(grads, *a, grad.len()), grad);
                }
                if wants(*b) {
                    let n = nodes[*b].value.numel();
                    let gb = slot(grads, *b, n);
                    if n > 0 {
                        for chunk in grad.chunks(n) {
                            add_into(gb, chunk);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*a) {
                    for ((g, &d), &y) in slot(grads, *a, grad.len()).iter_mut().zip(grad).zip(bv) {
                        *g = *g + d * y;
                    }
                }
                if wants(*b) {
                    for ((g, &d), &x) in slot(grads, *b, grad.len()).iter_mut().zip(grad).zip(av) {
                        *g = *g + d * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                for (g, &d) in slot(grads, *a, grad.len()).iter_mut().zip(grad) {
                    *g = *g + d * *factor;
                }
            }
            Op::Sum { a } => {
                let g0 = grad[0];
                let n = nodes[*a].value.numel();
                for g in slot(grads, *a, n).iter_mut() {
                    *g = *g + g0;
                }
            }
            Op::Mean { a } => {
                let n = nodes[*a].value.numel();
                let g0 = grad[0] / T::from_f64(n as f64);
                for g in slot(grads, *a, n).iter_mut() {
                    *g = *g + g0;
                }
            }
            Op::Softmax { a, axis } => {
                let input = *a;
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let gx = slot(grads, input, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len)
                            .map(|j| grad[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = gx[p] + y[p] * (grad[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = &nodes[*x].value;
                let width = *xv.shape().last().unwrap();
                let gv = nodes[*gamma].value.data();
                let n = T::from_f64(width as f64);
                let mut dgamma = vec![T::zero(); width];
                let mut dbeta = vec![T::zero(); width];
                let mut dx = vec![T::zero(); if wants(*x) { xv.numel() } else { 0 }];
                let mut xhat = vec![T::zero(); width];
                let mut dxhat = vec![T::zero(); width];
                for (r, (row, dy)) in xv.data().chunks(width).zip(grad.chunks(width)).enumerate() {
                    for j in 0..width {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dgamma[j] = dgamma[j] + dy[j] * xhat[j];
                        dbeta[j] = dbeta[j] + dy[j];
                        dxhat[j] = dy[j] * gv[j];
                    }
                    if !dx.is_empty() {
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..width {
                            dx[r * width + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if wants(*x) {
                    add_into(slot(grads, *x, dx.len()), &dx);
                }
                if wants(*gamma) {
                    add_into(slot(grads, *gamma, width), &dgamma);
                }
                if wants(*beta) {
                    add_into(slot(grads, *beta, width), &dbeta);
                }
            }
            Op::Gelu { a } => {
                kernels::gelu_backward(nodes[*a].value.data(), &grad, slot(grads, *a, grad.len()));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &i in inputs {
                    let extent = nodes[i].value.shape()[*axis];
                    if wants(i) {
                        let run = extent * inner;
                        let gi = slot(grads, i, outer * run);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(&mut gi[o * run..(o + 1) * run], &grad[from..from + run]);
                        }
                    }
                    offset += extent;
                }
            }
            Op::Reshape { a } => {
                add_into(slot(grads, *a, grad.len()), grad);
            }
            Op::Permute { a, axes } => {
                let inverse = kernels::invert(axes);
                let back = kernels::permute(grad, node.value.shape(), &inverse);
                add_into(slot(grads, *a, back.len()), &back);
            }
            Op::Narrow { a, axis, start } => {
                let src_shape = nodes[*a].value.shape();
                let (outer, extent, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let ga = slot(grads, *a, outer * extent * inner);
                for o in 0..outer {
                    let to = (o * extent + start) * inner;
                    add_into(
                        &mut ga[to..to + len * inner],
                        &grad[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::Attention { q, k, v, scale } => {
                let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let rank = qv.rank();
                let dims = AttnDims {
                    batch: qv.shape()[..rank - 2].iter().product(),
                    nq: qv.shape()[rank - 2],
                    nk: kv.shape()[rank - 2],
                    d: qv.shape()[rank - 1],
                    dv: vv.shape()[rank - 1],
                };
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..dims.batch)
                    .into_par_iter()
                    .map_init(
                        || vec![T::zero(); dims.nq * dims.nk],
                        |p, b| {
                            let (qb, kb, vb) = dims.slices(b, qd, kd, vd);
                            let dout = &grad[b * dims.nq * dims.dv..(b + 1) * dims.nq * dims.dv];
                            attention_backward(&dims, *scale, qb, kb, vb, p, dout)
                        },
                    )
                    .collect();
                for (target, pick, per) in [
                    (*q, 0usize, dims.nq * dims.d),
                    (*k, 1, dims.nk * dims.d),
                    (*v, 2, dims.nk * dims.dv),
                ] {
                    if !wants(target) {
                        continue;
                    }
                    let g = slot(grads, target, dims.batch * per);
                    for (b, part) in parts.iter().enumerate() {
                        let src = match pick {
                            0 => &part.0,
                            1 => &part.1,
                            _ => &part.2,
                        };
                        add_into(&mut g[b * per..(b + 1) * per], src);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = nodes[*logits].value.shape()[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                let g0 = grad[0] / T::from_f64(count as f64);
                let gl = slot(grads, *logits, probs.len());
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for c in 0..classes {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        let p = r * classes + c;
                        gl[p] = gl[p] + g0 * (probs[p] - onehot);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                for ((g, &d), &m) in slot(grads, *a, grad.len()).iter_mut().zip(grad).zip(mask) {
                    *g = *g + d * m;
                }
            }
        }
        Ok(())
    }
}

struct AttnDims {
    batch: usize,
    nq: usize,
    nk: usize,
    d: usize,
    dv: usize,
}

impl AttnDims {
    /// Query, key and value blocks of batch entry `b`.
    fn slices<'a, T>(
        &self,
        b: usize,
        q: &'a [T],
        k: &'a [T],
        v: &'a [T],
    ) -> (&'a [T], &'a [T], &'a [T]) {
        (
            &q[b * self.nq * self.d..(b + 1) * self.nq * self.d],
            &k[b * self.nk * self.d..(b + 1) * self.nk * self.d],
            &v[b * self.nk * self.dv..(b + 1) * self.nk * self.dv],
        )
    }
}

/// Fills `p` with `softmax(scale·q·kᵀ)` for one batch entry.
///
/// The backward pass calls this again instead of storing the probabilities,
/// which keeps the largest activation of the network out of memory.
fn attention_probs<T: Element>(dims: &AttnDims, scale: T, q: &[T], k: &[T], p: &mut [T]) {
    gemm(dims.nq, dims.d, dims.nk, q, false, k, true, p, false);
    vectorized(
        #[inline(always)]
        || {
            for row in p.chunks_mut(dims.nk.max(1)) {
                for x in row.iter_mut() {
                    *x = *x * scale;
                }
                kernels::softmax_row(row);
            }
        },
    );
}

fn attention_backward<T: Element>(
    dims: &AttnDims,
    scale: T,
    q: &[T],
    k: &[T],
    v: &[T],
    p: &mut [T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    attention_probs(dims, scale, q, k, p);
    let p = &*p;
    let AttnDims { nq, nk, d, dv, .. } = *dims;
    let mut dv_out = vec![T::zero(); nk * dv];
    gemm(nk, nq, dv, p, true, dout, false, &mut dv_out, false);
    let mut ds = vec![T::zero(); nq * nk];
    gemm(nq, dv, nk, dout, false, v, true, &mut ds, false);
    vectorized(
        #[inline(always)]
        || {
            for (row_ds, row_p) in ds.chunks_mut(nk.max(1)).zip(p.chunks(nk.max(1))) {
                let dot = kernels::lane_dot(row_ds, row_p);
                for (x, &pp) in row_ds.iter_mut().zip(row_p) {
                    *x = pp * (*x - dot) * scale;
                }
            }
        },
    );
    let mut dq = vec![T::zero(); nq * d];
    gemm(nq, nk, d, &ds, false, k, false, &mut dq, false);
    let mut dk = vec![T::zero(); nk * d];
    gemm(nk, nq, d, &ds, true, q, false, &mut dk, false);
    (dq, dk, dv_out)
}

/// Shape bookkeeping shared by the matmul forward and backward passes.
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    shared_b: bool,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err("matmul", a, b));
        }
        let (ra, rb) = (a.len(), b.len());
        let (m, k) = (a[ra - 2], a[ra - 1]);
        let (bk, n) = if trans_b {
            (b[rb - 1], b[rb - 2])
        } else {
            (b[rb - 2], b[rb - 1])
        };
        if k != bk {
            return Err(shape_err("matmul", a, b));
        }
        let lead: usize = a[..ra - 2].iter().product();
        if rb == 2 {
            Ok(Self {
                batch: 1,
                m: lead * m,
                k,
                n,
                trans_b,
                shared_b: true,
            })
        } else if rb == ra && a[..ra - 2] == b[..rb - 2] {
            Ok(Self {
                batch: lead,
                m,
                k,
                n,
                trans_b,
                shared_b: false,
            })
        } else {
            Err(shape_err("matmul", a, b))
        }
    }

    fn forward<T: Element>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.batch == 1 {
            gemm(m, k, n, a, false, b, self.trans_b, out, false);
            return;
        }
        out.par_chunks_mut((m * n).max(1))
            .enumerate()
            .for_each(|(i, c)| {
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    false,
                    &b[i * k * n..(i + 1) * k * n],
                    self.trans_b,
                    c,
                    false,
                );
            });
    }

    /// dA += dC · op(B)ᵀ
    fn grad_a<T: Element>(&self, dc: &[T], b: &[T], ga: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for i in 0..self.batch {
            let bb = if self.shared_b {
                b
            } else {
                &b[i * k * n..(i + 1) * k * n]
            };
            // op(B)ᵀ is B stored [n×k] when trans_b, else Bᵀ of a [k×n] buffer.
            gemm(
                m,
                n,
                k,
                &dc[i * m * n..(i + 1) * m * n],
                false,
                bb,
                !self.trans_b,
                &mut ga[i * m * k..(i + 1) * m * k],
                true,
            );
        }
    }

    /// dB += Aᵀ · dC (or its transpose when B is stored transposed).
    fn grad_b<T: Element>(&self, dc: &[T], a: &[T], gb: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for i in 0..self.batch {
            let ai = &a[i * m * k..(i + 1) * m * k];
            let dci = &dc[i * m * n..(i + 1) * m * n];
            let target = if self.shared_b {
                &mut gb[..]
            } else {
                &mut gb[i * k * n..(i + 1) * k * n]
            };
            if self.trans_b {
                gemm(n, m, k, dci, true, ai, false, target, true);
            } else {
                gemm(k, m, n, ai, true, dci, false, target, true);
            }
        }
    }
}
