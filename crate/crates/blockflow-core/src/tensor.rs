//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one training step; [`Var`] is a
//! cheap copyable handle into the tape. Calling [`Var::backward`] on a scalar
//! walks the tape in reverse and accumulates gradients into every node.
//! Construction order is the topological order, so each node is visited once,
//! after all of its consumers.
//!
//! Shape violations panic with a message naming both shapes; they never leave
//! a partially written node behind. All values are double precision and the
//! whole engine is single-threaded and deterministic: the same seed and the
//! same op sequence produce bit-identical results.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::mathx;
use crate::rng::Prng;

/// Plain tensor value: row-major data plus shape. Used to move data in and
/// out of tapes and between pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Output shape of a NumPy-style broadcast, or a panic naming both shapes.
fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shape mismatch in {op}: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn pad_left(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut p = vec![1usize; nd];
    p[nd - shape.len()..].copy_from_slice(shape);
    p
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
fn broadcast_apply(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let nd = out_shape.len();
    let ap = pad_left(a_shape, nd);
    let bp = pad_left(b_shape, nd);
    let astr = strides(&ap);
    let bstr = strides(&bp);
    let n = numel(out_shape);
    let mut out = vec![0.0; n];
    let mut coords = vec![0usize; nd];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..nd).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut ai = 0;
        let mut bi = 0;
        for d in 0..nd {
            if ap[d] != 1 {
                ai += coords[d] * astr[d];
            }
            if bp[d] != 1 {
                bi += coords[d] * bstr[d];
            }
        }
        *slot = f(a[ai], b[bi]);
    }
    out
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape`, undoing a
/// broadcast.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let nd = grad_shape.len();
    let tp = pad_left(target_shape, nd);
    let tstr = strides(&tp);
    let mut out = vec![0.0; numel(target_shape)];
    let mut coords = vec![0usize; nd];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..nd).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut ti = 0;
        for d in 0..nd {
            if tp[d] != 1 {
                ti += coords[d] * tstr[d];
            }
        }
        out[ti] += g;
    }
    out
}

/// 2-D kernel: C[m,n] += A[m,k] · B[k,n].
fn matmul_2d_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Matmul { a: usize, b: usize },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    Sigmoid { a: usize },
    Softplus { a: usize },
    Gelu { a: usize },
    SoftmaxLast { a: usize },
    LayerNormLast { a: usize, eps: f64 },
    SumAll { a: usize },
    MeanAll { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    GatherRows { a: usize, indices: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded computation of one training or inference step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
        });
        Var { tape: self, id }
    }

    /// New leaf node. Leaves receive gradients but have no parents.
    pub fn leaf(&self, shape: Vec<usize>, data: Vec<f64>) -> Var<'_> {
        assert_eq!(
            numel(&shape),
            data.len(),
            "leaf shape {:?} does not match {} values",
            shape,
            data.len()
        );
        self.push(shape, data, Op::Leaf)
    }

    pub fn leaf_from(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(Vec::new(), vec![v], Op::Leaf)
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Var<'_> {
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], Op::Leaf)
    }

    /// Leaf of i.i.d. standard normal draws.
    pub fn randn(&self, shape: Vec<usize>, rng: &mut Prng) -> Var<'_> {
        let n = numel(&shape);
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        self.push(shape, data, Op::Leaf)
    }

    /// Leaf of i.i.d. uniform draws on `[0, 1)`.
    pub fn rand_uniform(&self, shape: Vec<usize>, rng: &mut Prng) -> Var<'_> {
        let n = numel(&shape);
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        self.push(shape, data, Op::Leaf)
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    /// Gradient of the most recent `backward` pass for `id`; zeros if the
    /// node never received one.
    pub fn grad_of(&self, v: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.data.len()])
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn value(&self) -> Tensor {
        self.tape
            .with_node(self.id, |n| Tensor::new(n.shape.clone(), n.data.clone()))
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.with_node(self.id, |n| n.data.clone())
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> f64 {
        self.tape.with_node(self.id, |n| {
            assert_eq!(n.data.len(), 1, "scalar_value on shape {:?}", n.shape);
            n.data[0]
        })
    }

    pub fn grad(&self) -> Vec<f64> {
        self.tape.grad_of(*self)
    }

    pub fn is_finite(&self) -> bool {
        self.tape.with_node(self.id, |n| n.data.iter().all(|v| v.is_finite()))
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            core::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        op_name: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Var<'t> {
        self.same_tape(&other);
        let (out_shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let out_shape = broadcast_shape(op_name, &a.shape, &b.shape);
            let data = broadcast_apply(&a.data, &a.shape, &b.data, &b.shape, &out_shape, f);
            (out_shape, data)
        };
        self.tape.push(out_shape, data, make(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|&x| x + c).collect())
        };
        self.tape.push(shape, data, Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|&x| x * c).collect())
        };
        self.tape.push(shape, data, Op::MulScalar { a: self.id, c })
    }

    fn unary(self, f: impl Fn(f64) -> f64, make: impl Fn(usize) -> Op) -> Var<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, data, make(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(mathx::exp, |a| Op::Exp { a })
    }

    pub fn log(self) -> Var<'t> {
        self.unary(mathx::ln, |a| Op::Log { a })
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(mathx::sqrt, |a| Op::Sqrt { a })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(mathx::sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(mathx::softplus, |a| Op::Softplus { a })
    }

    /// Exact GELU `0.5 x (1 + erf(x / sqrt(2)))`.
    pub fn gelu(self) -> Var<'t> {
        self.unary(
            |x| 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
            |a| Op::Gelu { a },
        )
    }

    /// Batched matrix product over the trailing two axes.
    ///
    /// Leading (batch) extents must match exactly, or one operand may be 2-D
    /// and is then shared across the other's batches.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let (out_shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            assert!(
                a.shape.len() >= 2 && b.shape.len() >= 2,
                "shape mismatch in matmul: {:?} vs {:?}",
                a.shape,
                b.shape
            );
            let (m, ka) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
            let (kb, n) = (b.shape[b.shape.len() - 2], b.shape[b.shape.len() - 1]);
            let a_batch = &a.shape[..a.shape.len() - 2];
            let b_batch = &b.shape[..b.shape.len() - 2];
            assert!(
                ka == kb && (a_batch == b_batch || a_batch.is_empty() || b_batch.is_empty()),
                "shape mismatch in matmul: {:?} vs {:?}",
                a.shape,
                b.shape
            );
            let batch_shape: Vec<usize> = if a_batch.is_empty() {
                b_batch.to_vec()
            } else {
                a_batch.to_vec()
            };
            let batches = numel(&batch_shape);
            let mut out_shape = batch_shape;
            out_shape.push(m);
            out_shape.push(n);
            let mut data = vec![0.0; batches * m * n];
            for t in 0..batches {
                let ao = if a_batch.is_empty() { 0 } else { t * m * ka };
                let bo = if b_batch.is_empty() { 0 } else { t * kb * n };
                matmul_2d_into(
                    &mut data[t * m * n..(t + 1) * m * n],
                    &a.data[ao..ao + m * ka],
                    &b.data[bo..bo + kb * n],
                    m,
                    ka,
                    n,
                );
            }
            (out_shape, data)
        };
        self.tape.push(
            out_shape,
            data,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastdim(self) -> Var<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let d = *a.shape.last().expect("softmax on rank-0 tensor");
            let mut data = vec![0.0; a.data.len()];
            for (row_in, row_out) in a.data.chunks(d).zip(data.chunks_mut(d)) {
                let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &x) in row_out.iter_mut().zip(row_in) {
                    *o = mathx::exp(x - mx);
                    z += *o;
                }
                for o in row_out.iter_mut() {
                    *o /= z;
                }
            }
            (a.shape.clone(), data)
        };
        self.tape.push(shape, data, Op::SoftmaxLast { a: self.id })
    }

    /// Standardize each trailing-axis row to mean 0, variance 1 (biased
    /// variance, `eps` inside the square root). Returns only the normalized
    /// tensor; see [`layernorm_stats`] for the row statistics.
    pub fn layernorm_lastdim(self, eps: f64) -> Var<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let d = *a.shape.last().expect("layernorm on rank-0 tensor");
            assert!(d >= 2, "layernorm axis extent must be >= 2, got {d}");
            let mut data = vec![0.0; a.data.len()];
            for (row_in, row_out) in a.data.chunks(d).zip(data.chunks_mut(d)) {
                let mean = row_in.iter().sum::<f64>() / d as f64;
                let var = row_in.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / mathx::sqrt(var + eps);
                for (o, &x) in row_out.iter_mut().zip(row_in) {
                    *o = (x - mean) * inv;
                }
            }
            (a.shape.clone(), data)
        };
        self.tape
            .push(shape, data, Op::LayerNormLast { a: self.id, eps })
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().sum::<f64>()
        };
        self.tape.push(Vec::new(), vec![s], Op::SumAll { a: self.id })
    }

    pub fn mean_all(self) -> Var<'t> {
        let m = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            a.data.iter().sum::<f64>() / a.data.len() as f64
        };
        self.tape.push(Vec::new(), vec![m], Op::MeanAll { a: self.id })
    }

    pub fn reshape(self, new_shape: Vec<usize>) -> Var<'t> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(
                numel(&new_shape),
                a.data.len(),
                "shape mismatch in reshape: {:?} vs {:?}",
                a.shape,
                new_shape
            );
            a.data.clone()
        };
        self.tape.push(new_shape, data, Op::Reshape { a: self.id })
    }

    /// Reorder axes: `out.shape[i] = self.shape[perm[i]]`.
    pub fn permute(self, perm: Vec<usize>) -> Var<'t> {
        let (out_shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let nd = a.shape.len();
            assert_eq!(perm.len(), nd, "permute arity {:?} vs {:?}", perm, a.shape);
            let mut seen = vec![false; nd];
            for &p in &perm {
                assert!(p < nd && !seen[p], "invalid permutation {perm:?}");
                seen[p] = true;
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
            let in_str = strides(&a.shape);
            let out_str = strides(&out_shape);
            let mut data = vec![0.0; a.data.len()];
            let mut coords = vec![0usize; nd];
            for (flat, slot) in data.iter_mut().enumerate() {
                let mut rem = flat;
                for d in (0..nd).rev() {
                    coords[d] = rem % out_shape[d];
                    rem /= out_shape[d];
                }
                let mut src = 0;
                for d in 0..nd {
                    src += coords[d] * in_str[perm[d]];
                }
                *slot = a.data[src];
            }
            let _ = out_str;
            (out_shape, data)
        };
        self.tape.push(out_shape, data, Op::Permute { a: self.id, perm })
    }

    /// Swap the trailing two axes.
    pub fn transpose_last2(self) -> Var<'t> {
        let nd = self.shape().len();
        assert!(nd >= 2, "transpose_last2 on rank-{nd} tensor");
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(perm)
    }

    /// Row lookup into a 2-D table; gradients scatter-add back.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let (out_shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 2, "gather_rows on shape {:?}", a.shape);
            let (v, e) = (a.shape[0], a.shape[1]);
            let mut data = Vec::with_capacity(indices.len() * e);
            for &i in indices {
                assert!(i < v, "gather_rows index {i} out of {v}");
                data.extend_from_slice(&a.data[i * e..(i + 1) * e]);
            }
            (vec![indices.len(), e], data)
        };
        self.tape.push(
            out_shape,
            data,
            Op::GatherRows {
                a: self.id,
                indices: indices.to_vec(),
            },
        )
    }

    /// Propagate gradients from this scalar back through the tape.
    ///
    /// Leaf gradients accumulate across repeated calls; intermediate node
    /// gradients are recomputed per call.
    pub fn backward(self) {
        let mut nodes = self.tape.nodes.borrow_mut();
        assert_eq!(
            nodes[self.id].data.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            nodes[self.id].shape
        );
        for node in nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        {
            let loss = &mut nodes[self.id];
            match &mut loss.grad {
                Some(g) => g[0] += 1.0,
                None => loss.grad = Some(vec![1.0]),
            }
        }
        for i in (0..=self.id).rev() {
            backward_node(&mut nodes, i);
        }
    }
}

/// Concatenate along `axis`. All parts must agree on the other axes.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let tape = parts[0].tape;
    for p in parts {
        parts[0].same_tape(p);
    }
    let (out_shape, data) = {
        let nodes = tape.nodes.borrow();
        let first = &nodes[parts[0].id];
        let nd = first.shape.len();
        assert!(axis < nd, "concat axis {axis} out of rank {nd}");
        let mut axis_total = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            assert!(
                s.len() == nd
                    && s.iter()
                        .enumerate()
                        .all(|(d, &x)| d == axis || x == first.shape[d]),
                "shape mismatch in concat: {:?} vs {:?}",
                first.shape,
                s
            );
            axis_total += s[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let row = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let node = &nodes[p.id];
            let pa = node.shape[axis];
            for o in 0..outer {
                let dst = o * row + offset * inner;
                let src = o * pa * inner;
                data[dst..dst + pa * inner].copy_from_slice(&node.data[src..src + pa * inner]);
            }
            offset += pa;
        }
        (out_shape, data)
    };
    tape.push(
        out_shape,
        data,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    )
}

/// Normalized tensor plus the per-row mean and (biased) variance used to
/// standardize it. The statistics are plain values, not tape nodes; gradients
/// flow through the normalized output only.
pub fn layernorm_stats(x: Var<'_>, eps: f64) -> (Var<'_>, Vec<f64>, Vec<f64>) {
    let t = x.value();
    let d = *t.shape.last().expect("layernorm on rank-0 tensor");
    let rows = t.data.len() / d;
    let mut means = Vec::with_capacity(rows);
    let mut vars = Vec::with_capacity(rows);
    for row in t.data.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        means.push(mean);
        vars.push(var);
    }
    (x.layernorm_lastdim(eps), means, vars)
}

fn accumulate(nodes: &mut [Node], id: usize, contrib: Vec<f64>) {
    let node = &mut nodes[id];
    match &mut node.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(&contrib) {
                *gi += ci;
            }
        }
        None => node.grad = Some(contrib),
    }
}

fn backward_node(nodes: &mut [Node], i: usize) {
    let (head, tail) = nodes.split_at_mut(i);
    let node = &tail[0];
    let Some(g) = node.grad.as_ref() else {
        return;
    };
    // Parents always precede their consumers, so they live in `head`.
    match node.op.clone() {
        Op::Leaf => {}
        Op::Add { a, b } => {
            let da = reduce_to_shape(g, &node.shape, &head[a].shape);
            let db = reduce_to_shape(g, &node.shape, &head[b].shape);
            accumulate(head, a, da);
            accumulate(head, b, db);
        }
        Op::Sub { a, b } => {
            let da = reduce_to_shape(g, &node.shape, &head[a].shape);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            let db = reduce_to_shape(&neg, &node.shape, &head[b].shape);
            accumulate(head, a, da);
            accumulate(head, b, db);
        }
        Op::Mul { a, b } => {
            let ga = broadcast_apply(
                g,
                &node.shape,
                &head[b].data,
                &head[b].shape,
                &node.shape,
                |x, y| x * y,
            );
            let da = reduce_to_shape(&ga, &node.shape, &head[a].shape);
            let gb = broadcast_apply(
                g,
                &node.shape,
                &head[a].data,
                &head[a].shape,
                &node.shape,
                |x, y| x * y,
            );
            let db = reduce_to_shape(&gb, &node.shape, &head[b].shape);
            accumulate(head, a, da);
            accumulate(head, b, db);
        }
        Op::AddScalar { a } => {
            accumulate(head, a, g.clone());
        }
        Op::MulScalar { a, c } => {
            accumulate(head, a, g.iter().map(|x| x * c).collect());
        }
        Op::Matmul { a, b } => {
            let a_shape = head[a].shape.clone();
            let b_shape = head[b].shape.clone();
            let m = a_shape[a_shape.len() - 2];
            let k = a_shape[a_shape.len() - 1];
            let n = b_shape[b_shape.len() - 1];
            let batches = node.data.len() / (m * n);
            let a_batched = numel(&a_shape) != m * k;
            let b_batched = numel(&b_shape) != k * n;
            // dA = dC · B^T per batch (summed over batches when A is shared).
            let mut da = vec![0.0; numel(&a_shape)];
            let mut db = vec![0.0; numel(&b_shape)];
            let mut bt = vec![0.0; k * n];
            let mut at = vec![0.0; m * k];
            for t in 0..batches {
                let go = t * m * n;
                let ao = if a_batched { t * m * k } else { 0 };
                let bo = if b_batched { t * k * n } else { 0 };
                let bdat = &head[b].data[bo..bo + k * n];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bdat[p * n + j];
                    }
                }
                matmul_2d_into(&mut da[ao..ao + m * k], &g[go..go + m * n], &bt, m, n, k);
                let adat = &head[a].data[ao..ao + m * k];
                for r in 0..m {
                    for p in 0..k {
                        at[p * m + r] = adat[r * k + p];
                    }
                }
                matmul_2d_into(&mut db[bo..bo + k * n], &at, &g[go..go + m * n], k, m, n);
            }
            accumulate(head, a, da);
            accumulate(head, b, db);
        }
        Op::Exp { a } => {
            accumulate(
                head,
                a,
                g.iter().zip(&node.data).map(|(x, y)| x * y).collect(),
            );
        }
        Op::Log { a } => {
            let da: Vec<f64> = g.iter().zip(&head[a].data).map(|(x, v)| x / v).collect();
            accumulate(head, a, da);
        }
        Op::Sqrt { a } => {
            accumulate(
                head,
                a,
                g.iter().zip(&node.data).map(|(x, s)| x / (2.0 * s)).collect(),
            );
        }
        Op::Sigmoid { a } => {
            accumulate(
                head,
                a,
                g.iter()
                    .zip(&node.data)
                    .map(|(x, s)| x * s * (1.0 - s))
                    .collect(),
            );
        }
        Op::Softplus { a } => {
            let da: Vec<f64> = g
                .iter()
                .zip(&head[a].data)
                .map(|(x, v)| x * mathx::sigmoid(*v))
                .collect();
            accumulate(head, a, da);
        }
        Op::Gelu { a } => {
            let da: Vec<f64> = g
                .iter()
                .zip(&head[a].data)
                .map(|(x, &v)| {
                    let cdf = 0.5 * (1.0 + libm::erf(v * core::f64::consts::FRAC_1_SQRT_2));
                    let pdf = mathx::exp(-0.5 * v * v) / mathx::sqrt(2.0 * core::f64::consts::PI);
                    x * (cdf + v * pdf)
                })
                .collect();
            accumulate(head, a, da);
        }
        Op::SoftmaxLast { a } => {
            let d = *node.shape.last().unwrap();
            let mut da = vec![0.0; node.data.len()];
            for ((grow, yrow), orow) in g
                .chunks(d)
                .zip(node.data.chunks(d))
                .zip(da.chunks_mut(d))
            {
                let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(head, a, da);
        }
        Op::LayerNormLast { a, eps } => {
            let d = *node.shape.last().unwrap();
            let x = &head[a].data;
            let mut da = vec![0.0; x.len()];
            for (((grow, yrow), xrow), orow) in g
                .chunks(d)
                .zip(node.data.chunks(d))
                .zip(x.chunks(d))
                .zip(da.chunks_mut(d))
            {
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / mathx::sqrt(var + eps);
                let g_mean = grow.iter().sum::<f64>() / d as f64;
                let gy_mean = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = inv * (gv - g_mean - yv * gy_mean);
                }
            }
            accumulate(head, a, da);
        }
        Op::SumAll { a } => {
            accumulate(head, a, vec![g[0]; head[a].data.len()]);
        }
        Op::MeanAll { a } => {
            let n = head[a].data.len();
            accumulate(head, a, vec![g[0] / n as f64; n]);
        }
        Op::Reshape { a } => {
            accumulate(head, a, g.clone());
        }
        Op::Permute { a, perm } => {
            // Scatter the gradient back through the inverse permutation.
            let in_shape = head[a].shape.clone();
            let nd = in_shape.len();
            let in_str = strides(&in_shape);
            let mut da = vec![0.0; head[a].data.len()];
            let mut coords = vec![0usize; nd];
            for (flat, &gv) in g.iter().enumerate() {
                let mut rem = flat;
                for d in (0..nd).rev() {
                    coords[d] = rem % node.shape[d];
                    rem /= node.shape[d];
                }
                let mut src = 0;
                for d in 0..nd {
                    src += coords[d] * in_str[perm[d]];
                }
                da[src] += gv;
            }
            accumulate(head, a, da);
        }
        Op::Concat { parts, axis } => {
            let outer: usize = node.shape[..axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let row = node.shape[axis] * inner;
            let mut offset = 0;
            for &p in &parts {
                let pa = head[p].shape[axis];
                let mut dp = vec![0.0; head[p].data.len()];
                for o in 0..outer {
                    let src = o * row + offset * inner;
                    let dst = o * pa * inner;
                    dp[dst..dst + pa * inner].copy_from_slice(&g[src..src + pa * inner]);
                }
                accumulate(head, p, dp);
                offset += pa;
            }
        }
        Op::GatherRows { a, indices } => {
            let e = head[a].shape[1];
            let mut da = vec![0.0; head[a].data.len()];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..e {
                    da[i * e + c] += g[r * e + c];
                }
            }
            accumulate(head, a, da);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_check::{max_rel_err, numeric_grad};
    use crate::rng;

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = tape.leaf(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.matmul(b).data(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1, 2], vec![1.0, 2.0]);
        let b = tape.leaf(vec![2, 1], vec![3.0, 4.0]);
        assert_eq!(a.matmul(b).data(), vec![11.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch in matmul")]
    fn matmul_rejects_bad_inner() {
        let tape = Tape::new();
        let a = tape.leaf(vec![2, 3], vec![0.0; 6]);
        let b = tape.leaf(vec![2, 2], vec![0.0; 4]);
        let _ = a.matmul(b);
    }

    #[test]
    fn matmul_grad_is_b_transpose_for_sum_loss() {
        let mut r = rng::substream(7, "t");
        let tape = Tape::new();
        let a = tape.randn(vec![3, 4], &mut r);
        let b = tape.randn(vec![4, 2], &mut r);
        a.matmul(b).sum_all().backward();
        // d sum(AB) / dA = 1 · B^T broadcast over rows.
        let bt = b.value();
        let ga = a.grad();
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..2).map(|j| bt.data[p * 2 + j]).sum();
                assert!((ga[i * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let tape = Tape::new();
        let a = tape.leaf(vec![2], vec![0.0, 0.0]);
        assert_eq!(a.softmax_lastdim().data(), vec![0.5, 0.5]);
        let b = tape.leaf(vec![2], vec![1000.0, 1000.0]);
        assert_eq!(b.softmax_lastdim().data(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng::substream(3, "t");
        let tape = Tape::new();
        let x = tape.randn(vec![5, 7], &mut r);
        let y = x.softmax_lastdim().data();
        for row in y.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layernorm_constant_row_maps_to_zero() {
        let tape = Tape::new();
        let x = tape.leaf(vec![4], vec![1.0, 1.0, 1.0, 1.0]);
        let y = x.layernorm_lastdim(1e-5).data();
        assert!(y.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn layernorm_two_points() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2], vec![0.0, 2.0]);
        let y = x.layernorm_lastdim(1e-5).data();
        assert!((y[0] + 1.0).abs() < 1e-4);
        assert!((y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_stats_row_moments() {
        let mut r = rng::substream(11, "t");
        let tape = Tape::new();
        let x = tape.randn(vec![6, 9], &mut r);
        let (y, means, vars) = layernorm_stats(x, 1e-5);
        assert_eq!(means.len(), 6);
        assert_eq!(vars.len(), 6);
        for row in y.data().chunks(9) {
            let m = row.iter().sum::<f64>() / 9.0;
            let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let p = tape.leaf(vec![3], vec![5.0, -1.0, 2.0]);
        p.sum_all().backward();
        assert_eq!(p.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let tape = Tape::new();
        let p = tape.leaf(vec![2], vec![1.0, 2.0]);
        p.square().sum_all().backward();
        assert_eq!(p.grad(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let tape = Tape::new();
        let p = tape.leaf(vec![2], vec![1.0, 2.0]);
        let loss = p.sum_all();
        loss.backward();
        loss.backward();
        assert_eq!(p.grad(), vec![2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar loss")]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let p = tape.leaf(vec![2], vec![1.0, 2.0]);
        p.backward();
    }

    /// Central finite differences over every differentiable op. Inputs are
    /// drawn in ranges that keep each op well-conditioned.
    #[test]
    fn finite_difference_suite() {
        type Builder = fn(&Tape, &[Tensor]) -> f64;
        // (name, builder, n params, shape, offset, scale)
        let cases: &[(&str, Builder, usize, &[usize], f64, f64)] = &[
            (
                "add",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    let b = t.leaf_from(&p[1]);
                    a.add(b).square().sum_all().backward();
                    0.0
                },
                2,
                &[2, 3],
                0.0,
                1.0,
            ),
            (
                "sub_bcast",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![1, 2, 3]);
                    let b = t.leaf_from(&p[1]).reshape(vec![2, 1, 3]);
                    a.sub(b).square().sum_all().backward();
                    0.0
                },
                2,
                &[2, 3],
                0.0,
                1.0,
            ),
            (
                "mul_bcast",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    let b = t.leaf_from(&p[1]).reshape(vec![2, 1, 3]);
                    let big = a.reshape(vec![1, 2, 3]);
                    big.mul(b).sum_all().backward();
                    0.0
                },
                2,
                &[2, 3],
                0.0,
                1.0,
            ),
            (
                "matmul",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![2, 3]);
                    let b = t.leaf_from(&p[1]).reshape(vec![3, 2]);
                    a.matmul(b).square().sum_all().backward();
                    0.0
                },
                2,
                &[6],
                0.0,
                1.0,
            ),
            (
                "matmul_batched",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![2, 2, 3]);
                    let b = t.leaf_from(&p[1]).reshape(vec![3, 4]);
                    a.matmul(b).square().sum_all().backward();
                    0.0
                },
                2,
                &[12],
                0.0,
                0.5,
            ),
            (
                "exp",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    a.exp().sum_all().backward();
                    0.0
                },
                1,
                &[4],
                0.0,
                1.0,
            ),
            (
                "log",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    a.log().sum_all().backward();
                    0.0
                },
                1,
                &[4],
                3.0,
                1.0,
            ),
            (
                "sqrt",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    a.sqrt().sum_all().backward();
                    0.0
                },
                1,
                &[4],
                3.0,
                1.0,
            ),
            (
                "sigmoid",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    a.sigmoid().square().sum_all().backward();
                    0.0
                },
                1,
                &[5],
                0.0,
                2.0,
            ),
            (
                "softplus",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    a.softplus().square().sum_all().backward();
                    0.0
                },
                1,
                &[5],
                0.0,
                2.0,
            ),
            (
                "gelu",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    a.gelu().sum_all().backward();
                    0.0
                },
                1,
                &[5],
                0.0,
                2.0,
            ),
            (
                "softmax",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![2, 3]);
                    a.softmax_lastdim().square().sum_all().backward();
                    0.0
                },
                1,
                &[6],
                0.0,
                2.0,
            ),
            (
                "layernorm",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![2, 4]);
                    a.layernorm_lastdim(1e-5).square().sum_all().backward();
                    0.0
                },
                1,
                &[8],
                0.0,
                2.0,
            ),
            (
                "mean_all",
                |t, p| {
                    let a = t.leaf_from(&p[0]);
                    a.mean_all().backward();
                    0.0
                },
                1,
                &[6],
                0.0,
                1.0,
            ),
            (
                "permute",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![2, 3, 2]);
                    let b = a.permute(vec![1, 0, 2]);
                    b.square().sum_all().backward();
                    0.0
                },
                1,
                &[12],
                0.0,
                1.0,
            ),
            (
                "concat",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![2, 2]);
                    let b = t.leaf_from(&p[1]).reshape(vec![2, 2]);
                    concat(&[a, b], 1).square().sum_all().backward();
                    0.0
                },
                2,
                &[4],
                0.0,
                1.0,
            ),
            (
                "gather_rows",
                |t, p| {
                    let a = t.leaf_from(&p[0]).reshape(vec![3, 2]);
                    a.gather_rows(&[2, 0, 2]).square().sum_all().backward();
                    0.0
                },
                1,
                &[6],
                0.0,
                1.0,
            ),
        ];

        for &(name, build, nparams, shape, offset, scale) in cases {
            let mut r = rng::substream(99, name);
            let params: Vec<Tensor> = (0..nparams)
                .map(|_| {
                    let n = numel(shape);
                    let data: Vec<f64> = (0..n)
                        .map(|_| offset + scale * (r.random::<f64>() * 2.0 - 1.0))
                        .collect();
                    Tensor::new(shape.to_vec(), data)
                })
                .collect();

            let run = |p: &[Tensor]| -> f64 {
                let tape = Tape::new();
                // Rebuild the same graph; loss is the last scalar pushed.
                build(&tape, p);
                let nodes = tape.nodes.borrow();
                nodes.last().unwrap().data[0]
            };

            // Analytic pass.
            let tape = Tape::new();
            build(&tape, &params);
            let analytic: Vec<Vec<f64>> = {
                let nodes = tape.nodes.borrow();
                (0..nparams)
                    .map(|i| {
                        nodes[i]
                            .grad
                            .clone()
                            .unwrap_or_else(|| vec![0.0; nodes[i].data.len()])
                    })
                    .collect()
            };
            let numeric = numeric_grad(&params, 1e-5, run);
            for (pi, (ag, ng)) in analytic.iter().zip(&numeric).enumerate() {
                let err = max_rel_err(ag, ng);
                assert!(
                    err < 1e-6,
                    "{name} param {pi}: max rel err {err:.3e}\n analytic {ag:?}\n numeric  {ng:?}"
                );
            }
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let run = || {
            let mut r = rng::substream(42, "det");
            let tape = Tape::new();
            let a = tape.randn(vec![4, 4], &mut r);
            let b = tape.rand_uniform(vec![4, 4], &mut r);
            let y = a.matmul(b).sigmoid().mean_all();
            y.backward();
            (y.scalar_value(), a.grad())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sanctioned_ops_stay_finite() {
        let mut r = rng::substream(5, "fin");
        let tape = Tape::new();
        let a = tape.randn(vec![8, 8], &mut r);
        let b = tape.randn(vec![8, 8], &mut r);
        let y = a
            .matmul(b)
            .layernorm_lastdim(1e-5)
            .softmax_lastdim()
            .mul_scalar(3.0)
            .add_scalar(-1.0)
            .gelu()
            .sigmoid()
            .softplus()
            .mean_all();
        y.backward();
        assert!(y.is_finite());
        assert!(a.grad().iter().all(|v| v.is_finite()));
        assert!(b.grad().iter().all(|v| v.is_finite()));
    }

    #[test]
    #[should_panic(expected = "shape mismatch in add")]
    fn add_rejects_incompatible_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(vec![2, 3], vec![0.0; 6]);
        let b = tape.leaf(vec![2, 2], vec![0.0; 4]);
        let _ = a.add(b);
    }
}
