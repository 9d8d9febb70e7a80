//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Just enough machinery for the transformer beta-VAE: explicit shapes
//! (no broadcasting beyond scalar-tensor), a per-forward-pass [`Tape`],
//! and a fixed primitive set. Shape mismatches are programming errors and
//! panic with the primitive's name.
//!
//! Numerical guards: `softmax` subtracts the row max, `log` clamps its
//! input at 1e-300, `layer_norm` uses epsilon 1e-5, and `gelu` is the
//! tanh approximation (finite-difference tests target the same function).

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::math;
use crate::rng::Stream;

const LOG_FLOOR: f64 = 1e-300;
const LN_EPS: f64 = 1e-5;

/// A dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Stream) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.normal() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// 2D (or batched 3D) matmul kernel: (m,k)x(k,n) -> (m,n), accumulating
/// into `out` (caller zeroes it).
fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// out = a * mul + add (scalar constants)
    Affine {
        a: usize,
        mul: f64,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    /// transpose of the last two axes
    Transpose(usize),
    /// swap axes 0 and 1 of a 3D tensor
    SwapBatchAxis(usize),
    Reshape(usize),
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    SumAll(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        a: usize,
        scale: usize,
        shift: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    MaskedFill {
        a: usize,
        mask: Tensor,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass; dropped (or reused) after `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape.clone()
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients of one scalar with respect to tape nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads[var.idx].as_ref()
    }

    /// Gradient of a leaf, zero-filled if the node was never reached.
    pub fn of_or_zero(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    fn unary<F>(self, name: &str, f: F, op: fn(usize) -> Op) -> Var<'t>
    where
        F: Fn(f64) -> f64,
    {
        let _ = name;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&v| f(v)).collect(),
            }
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, op(self.idx), req)
    }

    fn binary<F>(self, rhs: Var<'t>, name: &str, f: F, op: fn(usize, usize) -> Op) -> Var<'t>
    where
        F: Fn(f64, f64) -> f64,
    {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[rhs.idx].value;
            assert_eq!(a.shape, b.shape, "{name}: shape mismatch {:?} vs {:?}", a.shape, b.shape);
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        let req = self.tape.requires(self.idx) || self.tape.requires(rhs.idx);
        self.tape.push(value, op(self.idx, rhs.idx), req)
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise a*mul + add with scalar constants.
    pub fn affine(self, mul: f64, add: f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&v| v * mul + add).collect(),
            }
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::Affine { a: self.idx, mul }, req)
    }

    pub fn scale(self, mul: f64) -> Var<'t> {
        self.affine(mul, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    /// Matrix product. Accepts (m,k)x(k,n) or batched (B,m,k)x(B,k,n).
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[rhs.idx].value;
            matmul_forward(a, b)
        };
        let req = self.tape.requires(self.idx) || self.tape.requires(rhs.idx);
        self.tape.push(
            value,
            Op::MatMul {
                a: self.idx,
                b: rhs.idx,
            },
            req,
        )
    }

    /// Transpose the last two axes (2D or 3D).
    pub fn transpose(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            transpose_last_two(&nodes[self.idx].value)
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::Transpose(self.idx), req)
    }

    /// Swap axes 0 and 1 of a 3D tensor: (a,b,c) -> (b,a,c).
    pub fn swap_batch_axis(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            swap01(&nodes[self.idx].value)
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::SwapBatchAxis(self.idx), req)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            assert_eq!(
                a.data.len(),
                shape.iter().product::<usize>(),
                "reshape: cannot view {:?} as {:?}",
                a.shape,
                shape
            );
            Tensor {
                shape: shape.to_vec(),
                data: a.data.clone(),
            }
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::Reshape(self.idx), req)
    }

    pub fn concat(self, rhs: Var<'t>, axis: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            concat_forward(&nodes[self.idx].value, &nodes[rhs.idx].value, axis)
        };
        let req = self.tape.requires(self.idx) || self.tape.requires(rhs.idx);
        self.tape.push(
            value,
            Op::Concat {
                a: self.idx,
                b: rhs.idx,
                axis,
            },
            req,
        )
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            slice_forward(&nodes[self.idx].value, axis, start, len)
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(
            value,
            Op::Slice {
                a: self.idx,
                axis,
                start,
            },
            req,
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            Tensor::scalar(nodes[self.idx].value.data.iter().sum())
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::SumAll(self.idx), req)
    }

    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            reduce_axis(&nodes[self.idx].value, axis, false)
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::SumAxis { a: self.idx, axis }, req)
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            reduce_axis(&nodes[self.idx].value, axis, true)
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::MeanAxis { a: self.idx, axis }, req)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary("exp", math::exp, Op::Exp)
    }

    /// Natural log, input clamped at 1e-300.
    pub fn log(self) -> Var<'t> {
        self.unary("log", |v| math::ln(v.max(LOG_FLOOR)), Op::Log)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary("tanh", math::tanh, Op::Tanh)
    }

    /// Gelu, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary("gelu", gelu_fwd, Op::Gelu)
    }

    /// Softmax over the last axis (row max subtracted).
    pub fn softmax(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            softmax_forward(&nodes[self.idx].value)
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::Softmax(self.idx), req)
    }

    /// Layer norm over the last axis with learned scale and shift
    /// (shapes: scale and shift match the last axis).
    pub fn layer_norm(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            layer_norm_forward(
                &nodes[self.idx].value,
                &nodes[scale.idx].value,
                &nodes[shift.idx].value,
            )
        };
        let req = self.tape.requires(self.idx)
            || self.tape.requires(scale.idx)
            || self.tape.requires(shift.idx);
        self.tape.push(
            value,
            Op::LayerNorm {
                a: self.idx,
                scale: scale.idx,
                shift: shift.idx,
            },
            req,
        )
    }

    /// Rows of `self` (a (V,d) table) gathered by index.
    pub fn embedding_lookup(self, indices: &[usize]) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let table = &nodes[self.idx].value;
            assert_eq!(table.shape.len(), 2, "embedding_lookup: table must be 2D");
            let (v, d) = (table.shape[0], table.shape[1]);
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                assert!(i < v, "embedding_lookup: index {i} out of table size {v}");
                data.extend_from_slice(&table.data[i * d..(i + 1) * d]);
            }
            Tensor {
                shape: vec![indices.len(), d],
                data,
            }
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(
            value,
            Op::Embedding {
                table: self.idx,
                indices: indices.to_vec(),
            },
            req,
        )
    }

    /// Where mask != 0, replace by `fill`; gradient is blocked there.
    pub fn masked_fill(self, mask: &Tensor, fill: f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            assert_eq!(a.shape, mask.shape, "masked_fill: mask shape mismatch");
            Tensor {
                shape: a.shape.clone(),
                data: a
                    .data
                    .iter()
                    .zip(&mask.data)
                    .map(|(&v, &m)| if m != 0.0 { fill } else { v })
                    .collect(),
            }
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(
            value,
            Op::MaskedFill {
                a: self.idx,
                mask: mask.clone(),
            },
            req,
        )
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the range.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|&v| v.clamp(lo, hi)).collect(),
            }
        };
        let req = self.tape.requires(self.idx);
        self.tape.push(value, Op::Clamp { a: self.idx, lo, hi }, req)
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + math::tanh(C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    match (a.shape.len(), b.shape.len()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            assert_eq!(k, k2, "matmul: inner dims {:?} x {:?}", a.shape, b.shape);
            let mut out = vec![0.0; m * n];
            matmul_kernel(&a.data, &b.data, &mut out, m, k, n);
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        }
        (3, 3) => {
            let (bsz, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (bsz2, k2, n) = (b.shape[0], b.shape[1], b.shape[2]);
            assert!(
                bsz == bsz2 && k == k2,
                "matmul: batched dims {:?} x {:?}",
                a.shape,
                b.shape
            );
            let mut out = vec![0.0; bsz * m * n];
            for i in 0..bsz {
                matmul_kernel(
                    &a.data[i * m * k..(i + 1) * m * k],
                    &b.data[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor {
                shape: vec![bsz, m, n],
                data: out,
            }
        }
        _ => panic!("matmul: unsupported ranks {:?} x {:?}", a.shape, b.shape),
    }
}

fn transpose_last_two(a: &Tensor) -> Tensor {
    match a.shape.len() {
        2 => {
            let (m, n) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = a.data[i * n + j];
                }
            }
            Tensor {
                shape: vec![n, m],
                data,
            }
        }
        3 => {
            let (b, m, n) = (a.shape[0], a.shape[1], a.shape[2]);
            let mut data = vec![0.0; b * m * n];
            for t in 0..b {
                let src = &a.data[t * m * n..];
                let dst = &mut data[t * m * n..(t + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            Tensor {
                shape: vec![b, n, m],
                data,
            }
        }
        _ => panic!("transpose: unsupported rank {:?}", a.shape),
    }
}

fn swap01(a: &Tensor) -> Tensor {
    assert_eq!(a.shape.len(), 3, "swap_batch_axis: tensor must be 3D");
    let (x, y, z) = (a.shape[0], a.shape[1], a.shape[2]);
    let mut data = vec![0.0; x * y * z];
    for i in 0..x {
        for j in 0..y {
            let src = &a.data[(i * y + j) * z..(i * y + j + 1) * z];
            data[(j * x + i) * z..(j * x + i + 1) * z].copy_from_slice(src);
        }
    }
    Tensor {
        shape: vec![y, x, z],
        data,
    }
}

fn concat_forward(a: &Tensor, b: &Tensor, axis: usize) -> Tensor {
    assert_eq!(a.shape.len(), b.shape.len(), "concat: rank mismatch");
    for (i, (&x, &y)) in a.shape.iter().zip(&b.shape).enumerate() {
        assert!(i == axis || x == y, "concat: shapes {:?} vs {:?} on axis {axis}", a.shape, b.shape);
    }
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let (la, lb) = (a.shape[axis], b.shape[axis]);
    let mut shape = a.shape.clone();
    shape[axis] = la + lb;
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * la * inner..(o + 1) * la * inner]);
        data.extend_from_slice(&b.data[o * lb * inner..(o + 1) * lb * inner]);
    }
    Tensor { shape, data }
}

fn slice_forward(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    assert!(axis < a.shape.len(), "slice: axis {axis} out of rank");
    assert!(
        start + len <= a.shape[axis],
        "slice: {start}..{} out of axis size {}",
        start + len,
        a.shape[axis]
    );
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let la = a.shape[axis];
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * la + start) * inner;
        data.extend_from_slice(&a.data[base..base + len * inner]);
    }
    Tensor { shape, data }
}

fn reduce_axis(a: &Tensor, axis: usize, mean: bool) -> Tensor {
    assert!(axis < a.shape.len(), "sum/mean: axis {axis} out of rank");
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let la = a.shape[axis];
    let mut shape = a.shape.clone();
    shape.remove(axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..la {
            let base = (o * la + l) * inner;
            for i in 0..inner {
                data[o * inner + i] += a.data[base + i];
            }
        }
    }
    if mean {
        for v in &mut data {
            *v /= la as f64;
        }
    }
    Tensor { shape, data }
}

fn softmax_forward(a: &Tensor) -> Tensor {
    assert!(!a.shape.is_empty(), "softmax: scalar input");
    let last = *a.shape.last().unwrap();
    let rows = a.data.len() / last;
    let mut data = vec![0.0; a.data.len()];
    for r in 0..rows {
        let src = &a.data[r * last..(r + 1) * last];
        let dst = &mut data[r * last..(r + 1) * last];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = math::exp(s - max);
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

fn layer_norm_forward(a: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let last = *a.shape.last().expect("layer_norm: scalar input");
    assert_eq!(scale.data.len(), last, "layer_norm: scale length");
    assert_eq!(shift.data.len(), last, "layer_norm: shift length");
    let rows = a.data.len() / last;
    let mut data = vec![0.0; a.data.len()];
    for r in 0..rows {
        let src = &a.data[r * last..(r + 1) * last];
        let dst = &mut data[r * last..(r + 1) * last];
        let mean = src.iter().sum::<f64>() / last as f64;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
        let inv = 1.0 / math::sqrt(var + LN_EPS);
        for i in 0..last {
            dst[i] = (src[i] - mean) * inv * scale.data[i] + shift.data[i];
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// Reverse-mode sweep from a scalar loss. Visits nodes once in reverse
/// topological (tape) order.
pub fn backward(loss: Var<'_>) -> Gradients {
    let nodes = loss.tape.nodes.borrow();
    assert_eq!(
        nodes[loss.idx].value.data.len(),
        1,
        "backward: loss must be scalar"
    );
    let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
    grads[loss.idx] = Some(Tensor::scalar(1.0));
    for idx in (0..=loss.idx).rev() {
        let Some(gout) = grads[idx].take() else {
            continue;
        };
        let node = &nodes[idx];
        if !node.requires_grad {
            grads[idx] = Some(gout);
            continue;
        }
        let mut accumulate = |target: usize, delta: Tensor| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(g) => {
                    for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                        *gv += dv;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            // leaves keep their accumulated gradient for the caller
            Op::Leaf => {
                grads[idx] = Some(gout);
            }
            Op::Add(a, b) => {
                accumulate(*a, gout.clone());
                accumulate(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                accumulate(*a, gout.clone());
                let mut g = gout.clone();
                for v in &mut g.data {
                    *v = -*v;
                }
                accumulate(*b, g);
            }
            Op::Mul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let ga = Tensor {
                    shape: av.shape.clone(),
                    data: gout.data.iter().zip(&bv.data).map(|(&g, &v)| g * v).collect(),
                };
                let gb = Tensor {
                    shape: bv.shape.clone(),
                    data: gout.data.iter().zip(&av.data).map(|(&g, &v)| g * v).collect(),
                };
                accumulate(*a, ga);
                accumulate(*b, gb);
            }
            Op::Affine { a, mul } => {
                let mut g = gout.clone();
                for v in &mut g.data {
                    *v *= mul;
                }
                accumulate(*a, g);
            }
            Op::MatMul { a, b } => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let bt = transpose_last_two(bv);
                let at = transpose_last_two(av);
                accumulate(*a, matmul_forward(&gout, &bt));
                accumulate(*b, matmul_forward(&at, &gout));
            }
            Op::Transpose(a) => accumulate(*a, transpose_last_two(&gout)),
            Op::SwapBatchAxis(a) => accumulate(*a, swap01(&gout)),
            Op::Reshape(a) => {
                let shape = nodes[*a].value.shape.clone();
                accumulate(
                    *a,
                    Tensor {
                        shape,
                        data: gout.data.clone(),
                    },
                );
            }
            Op::Concat { a, b, axis } => {
                let la = nodes[*a].value.shape[*axis];
                let lb = nodes[*b].value.shape[*axis];
                accumulate(*a, slice_forward(&gout, *axis, 0, la));
                accumulate(*b, slice_forward(&gout, *axis, la, lb));
            }
            Op::Slice { a, axis, start } => {
                let av = &nodes[*a].value;
                let outer: usize = av.shape[..*axis].iter().product();
                let inner: usize = av.shape[*axis + 1..].iter().product();
                let la = av.shape[*axis];
                let len = gout.shape[*axis];
                let mut g = Tensor::zeros(&av.shape);
                for o in 0..outer {
                    let dst = (o * la + start) * inner;
                    let src = o * len * inner;
                    g.data[dst..dst + len * inner]
                        .copy_from_slice(&gout.data[src..src + len * inner]);
                }
                accumulate(*a, g);
            }
            Op::SumAll(a) => {
                let av = &nodes[*a].value;
                accumulate(*a, Tensor::filled(&av.shape, gout.data[0]));
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let av = &nodes[*a].value;
                let outer: usize = av.shape[..*axis].iter().product();
                let inner: usize = av.shape[*axis + 1..].iter().product();
                let la = av.shape[*axis];
                let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / la as f64
                } else {
                    1.0
                };
                let mut g = Tensor::zeros(&av.shape);
                for o in 0..outer {
                    for l in 0..la {
                        let base = (o * la + l) * inner;
                        for i in 0..inner {
                            g.data[base + i] = gout.data[o * inner + i] * factor;
                        }
                    }
                }
                accumulate(*a, g);
            }
            Op::Exp(a) => {
                let out = &node.value;
                let g = Tensor {
                    shape: out.shape.clone(),
                    data: gout.data.iter().zip(&out.data).map(|(&g, &v)| g * v).collect(),
                };
                accumulate(*a, g);
            }
            Op::Log(a) => {
                let av = &nodes[*a].value;
                let g = Tensor {
                    shape: av.shape.clone(),
                    data: gout
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(&g, &v)| g / v.max(LOG_FLOOR))
                        .collect(),
                };
                accumulate(*a, g);
            }
            Op::Tanh(a) => {
                let out = &node.value;
                let g = Tensor {
                    shape: out.shape.clone(),
                    data: gout
                        .data
                        .iter()
                        .zip(&out.data)
                        .map(|(&g, &t)| g * (1.0 - t * t))
                        .collect(),
                };
                accumulate(*a, g);
            }
            Op::Gelu(a) => {
                let av = &nodes[*a].value;
                let g = Tensor {
                    shape: av.shape.clone(),
                    data: gout
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(&g, &x)| g * gelu_grad(x))
                        .collect(),
                };
                accumulate(*a, g);
            }
            Op::Softmax(a) => {
                let out = &node.value;
                let last = *out.shape.last().unwrap();
                let rows = out.data.len() / last;
                let mut g = Tensor::zeros(&out.shape);
                for r in 0..rows {
                    let s = &out.data[r * last..(r + 1) * last];
                    let go = &gout.data[r * last..(r + 1) * last];
                    let dot: f64 = s.iter().zip(go).map(|(&sv, &gv)| sv * gv).sum();
                    let dst = &mut g.data[r * last..(r + 1) * last];
                    for i in 0..last {
                        dst[i] = s[i] * (go[i] - dot);
                    }
                }
                accumulate(*a, g);
            }
            Op::LayerNorm { a, scale, shift } => {
                let av = &nodes[*a].value;
                let sc = &nodes[*scale].value;
                let last = *av.shape.last().unwrap();
                let rows = av.data.len() / last;
                let mut ga = Tensor::zeros(&av.shape);
                let mut gscale = Tensor::zeros(&sc.shape);
                let mut gshift = Tensor::zeros(&sc.shape);
                for r in 0..rows {
                    let x = &av.data[r * last..(r + 1) * last];
                    let go = &gout.data[r * last..(r + 1) * last];
                    let mean = x.iter().sum::<f64>() / last as f64;
                    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
                    let inv = 1.0 / math::sqrt(var + LN_EPS);
                    // xhat_i = (x_i - mean) * inv
                    let xhat: Vec<f64> = x.iter().map(|&v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = go.iter().zip(&sc.data).map(|(&g, &s)| g * s).collect();
                    let sum_gy: f64 = gy.iter().sum();
                    let sum_gy_xhat: f64 = gy.iter().zip(&xhat).map(|(&g, &h)| g * h).sum();
                    let dst = &mut ga.data[r * last..(r + 1) * last];
                    for i in 0..last {
                        dst[i] = inv
                            * (gy[i] - sum_gy / last as f64 - xhat[i] * sum_gy_xhat / last as f64);
                    }
                    for i in 0..last {
                        gscale.data[i] += go[i] * xhat[i];
                        gshift.data[i] += go[i];
                    }
                }
                accumulate(*a, ga);
                accumulate(*scale, gscale);
                accumulate(*shift, gshift);
            }
            Op::Embedding { table, indices } => {
                let tv = &nodes[*table].value;
                let d = tv.shape[1];
                let mut g = Tensor::zeros(&tv.shape);
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        g.data[i * d + j] += gout.data[row * d + j];
                    }
                }
                accumulate(*table, g);
            }
            Op::MaskedFill { a, mask } => {
                let g = Tensor {
                    shape: gout.shape.clone(),
                    data: gout
                        .data
                        .iter()
                        .zip(&mask.data)
                        .map(|(&g, &m)| if m != 0.0 { 0.0 } else { g })
                        .collect(),
                };
                accumulate(*a, g);
            }
            Op::Clamp { a, lo, hi } => {
                let av = &nodes[*a].value;
                let g = Tensor {
                    shape: av.shape.clone(),
                    data: gout
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(&g, &v)| if v > *lo && v < *hi { g } else { 0.0 })
                        .collect(),
                };
                accumulate(*a, g);
            }
        }
    }
    Gradients { grads }
}

/// Compare backward gradients against central finite differences for a
/// scalar-valued function of a list of parameter tensors. Two central
/// differences at step h and h/2 are Richardson-combined to cancel the
/// h^2 truncation term, which otherwise dominates on components whose
/// gradient is tiny relative to the third derivative. Returns the worst
/// relative error, with denominator max(|analytic|, |numeric|, 1e-6);
/// the floor keeps rounding noise on near-zero components from
/// registering as disagreement.
pub fn check_gradients<F>(f: F, params: &[Tensor], h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = f(&tape, &vars);
        let grads = backward(loss);
        vars.iter().map(|v| grads.of_or_zero(*v)).collect()
    };
    let mut worst = 0.0f64;
    let mut point = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = p.data[ci];
            let mut central = |step: f64| {
                point[pi].data[ci] = orig + step;
                let up = eval_scalar(&f, &point);
                point[pi].data[ci] = orig - step;
                let down = eval_scalar(&f, &point);
                (up - down) / (2.0 * step)
            };
            let coarse = central(h);
            let fine = central(h / 2.0);
            point[pi].data[ci] = orig;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let exact = analytic[pi].data[ci];
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    worst
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    f(&tape, &vars).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]));
        let s = v.softmax().value();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let tape = Tape::new();
        let logits = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 5.0, 5.0, -3.0]);
        let shifted = Tensor::new(&[2, 3], logits.data().iter().map(|v| v + 7.5).collect());
        let a = tape.constant(logits).softmax().value();
        let b = tape.constant(shifted).softmax().value();
        for r in 0..2 {
            let row_sum: f64 = a.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_shift() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[4], 3.7));
        let scale = tape.constant(Tensor::filled(&[4], 1.0));
        let shift = tape.constant(Tensor::filled(&[4], 0.0));
        let out = x.layer_norm(scale, shift).value();
        for v in out.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = a.matmul(b).value();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]), true);
        let loss = w.mul(w).sum_all();
        let grads = backward(loss);
        assert_eq!(grads.of(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn log_softmax_pick_gradient_identity() {
        // d/du log softmax(u)[k] = onehot(k) - softmax(u)
        let tape = Tape::new();
        let u = tape.leaf(Tensor::new(&[3], vec![0.2, -0.5, 1.3]), true);
        let s = u.softmax();
        let mask = tape.constant(Tensor::new(&[3], vec![0.0, 1.0, 0.0]));
        let loss = s.log().mul(mask).sum_all();
        let grads = backward(loss);
        let sv = s.value();
        let g = grads.of(u).unwrap();
        let expect = [-sv.data()[0], 1.0 - sv.data()[1], -sv.data()[2]];
        for (a, b) in g.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_over_loss_sum() {
        let w0 = Tensor::new(&[3], vec![0.5, -1.0, 2.0]);
        let run = |which: u8| -> Vec<f64> {
            let tape = Tape::new();
            let w = tape.leaf(w0.clone(), true);
            let l1 = w.mul(w).sum_all();
            let l2 = w.exp().sum_all();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => l1.add(l2),
            };
            backward(loss).of(w).unwrap().data().to_vec()
        };
        let (g1, g2, g12) = (run(0), run(1), run(2));
        for i in 0..3 {
            assert!((g12[i] - g1[i] - g2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(&[1, 2], vec![5.0, 6.0]));
        let c = a.concat(b, 0);
        assert_eq!(c.shape(), vec![3, 2]);
        let back = c.slice(0, 2, 1).value();
        assert_eq!(back.data(), &[5.0, 6.0]);
    }

    #[test]
    fn swap_batch_axis_round_trip() {
        let tape = Tape::new();
        let t = Tensor::new(&[2, 3, 2], (0..12).map(|v| v as f64).collect());
        let v = tape.constant(t.clone());
        let back = v.swap_batch_axis().swap_batch_axis().value();
        assert_eq!(back, t);
    }

    #[test]
    #[should_panic(expected = "add: shape mismatch")]
    fn add_shape_mismatch_panics() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let _ = a.add(b);
    }

    #[test]
    fn linear_function_checks_exactly() {
        let params = [Tensor::new(&[3], vec![0.1, 0.2, 0.3])];
        let err = check_gradients(|_tape, vars| vars[0].scale(2.5).sum_all(), &params, 1e-4);
        assert!(err <= 1e-9, "linear rel err {err}");
    }

    #[test]
    fn gelu_gradient_at_half() {
        let params = [Tensor::new(&[1], vec![0.5])];
        let err = check_gradients(|_t, vars| vars[0].gelu().sum_all(), &params, 1e-5);
        assert!(err <= 1e-6, "gelu rel err {err}");
    }
}
