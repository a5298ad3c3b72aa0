//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its value and
//! the handles of its inputs. Nodes are only ever appended, so the list is in
//! topological order by construction and `backward` is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the output value and the gradient
/// flowing into the output, and returns one gradient buffer per input (`None`
/// for inputs it does not differentiate).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Zero padding and stride of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub padding: (usize, usize),
    pub stride: (usize, usize),
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    LeakyRelu(usize, f64),
    Powf(usize, f64),
    ClampMin(usize, f64),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    Sum { input: usize, axis: usize },
    SumAll(usize),
    Broadcast(usize),
    Softmax(usize),
    Conv2d { input: usize, weight: usize, bias: usize, geometry: ConvGeometry },
    Custom(Vec<usize>, Arc<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer recording of one forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf; `None` for non-leaves.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var).expect("gradient requested for a non-leaf variable")
    }
}

// Row-major strides helper.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

// (outer, extent, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// For each output element, the flat index of the broadcast source element.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = dst.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(flat);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < dst[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, g: ConvGeometry) -> Option<(usize, usize)> {
    let hp = h + 2 * g.padding.0;
    let wp = w + 2 * g.padding.1;
    if hp < kh || wp < kw || g.stride.0 == 0 || g.stride.1 == 0 {
        return None;
    }
    Some(((hp - kh) / g.stride.0 + 1, (wp - kw) / g.stride.1 + 1))
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeometry,
}

impl ConvDims {
    // Patch matrix of shape (cin·kh·kw) × (ho·wo).
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.ho * self.wo;
        let mut out = vec![0.0; self.cin * self.kh * self.kw * cols];
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oh in 0..self.ho {
                        let ih = (oh * self.g.stride.0 + i) as isize - self.g.padding.0 as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.g.stride.1 + j) as isize - self.g.padding.1 as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[oh * self.wo + ow] = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols_data: &[f64]) -> Vec<f64> {
        let cols = self.ho * self.wo;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oh in 0..self.ho {
                        let ih = (oh * self.g.stride.0 + i) as isize - self.g.padding.0 as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.g.stride.1 + j) as isize - self.g.padding.1 as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; outstanding handles become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, &[sa, sb]));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var {
        let ai = self.idx(a);
        let value = self.nodes[ai].value.map(f);
        self.push(value, op(ai), &[ai])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.same_shape(name, ai, bi)?;
        let va = &self.nodes[ai].value;
        let vb = &self.nodes[bi].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(value, op, &[ai, bi]))
    }

    /// Matrix product of an m×k and a k×n matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", &[va.shape(), vb.shape()]));
        }
        let (m, k) = va.dims2();
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm::matmul_into(m, k, n, va.data(), gemm::Layout::Normal, vb.data(), gemm::Layout::Normal, &mut out, 0.0);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.binary("add", a, b, |x, y| x + y, Op::Add(ai, bi))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(ai, bi))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(ai, bi))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, |ai| Op::Scale(ai, factor))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, |x| x + offset, Op::Offset)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Natural logarithm; the caller keeps arguments positive.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x >= 0.0 { x } else { slope * x }, |ai| Op::LeakyRelu(ai, slope))
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        self.unary(a, |x| x.powf(exponent), |ai| Op::Powf(ai, exponent))
    }

    /// `max(x, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), |ai| Op::ClampMin(ai, floor))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let Some(&first) = idx.first() else {
            return Err(Error::shape("concat", &[]));
        };
        let base = self.nodes[first].value.shape().to_vec();
        let shapes: Vec<&[usize]> = idx.iter().map(|&i| self.nodes[i].value.shape()).collect();
        let compatible = axis < base.len()
            && shapes.iter().all(|s| {
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y)
            });
        if !compatible {
            return Err(Error::shape("concat", &shapes));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(idx.clone(), axis), &idx))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ai = self.idx(a);
        let v = &self.nodes[ai].value;
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::InvalidInput(format!(
                "slice: range {start}..{} on axis {axis} of shape {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, extent, inner) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { input: ai, axis, start }, &[ai]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a);
        let v = &self.nodes[ai].value;
        if v.rank() != 2 {
            return Err(Error::shape("transpose", &[v.shape()]));
        }
        let (r, c) = v.dims2();
        let src = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(ai), &[ai]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a);
        let value = self.nodes[ai].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(ai), &[ai]))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.idx(a);
        let v = &self.nodes[ai].value;
        if axis >= v.rank() {
            return Err(Error::shape("reduce-sum", &[v.shape()]));
        }
        let (outer, extent, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = &src[(o * extent + e) * inner..][..inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sum { input: ai, axis }, &[ai]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let extent = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / extent as f64))
    }

    /// Sum of every element as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let total = self.nodes[ai].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(ai), &[ai])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Expands extent-1 axes to `shape`; ranks must already agree.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a);
        let v = &self.nodes[ai].value;
        let ok = v.rank() == shape.len()
            && v.shape().iter().zip(shape).all(|(&s, &d)| s == d || (s == 1 && d > 0));
        if !ok {
            return Err(Error::shape("broadcast", &[v.shape(), shape]));
        }
        let map = broadcast_map(v.shape(), shape);
        let src = v.data();
        let out = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Broadcast(ai), &[ai]))
    }

    /// Max-shifted softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let v = &self.nodes[ai].value;
        let width = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(value, Op::Softmax(ai), &[ai])
    }

    /// Cross-correlation of a C_in×H×W input with a C_out×C_in×kh×kw kernel
    /// bank plus a per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geometry: ConvGeometry) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x), self.idx(weight), self.idx(bias));
        let (vx, vw, vb) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        let bad = || Error::shape("conv2d", &[vx.shape(), vw.shape(), vb.shape()]);
        if vx.rank() != 3 || vw.rank() != 4 || vw.shape()[1] != vx.shape()[0] || vb.shape() != [vw.shape()[0]] {
            return Err(bad());
        }
        let dims = self.conv_dims(xi, wi, geometry).ok_or_else(bad)?;
        let cout = vw.shape()[0];
        let cols = dims.im2col(vx.data());
        let n = dims.ho * dims.wo;
        let kdim = dims.cin * dims.kh * dims.kw;
        let mut out = Vec::with_capacity(cout * n);
        for &b in vb.data() {
            out.extend(std::iter::repeat(b).take(n));
        }
        gemm::matmul_into(cout, kdim, n, vw.data(), gemm::Layout::Normal, &cols, gemm::Layout::Normal, &mut out, 1.0);
        let value = Tensor::from_parts(vec![cout, dims.ho, dims.wo], out);
        Ok(self.push(value, Op::Conv2d { input: xi, weight: wi, bias: bi, geometry }, &[xi, wi, bi]))
    }

    fn conv_dims(&self, xi: usize, wi: usize, g: ConvGeometry) -> Option<ConvDims> {
        let (sx, sw) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        let (ho, wo) = conv_out_dims(sx[1], sx[2], sw[2], sw[3], g)?;
        Some(ConvDims {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            kh: sw[2],
            kw: sw[3],
            ho,
            wo,
            g,
        })
    }

    /// Records an externally defined differentiable operation whose forward
    /// value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Arc<dyn CustomOp>) -> Var {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect();
        self.push(value, Op::Custom(idx.clone(), op), &idx)
    }

    /// Reverse sweep from a one-element root.
    ///
    /// Leaves unreachable from the root receive zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.tape != self.id || root.index >= self.nodes.len() {
            return Err(Error::Backward("root is not recorded on this tape".into()));
        }
        let rv = &self.nodes[root.index].value;
        if !rv.is_scalar() {
            return Err(Error::Backward(format!("root must be scalar, got shape {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        if self.nodes[root.index].requires_grad {
            grads[root.index] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..=root.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves[i] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            for (parent, contribution) in self.local_backward(node, &g) {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate().skip(root.index + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn local_backward(&self, node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let y = node.value.data();
        let elementwise = |a: usize, d: &dyn Fn(f64, f64) -> f64| {
            let x = self.val(a).data();
            vec![(a, g.iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| g * d(x, y)).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k) = va.dims2();
                let n = vb.shape()[1];
                let mut out = Vec::new();
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm::matmul_into(m, n, k, g, gemm::Layout::Normal, vb.data(), gemm::Layout::Transposed, &mut ga, 0.0);
                    out.push((a, ga));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm::matmul_into(k, m, n, va.data(), gemm::Layout::Transposed, g, gemm::Layout::Normal, &mut gb, 0.0);
                    out.push((b, gb));
                }
                out
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                vec![
                    (a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            &Op::Scale(a, f) => vec![(a, g.iter().map(|v| v * f).collect())],
            &Op::Offset(a) => vec![(a, g.to_vec())],
            &Op::Tanh(a) => elementwise(a, &|_, y| 1.0 - y * y),
            &Op::Sigmoid(a) => elementwise(a, &|_, y| y * (1.0 - y)),
            &Op::Exp(a) => elementwise(a, &|_, y| y),
            &Op::Log(a) => elementwise(a, &|x, _| 1.0 / x),
            &Op::LeakyRelu(a, slope) => elementwise(a, &|x, _| if x >= 0.0 { 1.0 } else { slope }),
            &Op::Powf(a, p) => elementwise(a, &|x, _| p * x.powf(p - 1.0)),
            &Op::ClampMin(a, floor) => elementwise(a, &|x, _| if x >= floor { 1.0 } else { 0.0 }),
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let extent = self.val(p).shape()[*axis];
                    let mut gp = Vec::with_capacity(outer * extent * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + extent * inner]);
                    }
                    offset += extent;
                    out.push((p, gp));
                }
                out
            }
            &Op::Slice { input, axis, start } => {
                let src_shape = self.val(input).shape();
                let (outer, extent, inner) = split_axis(src_shape, axis);
                let len = node.value.shape()[axis];
                let mut gi = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(input, gi)]
            }
            &Op::Transpose(a) => {
                let (r, c) = self.val(a).dims2();
                let mut gi = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gi[i * c + j] = g[j * r + i];
                    }
                }
                vec![(a, gi)]
            }
            &Op::Reshape(a) => vec![(a, g.to_vec())],
            &Op::Sum { input, axis } => {
                let (outer, extent, inner) = split_axis(self.val(input).shape(), axis);
                let mut gi = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    for _ in 0..extent {
                        gi.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(input, gi)]
            }
            &Op::SumAll(a) => vec![(a, vec![g[0]; self.val(a).len()])],
            &Op::Broadcast(a) => {
                let src = self.val(a);
                let map = broadcast_map(src.shape(), node.value.shape());
                let mut gi = vec![0.0; src.len()];
                for (&i, &gv) in map.iter().zip(g) {
                    gi[i] += gv;
                }
                vec![(a, gi)]
            }
            &Op::Softmax(a) => {
                let width = *node.value.shape().last().unwrap();
                let mut gi = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(width).zip(y.chunks(width)).zip(gi.chunks_mut(width)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, &g), &y) in out.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                vec![(a, gi)]
            }
            &Op::Conv2d { input, weight, bias, geometry } => {
                let dims = self.conv_dims(input, weight, geometry).expect("validated in forward");
                let vw = self.val(weight);
                let cout = vw.shape()[0];
                let n = dims.ho * dims.wo;
                let kdim = dims.cin * dims.kh * dims.kw;
                let mut out = Vec::new();
                if self.needs(weight) {
                    let cols = dims.im2col(self.val(input).data());
                    let mut gw = vec![0.0; cout * kdim];
                    gemm::matmul_into(cout, n, kdim, g, gemm::Layout::Normal, &cols, gemm::Layout::Transposed, &mut gw, 0.0);
                    out.push((weight, gw));
                }
                if self.needs(bias) {
                    out.push((bias, g.chunks(n).map(|row| row.iter().sum()).collect()));
                }
                if self.needs(input) {
                    let mut gcols = vec![0.0; kdim * n];
                    gemm::matmul_into(kdim, cout, n, vw.data(), gemm::Layout::Transposed, g, gemm::Layout::Normal, &mut gcols, 0.0);
                    out.push((input, dims.col2im(&gcols)));
                }
                out
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.val(i)).collect();
                let contributions = op.backward(&values, &node.value, g);
                debug_assert_eq!(contributions.len(), inputs.len(), "{} backward arity", op.name());
                inputs
                    .iter()
                    .zip(contributions)
                    .filter_map(|(&i, c)| c.map(|c| (i, c)))
                    .collect()
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
