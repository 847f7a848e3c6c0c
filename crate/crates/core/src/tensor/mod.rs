//! Minimal reverse-mode autodiff over `ndarray`.
//!
//! Every [`Tensor`] owns its value and remembers the op that produced it, so
//! a forward pass builds the computation graph implicitly. [`backward`] walks
//! the graph once in reverse creation order and returns gradients keyed by
//! node id. Graphs are built and differentiated on a single thread; batches
//! parallelize across independent per-image graphs.
//!
//! The op set is deliberately small: what a convolutional detector with a
//! transformer decoder actually needs, nothing else.

mod params;

pub use params::{GraphCtx, ParamId, ParamStore};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Scalar types the engine is instantiated with. Training runs in `f32`;
/// gradient checks instantiate the same code in `f64`.
pub trait Real:
    ndarray::NdFloat + num_traits::Float + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Geometry of a 2d convolution lowered to im2col.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op<F: Real> {
    Leaf { trainable: bool },
    Add(Tensor<F>, Tensor<F>),
    AddBiasRow(Tensor<F>, Tensor<F>),
    Sub(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Div(Tensor<F>, Tensor<F>),
    Minimum(Tensor<F>, Tensor<F>),
    Maximum(Tensor<F>, Tensor<F>),
    Scale(Tensor<F>, F),
    AddScalar(Tensor<F>),
    Abs(Tensor<F>),
    Relu(Tensor<F>),
    Silu(Tensor<F>),
    Sigmoid(Tensor<F>),
    Softplus(Tensor<F>),
    Matmul(Tensor<F>, Tensor<F>),
    Bmm(Tensor<F>, Tensor<F>),
    Permute(Tensor<F>, Vec<usize>),
    Reshape(Tensor<F>),
    Concat(Vec<Tensor<F>>, usize),
    Narrow {
        input: Tensor<F>,
        axis: usize,
        start: usize,
        len: usize,
    },
    IndexSelect(Tensor<F>, Vec<usize>),
    Im2col(Tensor<F>, ConvSpec),
    UpsampleNearest2(Tensor<F>),
    SumAll(Tensor<F>),
    LayerNorm {
        input: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        eps: F,
    },
    SoftmaxLast(Tensor<F>),
    BceWithLogits(Tensor<F>, Arc<ArrayD<F>>),
}

struct Node<F: Real> {
    id: u64,
    data: Arc<ArrayD<F>>,
    op: Op<F>,
}

/// A node in the autodiff graph. Cheap to clone.
#[derive(Clone)]
pub struct Tensor<F: Real>(Arc<Node<F>>);

/// Gradients of a scalar with respect to graph nodes, keyed by node id.
pub struct Grads<F: Real> {
    map: HashMap<u64, ArrayD<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&ArrayD<F>> {
        self.map.get(&t.id())
    }

    pub fn by_node_id(&self, id: u64) -> Option<&ArrayD<F>> {
        self.map.get(&id)
    }
}

impl<F: Real> Tensor<F> {
    fn from_op(data: ArrayD<F>, op: Op<F>) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            data: Arc::new(data),
            op,
        }))
    }

    /// Leaf that receives a gradient entry (model parameters).
    pub fn trainable(data: ArrayD<F>) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            data: Arc::new(data),
            op: Op::Leaf { trainable: true },
        }))
    }

    pub(crate) fn trainable_shared(data: Arc<ArrayD<F>>) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            data,
            op: Op::Leaf { trainable: true },
        }))
    }

    /// Leaf that never needs a gradient (inputs, targets, masks).
    pub fn constant(data: ArrayD<F>) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            data: Arc::new(data),
            op: Op::Leaf { trainable: false },
        }))
    }

    pub fn scalar(v: F) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> &ArrayD<F> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.data.iter().next().unwrap()
    }

    /// Cut the graph: same value, no gradient path.
    pub fn detach(&self) -> Tensor<F> {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            data: Arc::clone(&self.0.data),
            op: Op::Leaf { trainable: false },
        }))
    }

    fn same_shape(&self, other: &Tensor<F>, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        self.same_shape(other, "add");
        Tensor::from_op(&*self.0.data + &*other.0.data, Op::Add(self.clone(), other.clone()))
    }

    /// `x + b` where `b` broadcasts over the last axis of `x`.
    pub fn add_bias_row(&self, bias: &Tensor<F>) -> Tensor<F> {
        let d = *self.shape().last().expect("add_bias_row on 0-d tensor");
        assert_eq!(bias.shape(), [d], "bias must match last axis");
        let b = bias.0.data.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = (*self.0.data).clone();
        for mut row in out.rows_mut() {
            row += &b;
        }
        Tensor::from_op(out, Op::AddBiasRow(self.clone(), bias.clone()))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        self.same_shape(other, "sub");
        Tensor::from_op(&*self.0.data - &*other.0.data, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        self.same_shape(other, "mul");
        Tensor::from_op(&*self.0.data * &*other.0.data, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor<F>) -> Tensor<F> {
        self.same_shape(other, "div");
        Tensor::from_op(&*self.0.data / &*other.0.data, Op::Div(self.clone(), other.clone()))
    }

    pub fn minimum(&self, other: &Tensor<F>) -> Tensor<F> {
        self.same_shape(other, "minimum");
        let mut out = (*self.0.data).clone();
        out.zip_mut_with(&other.0.data, |a, &b| {
            if b < *a {
                *a = b;
            }
        });
        Tensor::from_op(out, Op::Minimum(self.clone(), other.clone()))
    }

    pub fn maximum(&self, other: &Tensor<F>) -> Tensor<F> {
        self.same_shape(other, "maximum");
        let mut out = (*self.0.data).clone();
        out.zip_mut_with(&other.0.data, |a, &b| {
            if b > *a {
                *a = b;
            }
        });
        Tensor::from_op(out, Op::Maximum(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        Tensor::from_op(self.0.data.mapv(|v| v * c), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-F::one())
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        Tensor::from_op(self.0.data.mapv(|v| v + c), Op::AddScalar(self.clone()))
    }

    pub fn abs(&self) -> Tensor<F> {
        Tensor::from_op(self.0.data.mapv(|v| v.abs()), Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Tensor<F> {
        let z = F::zero();
        Tensor::from_op(self.0.data.mapv(|v| if v > z { v } else { z }), Op::Relu(self.clone()))
    }

    pub fn silu(&self) -> Tensor<F> {
        Tensor::from_op(self.0.data.mapv(|v| v * sigmoid_scalar(v)), Op::Silu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        Tensor::from_op(self.0.data.mapv(sigmoid_scalar), Op::Sigmoid(self.clone()))
    }

    pub fn softplus(&self) -> Tensor<F> {
        Tensor::from_op(self.0.data.mapv(softplus_scalar), Op::Softplus(self.clone()))
    }

    /// `[M,K] x [K,N] -> [M,N]`
    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        let a = self.0.data.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
        let b = other.0.data.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dims");
        Tensor::from_op(a.dot(&b).into_dyn(), Op::Matmul(self.clone(), other.clone()))
    }

    /// Batched matmul `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&self, other: &Tensor<F>) -> Tensor<F> {
        let a = self.0.data.view().into_dimensionality::<Ix3>().expect("bmm lhs must be 3-d");
        let b = other.0.data.view().into_dimensionality::<Ix3>().expect("bmm rhs must be 3-d");
        let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bb, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!(ba, bb, "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = ndarray::Array3::<F>::zeros((ba, m, n));
        for i in 0..ba {
            let prod = a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        Tensor::from_op(out.into_dyn(), Op::Bmm(self.clone(), other.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor<F> {
        assert_eq!(perm.len(), self.shape().len(), "permute rank");
        let out = self
            .0
            .data
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        Tensor::from_op(out, Op::Permute(self.clone(), perm.to_vec()))
    }

    pub fn transpose2(&self) -> Tensor<F> {
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        let out = self
            .0
            .data
            .view()
            .into_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        Tensor::from_op(out, Op::Reshape(self.clone()))
    }

    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<ArrayViewD<F>> = parts.iter().map(|p| p.0.data.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        Tensor::from_op(out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<F> {
        let out = self
            .0
            .data
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(
            out,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
                len,
            },
        )
    }

    /// Gather rows along axis 0. Indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Tensor<F> {
        let rows: Vec<_> = indices
            .iter()
            .map(|&i| self.0.data.index_axis(Axis(0), i))
            .collect();
        let out = ndarray::stack(Axis(0), &rows).expect("index_select shapes");
        Tensor::from_op(out, Op::IndexSelect(self.clone(), indices.to_vec()))
    }

    /// Lower a `[C,H,W]` map to im2col patches `[OH*OW, C*k*k]`.
    pub fn im2col(&self, spec: ConvSpec) -> Tensor<F> {
        let x = self.0.data.view().into_dimensionality::<Ix3>().expect("im2col expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (spec.out_size(h), spec.out_size(w));
        let k = spec.kernel;
        let mut out = ndarray::Array2::<F>::zeros((oh * ow, c * k * k));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                let base_y = (oy * spec.stride) as isize - spec.pad as isize;
                let base_x = (ox * spec.stride) as isize - spec.pad as isize;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[[row, ci * k * k + ky * k + kx]] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        Tensor::from_op(out.into_dyn(), Op::Im2col(self.clone(), spec))
    }

    /// Nearest-neighbour 2x upsample of a `[C,H,W]` map.
    pub fn upsample_nearest2(&self) -> Tensor<F> {
        let x = self.0.data.view().into_dimensionality::<Ix3>().expect("upsample expects [C,H,W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = ndarray::Array3::<F>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[ci, y, xx]];
                    out[[ci, 2 * y, 2 * xx]] = v;
                    out[[ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        Tensor::from_op(out.into_dyn(), Op::UpsampleNearest2(self.clone()))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor<F> {
        let s = self.0.data.sum();
        Tensor::from_op(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = F::from_f64(self.len().max(1) as f64);
        self.sum().scale(F::one() / n)
    }

    /// Layer norm over the last axis with learned affine.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Tensor<F> {
        let d = *self.shape().last().expect("layer_norm on 0-d");
        assert_eq!(gamma.shape(), [d]);
        assert_eq!(beta.shape(), [d]);
        let g = gamma.0.data.view().into_dimensionality::<Ix1>().unwrap();
        let b = beta.0.data.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = (*self.0.data).clone();
        let dn = F::from_f64(d as f64);
        for mut row in out.rows_mut() {
            let mean = row.sum() / dn;
            let mut var = F::zero();
            for v in row.iter() {
                let c = *v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv = F::one() / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[i] + b[i];
            }
        }
        Tensor::from_op(
            out,
            Op::LayerNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<F> {
        let mut out = (*self.0.data).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Tensor::from_op(out, Op::SoftmaxLast(self.clone()))
    }

    /// Elementwise binary cross-entropy on logits against constant targets.
    /// Stable form `max(x,0) - x*t + ln(1+e^{-|x|})`.
    pub fn bce_with_logits(&self, targets: &ArrayD<F>) -> Tensor<F> {
        assert_eq!(self.shape(), targets.shape(), "bce target shape");
        let mut out = (*self.0.data).clone();
        out.zip_mut_with(targets, |x, &t| {
            let v = *x;
            *x = v.max(F::zero()) - v * t + (F::one() + (-v.abs()).exp()).ln();
        });
        Tensor::from_op(out, Op::BceWithLogits(self.clone(), Arc::new(targets.clone())))
    }
}

fn sigmoid_scalar<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn softplus_scalar<F: Real>(v: F) -> F {
    v.max(F::zero()) + (F::one() + (-v.abs()).exp()).ln()
}

/// Numerically-stable scalar logit (inverse sigmoid), clamping p away from {0,1}.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn accumulate<F: Real>(map: &mut HashMap<u64, ArrayD<F>>, id: u64, grad: ArrayD<F>) {
    match map.entry(id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            *e.get_mut() += &grad;
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(grad);
        }
    }
}

/// Reverse pass from a scalar loss. Returns gradients for every node that
/// participates, including non-trainable leaves (useful for input-sensitivity
/// checks).
pub fn backward<F: Real>(loss: &Tensor<F>) -> Grads<F> {
    assert_eq!(loss.len(), 1, "backward expects a scalar loss");

    // Collect the reachable graph; ids are monotone in creation order, so
    // descending id order is a valid reverse-topological order.
    let mut nodes: Vec<Tensor<F>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !seen.insert(t.id()) {
            continue;
        }
        for inp in op_inputs(&t.0.op) {
            stack.push(inp);
        }
        nodes.push(t);
    }
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut map: HashMap<u64, ArrayD<F>> = HashMap::new();
    map.insert(loss.id(), ArrayD::from_elem(IxDyn(&[1]), F::one()));

    for node in &nodes {
        let grad = match map.get(&node.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        backprop_one(node, &grad, &mut map);
    }

    Grads { map }
}

fn op_inputs<F: Real>(op: &Op<F>) -> Vec<Tensor<F>> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b)
        | Op::AddBiasRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Minimum(a, b)
        | Op::Maximum(a, b)
        | Op::Matmul(a, b)
        | Op::Bmm(a, b) => vec![a.clone(), b.clone()],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Abs(a)
        | Op::Relu(a)
        | Op::Silu(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Permute(a, _)
        | Op::Reshape(a)
        | Op::IndexSelect(a, _)
        | Op::Im2col(a, _)
        | Op::UpsampleNearest2(a)
        | Op::SumAll(a)
        | Op::SoftmaxLast(a)
        | Op::BceWithLogits(a, _) => vec![a.clone()],
        Op::Narrow { input, .. } => vec![input.clone()],
        Op::Concat(parts, _) => parts.clone(),
        Op::LayerNorm {
            input,
            gamma,
            beta,
            ..
        } => vec![input.clone(), gamma.clone(), beta.clone()],
    }
}

#[allow(clippy::too_many_lines)]
fn backprop_one<F: Real>(node: &Tensor<F>, grad: &ArrayD<F>, map: &mut HashMap<u64, ArrayD<F>>) {
    match &node.0.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            accumulate(map, a.id(), grad.clone());
            accumulate(map, b.id(), grad.clone());
        }
        Op::AddBiasRow(x, bias) => {
            accumulate(map, x.id(), grad.clone());
            let d = bias.len();
            let flat = grad.view().into_shape((grad.len() / d, d)).unwrap();
            accumulate(map, bias.id(), flat.sum_axis(Axis(0)).into_dyn());
        }
        Op::Sub(a, b) => {
            accumulate(map, a.id(), grad.clone());
            accumulate(map, b.id(), grad.mapv(|v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(map, a.id(), grad * &*b.0.data);
            accumulate(map, b.id(), grad * &*a.0.data);
        }
        Op::Div(a, b) => {
            accumulate(map, a.id(), grad / &*b.0.data);
            let gb = grad * &*a.0.data / (&*b.0.data * &*b.0.data);
            accumulate(map, b.id(), gb.mapv(|v| -v));
        }
        Op::Minimum(a, b) => {
            let mut ga = grad.clone();
            let mut gb = grad.clone();
            ndarray::Zip::from(&mut ga).and(&*a.0.data).and(&*b.0.data).for_each(
                |g, &av, &bv| {
                    if av > bv {
                        *g = F::zero();
                    }
                },
            );
            ndarray::Zip::from(&mut gb).and(&*a.0.data).and(&*b.0.data).for_each(
                |g, &av, &bv| {
                    if av <= bv {
                        *g = F::zero();
                    }
                },
            );
            accumulate(map, a.id(), ga);
            accumulate(map, b.id(), gb);
        }
        Op::Maximum(a, b) => {
            let mut ga = grad.clone();
            let mut gb = grad.clone();
            ndarray::Zip::from(&mut ga).and(&*a.0.data).and(&*b.0.data).for_each(
                |g, &av, &bv| {
                    if av < bv {
                        *g = F::zero();
                    }
                },
            );
            ndarray::Zip::from(&mut gb).and(&*a.0.data).and(&*b.0.data).for_each(
                |g, &av, &bv| {
                    if av >= bv {
                        *g = F::zero();
                    }
                },
            );
            accumulate(map, a.id(), ga);
            accumulate(map, b.id(), gb);
        }
        Op::Scale(a, c) => {
            accumulate(map, a.id(), grad.mapv(|v| v * *c));
        }
        Op::AddScalar(a) => {
            accumulate(map, a.id(), grad.clone());
        }
        Op::Abs(a) => {
            let mut g = grad.clone();
            ndarray::Zip::from(&mut g).and(&*a.0.data).for_each(|g, &v| {
                if v < F::zero() {
                    *g = -*g;
                } else if v == F::zero() {
                    *g = F::zero();
                }
            });
            accumulate(map, a.id(), g);
        }
        Op::Relu(a) => {
            let mut g = grad.clone();
            ndarray::Zip::from(&mut g).and(&*a.0.data).for_each(|g, &v| {
                if v <= F::zero() {
                    *g = F::zero();
                }
            });
            accumulate(map, a.id(), g);
        }
        Op::Silu(a) => {
            let mut g = grad.clone();
            ndarray::Zip::from(&mut g).and(&*a.0.data).for_each(|g, &v| {
                let s = sigmoid_scalar(v);
                *g = *g * (s + v * s * (F::one() - s));
            });
            accumulate(map, a.id(), g);
        }
        Op::Sigmoid(a) => {
            let mut g = grad.clone();
            ndarray::Zip::from(&mut g).and(&*node.0.data).for_each(|g, &y| {
                *g = *g * y * (F::one() - y);
            });
            accumulate(map, a.id(), g);
        }
        Op::Softplus(a) => {
            let mut g = grad.clone();
            ndarray::Zip::from(&mut g).and(&*a.0.data).for_each(|g, &v| {
                *g = *g * sigmoid_scalar(v);
            });
            accumulate(map, a.id(), g);
        }
        Op::Matmul(a, b) => {
            let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
            let av = a.0.data.view().into_dimensionality::<Ix2>().unwrap();
            let bv = b.0.data.view().into_dimensionality::<Ix2>().unwrap();
            accumulate(map, a.id(), g2.dot(&bv.t()).into_dyn());
            accumulate(map, b.id(), av.t().dot(&g2).into_dyn());
        }
        Op::Bmm(a, b) => {
            let g3 = grad.view().into_dimensionality::<Ix3>().unwrap();
            let av = a.0.data.view().into_dimensionality::<Ix3>().unwrap();
            let bv = b.0.data.view().into_dimensionality::<Ix3>().unwrap();
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            let mut ga = ndarray::Array3::<F>::zeros((bs, m, k));
            let mut gb = ndarray::Array3::<F>::zeros((bs, k, n));
            for i in 0..bs {
                let gi = g3.index_axis(Axis(0), i);
                ga.index_axis_mut(Axis(0), i)
                    .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                gb.index_axis_mut(Axis(0), i)
                    .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
            }
            accumulate(map, a.id(), ga.into_dyn());
            accumulate(map, b.id(), gb.into_dyn());
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let g = grad
                .view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned();
            accumulate(map, a.id(), g);
        }
        Op::Reshape(a) => {
            let g = grad.view().into_shape(IxDyn(a.shape())).unwrap().to_owned();
            accumulate(map, a.id(), g);
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0usize;
            for p in parts {
                let len = p.shape()[*axis];
                let g = grad
                    .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                    .to_owned();
                accumulate(map, p.id(), g);
                offset += len;
            }
        }
        Op::Narrow {
            input,
            axis,
            start,
            len,
        } => {
            let mut g = ArrayD::<F>::zeros(IxDyn(input.shape()));
            g.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + *len))
                .assign(grad);
            accumulate(map, input.id(), g);
        }
        Op::IndexSelect(a, indices) => {
            let mut g = ArrayD::<F>::zeros(IxDyn(a.shape()));
            for (k, &i) in indices.iter().enumerate() {
                let mut dst = g.index_axis_mut(Axis(0), i);
                dst += &grad.index_axis(Axis(0), k);
            }
            accumulate(map, a.id(), g);
        }
        Op::Im2col(a, spec) => {
            let shp = a.shape();
            let (c, h, w) = (shp[0], shp[1], shp[2]);
            let (oh, ow) = (spec.out_size(h), spec.out_size(w));
            let k = spec.kernel;
            let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = ndarray::Array3::<F>::zeros((c, h, w));
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = oy * ow + ox;
                    let base_y = (oy * spec.stride) as isize - spec.pad as isize;
                    let base_x = (ox * spec.stride) as isize - spec.pad as isize;
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[[ci, iy as usize, ix as usize]] =
                                    gx[[ci, iy as usize, ix as usize]]
                                        + g2[[row, ci * k * k + ky * k + kx]];
                            }
                        }
                    }
                }
            }
            accumulate(map, a.id(), gx.into_dyn());
        }
        Op::UpsampleNearest2(a) => {
            let shp = a.shape();
            let (c, h, w) = (shp[0], shp[1], shp[2]);
            let g3 = grad.view().into_dimensionality::<Ix3>().unwrap();
            let mut gx = ndarray::Array3::<F>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[[ci, y, xx]] = g3[[ci, 2 * y, 2 * xx]]
                            + g3[[ci, 2 * y, 2 * xx + 1]]
                            + g3[[ci, 2 * y + 1, 2 * xx]]
                            + g3[[ci, 2 * y + 1, 2 * xx + 1]];
                    }
                }
            }
            accumulate(map, a.id(), gx.into_dyn());
        }
        Op::SumAll(a) => {
            let g0 = grad[[0]];
            accumulate(map, a.id(), ArrayD::from_elem(IxDyn(a.shape()), g0));
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            eps,
        } => {
            let d = *input.shape().last().unwrap();
            let dn = F::from_f64(d as f64);
            let rows = input.len() / d;
            let x = input.0.data.view().into_shape((rows, d)).unwrap();
            let g2 = grad.view().into_shape((rows, d)).unwrap();
            let gam = gamma.0.data.view().into_dimensionality::<Ix1>().unwrap();
            let mut gx = ndarray::Array2::<F>::zeros((rows, d));
            let mut ggamma = ndarray::Array1::<F>::zeros(d);
            let mut gbeta = ndarray::Array1::<F>::zeros(d);
            for r in 0..rows {
                let xr = x.row(r);
                let gr = g2.row(r);
                let mean = xr.sum() / dn;
                let mut var = F::zero();
                for v in xr.iter() {
                    let c = *v - mean;
                    var = var + c * c;
                }
                var = var / dn;
                let inv = F::one() / (var + *eps).sqrt();
                // dxhat, and the two row means needed by the standard formula
                let mut mean_dxhat = F::zero();
                let mut mean_dxhat_xhat = F::zero();
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for i in 0..d {
                    xhat[i] = (xr[i] - mean) * inv;
                    dxhat[i] = gr[i] * gam[i];
                    mean_dxhat = mean_dxhat + dxhat[i];
                    mean_dxhat_xhat = mean_dxhat_xhat + dxhat[i] * xhat[i];
                    ggamma[i] = ggamma[i] + gr[i] * xhat[i];
                    gbeta[i] = gbeta[i] + gr[i];
                }
                mean_dxhat = mean_dxhat / dn;
                mean_dxhat_xhat = mean_dxhat_xhat / dn;
                for i in 0..d {
                    gx[[r, i]] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                }
            }
            accumulate(
                map,
                input.id(),
                gx.into_shape(IxDyn(input.shape())).unwrap(),
            );
            accumulate(map, gamma.id(), ggamma.into_dyn());
            accumulate(map, beta.id(), gbeta.into_dyn());
        }
        Op::SoftmaxLast(a) => {
            let d = *node.shape().last().unwrap();
            let rows = node.len() / d;
            let y = node.0.data.view().into_shape((rows, d)).unwrap();
            let g2 = grad.view().into_shape((rows, d)).unwrap();
            let mut gx = ndarray::Array2::<F>::zeros((rows, d));
            for r in 0..rows {
                let yr = y.row(r);
                let gr = g2.row(r);
                let dot = yr.iter().zip(gr.iter()).fold(F::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                for i in 0..d {
                    gx[[r, i]] = yr[i] * (gr[i] - dot);
                }
            }
            accumulate(map, a.id(), gx.into_shape(IxDyn(a.shape())).unwrap());
        }
        Op::BceWithLogits(a, targets) => {
            let mut g = grad.clone();
            ndarray::Zip::from(&mut g)
                .and(&*a.0.data)
                .and(&**targets)
                .for_each(|g, &x, &t| {
                    *g = *g * (sigmoid_scalar(x) - t);
                });
            accumulate(map, a.id(), g);
        }
    }
}

pub(crate) fn is_trainable<F: Real>(t: &Tensor<F>) -> bool {
    matches!(t.0.op, Op::Leaf { trainable: true })
}

#[cfg(test)]
mod tests;
