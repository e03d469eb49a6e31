//! Reverse-mode automatic differentiation over `f64` ndarray tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation computes its value
//! eagerly and records a node. [`Graph::backward`] walks the tape in reverse
//! creation order (which is a topological order, since parents always precede
//! children) and accumulates gradients into the leaf nodes.
//!
//! Tensor layout conventions used throughout the crate:
//! - images / feature maps: `(N, C, H, W)`
//! - flow fields: `(N, 2, H, W)` with channel 0 = horizontal offset (pixels),
//!   channel 1 = vertical offset
//! - correlation matrices: `(N, S, T)`, `S` source positions, `T` target
//!   positions; every target column sums to one over the source axis
//! - combination maps: `(N, 1, H, W)`
//! - scalars: zero-dimensional arrays
//!
//! Determinism: all kernels are deterministic; parallel sections write to
//! disjoint output slices and reductions are folded in a fixed order, so the
//! same inputs produce bitwise-identical outputs.

mod conv;
mod kernels;
mod spatial;

pub mod gradcheck;

use ndarray::{arr0, ArrayD, Axis, IxDyn};
use std::sync::Arc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Border handling for bilinear sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    /// Clamp sampling positions to the image edge.
    #[default]
    Clamp,
    /// Treat out-of-bounds taps as zero.
    Zeros,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Abs,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Sqrt,
    ClampMin(f64),
    Sum,
    Mean,
    SumAxis(usize),
    AddChannels,
    MulChannels,
    ScaleChannels(Arc<Vec<f64>>),
    Concat(usize),
    SliceHw { r0: usize, c0: usize },
    Reshape,
    Unfold(usize),
    GatherLast(Arc<Vec<usize>>),
    MatmulB { ta: bool, tb: bool },
    Inv3,
    SoftmaxCols { alpha: f64 },
    Conv2d { stride: usize, pad: usize },
    Resize,
    FlowWarp(Border),
    Blend,
    InstanceNorm { eps: f64 },
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<Var>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to the graph's leaf nodes.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if `v` is a gradient-tracking leaf reached by backprop.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a zero-dimensional node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar() on non-scalar node");
        val[IxDyn(&[])]
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<Var>, op: Op) -> Var {
        let needs_grad = match op {
            Op::Leaf => false, // set by leaf()
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. Gradients are accumulated for it iff `needs_grad`.
    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> Var {
        let v = self.push(value, Vec::new(), Op::Leaf);
        self.nodes[v.0].needs_grad = needs_grad;
        v
    }

    /// Leaf that does not track gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that tracks gradients.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `v`'s value as a fresh non-tracking leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_same_shape(&mut self, a: Var, b: Var, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "shape mismatch in binary op");
        let value = kernels::binary_forward(va, vb, &op);
        self.push(value, vec![a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Div)
    }

    fn unary(&mut self, x: Var, op: Op) -> Var {
        let value = kernels::unary_forward(&self.nodes[x.0].value, &op);
        self.push(value, vec![x], op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(s))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(c))
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(slope))
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt)
    }
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::ClampMin(c))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = arr0(self.nodes[x.0].value.sum()).into_dyn();
        self.push(value, vec![x], Op::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let value = arr0(v.sum() / v.len() as f64).into_dyn();
        self.push(value, vec![x], Op::Mean)
    }

    /// Sum along `axis`, keeping it as a length-1 axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.nodes[x.0].value.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(value, vec![x], Op::SumAxis(axis))
    }

    // ---- channel (axis 1) helpers ----------------------------------------

    /// `x + b` with `b` of shape `(C,)` broadcast over all other axes of `x`.
    pub fn add_channels(&mut self, x: Var, b: Var) -> Var {
        let value = kernels::channels_forward(&self.nodes[x.0].value, &self.nodes[b.0].value, false);
        self.push(value, vec![x, b], Op::AddChannels)
    }

    /// `x * s` with `s` of shape `(C,)` broadcast over all other axes of `x`.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Var {
        let value = kernels::channels_forward(&self.nodes[x.0].value, &self.nodes[s.0].value, true);
        self.push(value, vec![x, s], Op::MulChannels)
    }

    /// Multiply channel `c` of `x` by the fixed factor `factors[c]`.
    pub fn scale_channels(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let f = Arc::new(factors);
        let value = kernels::scale_channels_forward(&self.nodes[x.0].value, &f);
        self.push(value, vec![x], Op::ScaleChannels(f))
    }

    // ---- structure --------------------------------------------------------

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(value.as_standard_layout().to_owned(), parts.to_vec(), Op::Concat(axis))
    }

    /// Crop the spatial window `[r0, r0+h) x [c0, c0+w)` of an `(N, C, H, W)` tensor.
    pub fn slice_hw(&mut self, x: Var, r0: usize, c0: usize, h: usize, w: usize) -> Var {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.ndim(), 4);
        let value = v
            .slice(ndarray::s![.., .., r0..r0 + h, c0..c0 + w])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(value, vec![x], Op::SliceHw { r0, c0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(value, vec![x], Op::Reshape)
    }

    /// Extract all valid `n x n` patches of an `(N, C, H, W)` tensor as
    /// `(N, L, C, n*n)` with `L = (H-n+1)*(W-n+1)`, stride 1, row-major patch order.
    pub fn unfold(&mut self, x: Var, n: usize) -> Var {
        let value = spatial::unfold_forward(&self.nodes[x.0].value, n);
        self.push(value, vec![x], Op::Unfold(n))
    }

    /// Gather along the last axis of `(N, C, S)`: `y[n, c, j] = x[n, c, idx[n*T + j]]`.
    pub fn gather_last(&mut self, x: Var, idx: Vec<usize>, t: usize) -> Var {
        let idx = Arc::new(idx);
        let value = spatial::gather_last_forward(&self.nodes[x.0].value, &idx, t);
        self.push(value, vec![x], Op::GatherLast(idx))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product over matching leading axes: `(B.., m, k) x (B.., k, n)`.
    pub fn matmul_b(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value =
            kernels::matmul_b_forward(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb);
        self.push(value, vec![a, b], Op::MatmulB { ta, tb })
    }

    /// Batched inverse of trailing `3 x 3` matrices.
    pub fn inv3(&mut self, x: Var) -> Var {
        let value = kernels::inv3_forward(&self.nodes[x.0].value);
        self.push(value, vec![x], Op::Inv3)
    }

    /// Column softmax of `(N, S, T)` over the source axis `S`, with sharpness
    /// `alpha` and per-column max subtraction.
    pub fn softmax_cols(&mut self, x: Var, alpha: f64) -> Var {
        let value = kernels::softmax_cols_forward(&self.nodes[x.0].value, alpha);
        self.push(value, vec![x], Op::SoftmaxCols { alpha })
    }

    // ---- convolution / spatial ---------------------------------------------

    /// 2-D convolution: `x (N, Cin, H, W)`, `w (Cout, Cin, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = conv::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        self.push(value, vec![x, w], Op::Conv2d { stride, pad })
    }

    /// Bilinear resize of `(N, C, H, W)` to `(N, C, h, w)`.
    ///
    /// Convention: pixel centers sit at integer coordinates and the grids of
    /// the two resolutions are aligned at the image boundary (half-pixel
    /// mapping `src = (dst + 0.5) * size_ratio - 0.5`), with clamp-to-edge for
    /// taps outside the source. Resizing to the same size is the identity, and
    /// an exact 2x downsize averages each 2x2 block.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = spatial::resize_forward(&self.nodes[x.0].value, h, w);
        self.push(value, vec![x], Op::Resize)
    }

    /// Bilinear flow warp: output at `(r, c)` samples `x` at
    /// `(r + w_vertical, c + w_horizontal)`.
    pub fn flow_warp(&mut self, x: Var, w: Var, border: Border) -> Var {
        let value = spatial::flow_warp_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, border);
        self.push(value, vec![x, w], Op::FlowWarp(border))
    }

    /// Convex blend `m * a + (1 - m) * f` with `m (N, 1, H, W)` broadcast over channels.
    pub fn blend(&mut self, a: Var, f: Var, m: Var) -> Var {
        let value = spatial::blend_forward(
            &self.nodes[a.0].value,
            &self.nodes[f.0].value,
            &self.nodes[m.0].value,
        );
        self.push(value, vec![a, f, m], Op::Blend)
    }

    /// Instance normalization over the spatial axes of `(N, C, H, W)`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let value = spatial::instance_norm_forward(&self.nodes[x.0].value, eps);
        self.push(value, vec![x], Op::InstanceNorm { eps })
    }

    // ---- composites ---------------------------------------------------------

    /// Mean absolute difference of two same-shape tensors.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    // ---- backward -------------------------------------------------------------

    /// Backpropagate from the scalar `root`. Returns gradients for all
    /// gradient-tracking leaves; interior gradients are freed as soon as they
    /// have been consumed.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.ndim(), 0, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(arr0(1.0).into_dyn());

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        // Keep only leaf gradients.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[i];
        let parents = &node.parents;
        let pv = |k: usize| &self.nodes[parents[k].0].value;
        let need = |k: usize| self.nodes[parents[k].0].needs_grad;

        let mut contribs: Vec<(usize, ArrayD<f64>)> = Vec::with_capacity(parents.len());
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if need(0) {
                    contribs.push((0, g.clone()));
                }
                if need(1) {
                    contribs.push((1, g.clone()));
                }
            }
            Op::Sub => {
                if need(0) {
                    contribs.push((0, g.clone()));
                }
                if need(1) {
                    contribs.push((1, -g));
                }
            }
            Op::Mul => {
                if need(0) {
                    contribs.push((0, g * pv(1)));
                }
                if need(1) {
                    contribs.push((1, g * pv(0)));
                }
            }
            Op::Div => {
                let b = pv(1);
                if need(0) {
                    contribs.push((0, g / b));
                }
                if need(1) {
                    let mut d = g * &node.value;
                    d.zip_mut_with(b, |x, &bb| *x = -*x / bb);
                    contribs.push((1, d));
                }
            }
            op @ (Op::Neg
            | Op::Scale(_)
            | Op::AddScalar(_)
            | Op::Abs
            | Op::Relu
            | Op::LeakyRelu(_)
            | Op::Sigmoid
            | Op::Tanh
            | Op::Exp
            | Op::Sqrt
            | Op::ClampMin(_)) => {
                if need(0) {
                    contribs.push((0, kernels::unary_backward(pv(0), &node.value, g, op)));
                }
            }
            Op::Sum => {
                if need(0) {
                    let s = g[IxDyn(&[])];
                    contribs.push((0, ArrayD::from_elem(pv(0).raw_dim(), s)));
                }
            }
            Op::Mean => {
                if need(0) {
                    let s = g[IxDyn(&[])] / pv(0).len() as f64;
                    contribs.push((0, ArrayD::from_elem(pv(0).raw_dim(), s)));
                }
            }
            Op::SumAxis(axis) => {
                if need(0) {
                    let d = g.broadcast(pv(0).raw_dim()).expect("sum_axis backward broadcast");
                    let _ = axis;
                    contribs.push((0, d.to_owned()));
                }
            }
            Op::AddChannels => {
                if need(0) {
                    contribs.push((0, g.clone()));
                }
                if need(1) {
                    contribs.push((1, kernels::reduce_to_channels(g)));
                }
            }
            Op::MulChannels => {
                if need(0) {
                    contribs.push((0, kernels::channels_forward(g, pv(1), true)));
                }
                if need(1) {
                    let gx = g * pv(0);
                    contribs.push((1, kernels::reduce_to_channels(&gx)));
                }
            }
            Op::ScaleChannels(f) => {
                if need(0) {
                    contribs.push((0, kernels::scale_channels_forward(g, f)));
                }
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                for (k, p) in parents.iter().enumerate() {
                    let extent = self.nodes[p.0].value.shape()[*axis];
                    if need(k) {
                        let mut idx: Vec<ndarray::SliceInfoElem> = self.nodes[p.0]
                            .value
                            .shape()
                            .iter()
                            .map(|_| ndarray::SliceInfoElem::from(..))
                            .collect();
                        idx[*axis] = (offset..offset + extent).into();
                        let part = g.slice(idx.as_slice()).to_owned();
                        contribs.push((k, part));
                    }
                    offset += extent;
                }
            }
            Op::SliceHw { r0, c0 } => {
                if need(0) {
                    let mut dx = ArrayD::zeros(pv(0).raw_dim());
                    let gs = g.shape();
                    dx.slice_mut(ndarray::s![.., .., *r0..r0 + gs[2], *c0..c0 + gs[3]])
                        .assign(&g.view().into_dimensionality::<ndarray::Ix4>().unwrap());
                    contribs.push((0, dx));
                }
            }
            Op::Reshape => {
                if need(0) {
                    let d = g
                        .clone()
                        .into_shape_with_order(pv(0).raw_dim())
                        .expect("reshape backward");
                    contribs.push((0, d));
                }
            }
            Op::Unfold(n) => {
                if need(0) {
                    contribs.push((0, spatial::unfold_backward(pv(0), g, *n)));
                }
            }
            Op::GatherLast(idx) => {
                if need(0) {
                    contribs.push((0, spatial::gather_last_backward(pv(0), g, idx)));
                }
            }
            Op::MatmulB { ta, tb } => {
                let (da, db) =
                    kernels::matmul_b_backward(pv(0), pv(1), g, *ta, *tb, need(0), need(1));
                if let Some(da) = da {
                    contribs.push((0, da));
                }
                if let Some(db) = db {
                    contribs.push((1, db));
                }
            }
            Op::Inv3 => {
                if need(0) {
                    contribs.push((0, kernels::inv3_backward(&node.value, g)));
                }
            }
            Op::SoftmaxCols { alpha } => {
                if need(0) {
                    contribs.push((0, kernels::softmax_cols_backward(&node.value, g, *alpha)));
                }
            }
            Op::Conv2d { stride, pad } => {
                let (dx, dw) =
                    conv::conv2d_backward(pv(0), pv(1), g, *stride, *pad, need(0), need(1));
                if let Some(dx) = dx {
                    contribs.push((0, dx));
                }
                if let Some(dw) = dw {
                    contribs.push((1, dw));
                }
            }
            Op::Resize => {
                if need(0) {
                    contribs.push((0, spatial::resize_backward(pv(0), g)));
                }
            }
            Op::FlowWarp(border) => {
                let (dx, dw) =
                    spatial::flow_warp_backward(pv(0), pv(1), g, *border, need(0), need(1));
                if let Some(dx) = dx {
                    contribs.push((0, dx));
                }
                if let Some(dw) = dw {
                    contribs.push((1, dw));
                }
            }
            Op::Blend => {
                let (da, df, dm) =
                    spatial::blend_backward(pv(0), pv(1), pv(2), g, need(0), need(1), need(2));
                if let Some(da) = da {
                    contribs.push((0, da));
                }
                if let Some(df) = df {
                    contribs.push((1, df));
                }
                if let Some(dm) = dm {
                    contribs.push((2, dm));
                }
            }
            Op::InstanceNorm { eps } => {
                if need(0) {
                    contribs.push((0, spatial::instance_norm_backward(pv(0), g, *eps)));
                }
            }
        }

        for (k, contrib) in contribs {
            let pi = parents[k].0;
            match &mut grads[pi] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_grad;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            // Box-Muller
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Weighted sum with fixed random weights turns any tensor output into a
    /// scalar objective with a dense, non-degenerate gradient.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let w = randn(g.value(y).shape(), seed);
        let w = g.constant(w);
        let p = g.mul(y, w);
        g.sum(p)
    }

    /// Check d(scalar)/d(input k) for a builder that maps leaf vars to a scalar var.
    fn check_input<F>(inputs: &[ArrayD<f64>], k: usize, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let run = |xs: &[ArrayD<f64>]| -> (f64, Option<ArrayD<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let root = build(&mut g, &vars);
            let val = g.scalar(root);
            let grads = g.backward(root);
            (val, grads.get(vars[k]).cloned())
        };
        let (_, analytic) = run(inputs);
        let analytic = analytic.expect("no gradient reached input");
        let mut xs: Vec<ArrayD<f64>> = inputs.to_vec();
        let res = check_grad(&inputs[k], &analytic, 1e-5, |x| {
            xs[k] = x.clone();
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|v| g.constant(v.clone())).collect();
            let root = build(&mut g, &vars);
            g.scalar(root)
        });
        assert!(
            res.max_rel_err < tol,
            "max rel err {} over {} entries",
            res.max_rel_err,
            res.checked
        );
    }

    #[test]
    fn elementwise_chain_grad() {
        let a = randn(&[2, 3, 4], 1);
        let b = randn(&[2, 3, 4], 2);
        let build = |g: &mut Graph, v: &[Var]| {
            let s = g.add(v[0], v[1]);
            let s = g.tanh(s);
            let t = g.mul(v[0], s);
            let t = g.sigmoid(t);
            let q = g.exp(v[1]);
            let q = g.add_scalar(q, 0.3);
            let r = g.div(t, q);
            let r = g.leaky_relu(r, 0.2);
            let r = g.abs(r);
            let r = g.scale(r, 1.7);
            g.mean(r)
        };
        check_input(&[a.clone(), b.clone()], 0, build, 1e-4);
        check_input(&[a, b], 1, build, 1e-4);
    }

    #[test]
    fn sqrt_clamp_sumaxis_grad() {
        let mut a = randn(&[2, 4, 5], 3);
        a.mapv_inplace(|v| v * v + 0.5); // keep away from clamp kink at 0.2
        let build = |g: &mut Graph, v: &[Var]| {
            let c = g.clamp_min(v[0], 0.2);
            let s = g.sqrt(c);
            let s = g.sum_axis(s, 1);
            weighted_sum(g, s, 99)
        };
        check_input(&[a], 0, build, 1e-4);
    }

    #[test]
    fn channel_ops_grad() {
        let x = randn(&[2, 3, 4, 4], 4);
        let b = randn(&[3], 5);
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.add_channels(v[0], v[1]);
            let y = g.mul_channels(y, v[2]);
            let y = g.scale_channels(y, vec![2.0, 0.5, -1.0]);
            weighted_sum(g, y, 7)
        };
        let s = randn(&[3], 6);
        check_input(&[x.clone(), b.clone(), s.clone()], 0, build, 1e-4);
        check_input(&[x.clone(), b.clone(), s.clone()], 1, build, 1e-4);
        check_input(&[x, b, s], 2, build, 1e-4);
    }

    #[test]
    fn concat_slice_reshape_grad() {
        let a = randn(&[1, 2, 4, 4], 8);
        let b = randn(&[1, 3, 4, 4], 9);
        let build = |g: &mut Graph, v: &[Var]| {
            let c = g.concat(1, &[v[0], v[1]]);
            let s = g.slice_hw(c, 1, 0, 3, 4);
            let r = g.reshape(s, &[1, 5, 12]);
            weighted_sum(g, r, 10)
        };
        check_input(&[a.clone(), b.clone()], 0, build, 1e-4);
        check_input(&[a, b], 1, build, 1e-4);
    }

    #[test]
    fn matmul_grad_all_transpose_modes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let (sa, sb) = match (ta, tb) {
                (false, false) => ([2usize, 3, 4], [2usize, 4, 5]),
                (true, false) => ([2, 4, 3], [2, 4, 5]),
                (false, true) => ([2, 3, 4], [2, 5, 4]),
                (true, true) => ([2, 4, 3], [2, 5, 4]),
            };
            let a = randn(&sa, 11);
            let b = randn(&sb, 12);
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.matmul_b(v[0], v[1], ta, tb);
                weighted_sum(g, y, 13)
            };
            check_input(&[a.clone(), b.clone()], 0, build, 1e-4);
            check_input(&[a, b], 1, build, 1e-4);
        }
    }

    #[test]
    fn gram_matmul_same_operand_grad() {
        let a = randn(&[2, 3, 6], 14);
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.matmul_b(v[0], v[0], false, true);
            weighted_sum(g, y, 15)
        };
        check_input(&[a], 0, build, 1e-4);
    }

    #[test]
    fn inv3_grad() {
        // Diagonally dominant 3x3 blocks stay comfortably invertible.
        let mut x = randn(&[4, 3, 3], 16);
        for i in 0..4 {
            for d in 0..3 {
                x[IxDyn(&[i, d, d])] += 4.0;
            }
        }
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.inv3(v[0]);
            weighted_sum(g, y, 17)
        };
        check_input(&[x], 0, build, 1e-4);
    }

    #[test]
    fn softmax_cols_grad_and_normalization() {
        let x = randn(&[2, 5, 4], 18);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = g.softmax_cols(v, 3.0);
        let yv = g.value(y);
        for n in 0..2 {
            for t in 0..4 {
                let col: f64 = (0..5).map(|s| yv[IxDyn(&[n, s, t])]).sum();
                assert!((col - 1.0).abs() < 1e-12);
            }
        }
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.softmax_cols(v[0], 3.0);
            weighted_sum(g, y, 19)
        };
        check_input(&[x], 0, build, 1e-4);
    }

    #[test]
    fn conv2d_grad() {
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
            let x = randn(&[2, 3, 6, 6], 20);
            let w = randn(&[4, 3, 3, 3], 21);
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], stride, pad);
                weighted_sum(g, y, 22)
            };
            check_input(&[x.clone(), w.clone()], 0, build, 1e-4);
            check_input(&[x, w], 1, build, 1e-4);
        }
    }

    #[test]
    fn resize_grad_and_identity() {
        let x = randn(&[1, 2, 4, 4], 23);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let same = g.resize(v, 4, 4);
        assert_eq!(g.value(same), &x, "same-size resize must be the identity");

        for (h, w) in [(2usize, 2usize), (8, 8), (3, 5)] {
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.resize(v[0], h, w);
                weighted_sum(g, y, 24)
            };
            check_input(&[x.clone()], 0, build, 1e-4);
        }
    }

    #[test]
    fn flow_warp_grad_interior() {
        for border in [Border::Clamp, Border::Zeros] {
            let x = randn(&[1, 2, 6, 6], 25);
            // Offsets keep sampling positions interior and at least 1e-3 from
            // integers, where bilinear gradients are discontinuous.
            let mut wfield = randn(&[1, 2, 6, 6], 26);
            wfield.mapv_inplace(|v| 0.3 + 0.2 * v.tanh());
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.flow_warp(v[0], v[1], border);
                weighted_sum(g, y, 27)
            };
            check_input(&[x.clone(), wfield.clone()], 0, build, 1e-4);
            check_input(&[x, wfield], 1, build, 1e-4);
        }
    }

    #[test]
    fn blend_grad() {
        let a = randn(&[2, 3, 4, 4], 28);
        let f = randn(&[2, 3, 4, 4], 29);
        let mut m = randn(&[2, 1, 4, 4], 30);
        m.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.blend(v[0], v[1], v[2]);
            weighted_sum(g, y, 31)
        };
        check_input(&[a.clone(), f.clone(), m.clone()], 0, build, 1e-4);
        check_input(&[a.clone(), f.clone(), m.clone()], 1, build, 1e-4);
        check_input(&[a, f, m], 2, build, 1e-4);
    }

    #[test]
    fn unfold_gather_grad() {
        let x = randn(&[1, 2, 5, 5], 32);
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.unfold(v[0], 3);
            weighted_sum(g, y, 33)
        };
        check_input(&[x], 0, build, 1e-4);

        let x = randn(&[2, 3, 6], 34);
        let idx = vec![0usize, 5, 2, 2, 1, 0, 3, 4];
        let build = move |g: &mut Graph, v: &[Var]| {
            let y = g.gather_last(v[0], idx.clone(), 4);
            weighted_sum(g, y, 35)
        };
        check_input(&[x], 0, build, 1e-4);
    }

    #[test]
    fn instance_norm_grad() {
        let x = randn(&[2, 3, 4, 4], 36);
        let build = |g: &mut Graph, v: &[Var]| {
            let y = g.instance_norm(v[0], 1e-5);
            weighted_sum(g, y, 37)
        };
        check_input(&[x], 0, build, 2e-4);
    }

    #[test]
    fn determinism_bitwise() {
        let x = randn(&[2, 3, 8, 8], 38);
        let w = randn(&[4, 3, 3, 3], 39);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, 2, 1);
            let y = g.instance_norm(y, 1e-5);
            let y = g.resize(y, 7, 9);
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
