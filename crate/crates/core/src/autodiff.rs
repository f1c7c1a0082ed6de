//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//!
//! Binary elementwise operations follow numpy broadcasting rules; the
//! backward pass sums gradients over broadcast axes. Everything runs on the
//! calling thread, so a fixed sequence of operations always yields
//! bit-identical values and gradients.

use std::cell::{Ref, RefCell};
use std::fmt;

use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice, Zip};

/// Dense tensor type used throughout the crate.
pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    GraphMul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    InvSqrtOrZero(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    SumAxis(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SliceAxis(usize, usize, usize, usize),
    Concat(Vec<usize>, usize),
    Select(usize, usize, Vec<usize>),
    StraightThrough(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, shape={:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, materialising zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::from_elem(IxDyn(&[]), value))
    }

    /// Concatenate along `axis`.
    pub fn concat<'g>(&'g self, vars: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!vars.is_empty(), "concat of zero tensors");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = vars.iter().map(|v| nodes[v.id].value.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shape mismatch")
        };
        let rg = vars.iter().any(|v| self.requires(v.id));
        self.push(value, Op::Concat(vars.iter().map(|v| v.id).collect(), axis), rg)
    }

    /// Forward value `hard`, backward gradient routed unchanged to `soft`.
    pub fn straight_through<'g>(&'g self, hard: Tensor, soft: Var<'g>) -> Var<'g> {
        assert_eq!(hard.shape(), soft.shape().as_slice(), "straight-through shape");
        let rg = self.requires(soft.id);
        self.push(hard, Op::StraightThrough(soft.id), rg)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.raw_dim()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &nodes[i].value;
            let rg = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, reduce_to(&g, val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, -reduce_to(&g, val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let ga = &g * val(*b);
                        accumulate(&mut grads, *a, reduce_to(&ga, val(*a).shape()));
                    }
                    if rg(*b) {
                        let gb = &g * val(*a);
                        accumulate(&mut grads, *b, reduce_to(&gb, val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    if rg(*a) {
                        let ga = &g / val(*b);
                        accumulate(&mut grads, *a, reduce_to(&ga, val(*a).shape()));
                    }
                    if rg(*b) {
                        // d(a/b)/db = -out/b
                        let gb = -(&g * &node.value) / val(*b);
                        accumulate(&mut grads, *b, reduce_to(&gb, val(*b).shape()));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, w) => {
                    let av = val(*a);
                    let wv = as_matrix(val(*w));
                    let k = wv.nrows();
                    let n = wv.ncols();
                    let rows = av.len() / k;
                    let g2 = g.as_standard_layout();
                    let g2 = g2.to_shape((rows, n)).unwrap();
                    if rg(*a) {
                        let ga = g2.dot(&wv.t());
                        accumulate(
                            &mut grads,
                            *a,
                            ga.to_shape(av.raw_dim()).unwrap().into_owned(),
                        );
                    }
                    if rg(*w) {
                        let a2 = av.as_standard_layout();
                        let a2 = a2.to_shape((rows, k)).unwrap();
                        let gw = a2.t().dot(&g2);
                        accumulate(&mut grads, *w, gw.into_dyn());
                    }
                }
                Op::GraphMul(s, x) => {
                    let (gs, gx) = graph_mul_backward(val(*s), val(*x), &g, rg(*s), rg(*x));
                    if let Some(gs) = gs {
                        accumulate(&mut grads, *s, gs);
                    }
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::Ln(a) => accumulate(&mut grads, *a, g / val(*a)),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        *g *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| *g *= 2.0 * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 0.5 / y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::InvSqrtOrZero(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        *g *= if x > 0.0 { -0.5 * x.powf(-1.5) } else { 0.0 }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    accumulate(&mut grads, *a, Tensor::from_elem(val(*a).raw_dim(), s));
                }
                Op::SumAxis(a) => {
                    let ga = g.broadcast(val(*a).raw_dim()).unwrap().to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let ga = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(val(*a).raw_dim())
                        .unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let ga = g.permuted_axes(inverse).as_standard_layout().into_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceAxis(a, axis, start, end) => {
                    let mut ga = Tensor::zeros(val(*a).raw_dim());
                    ga.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                        .assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(ids, axis) => {
                    let mut offset = 0;
                    for &i in ids {
                        let len = val(i).shape()[*axis];
                        if rg(i) {
                            let part = g
                                .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                                .to_owned();
                            accumulate(&mut grads, i, part);
                        }
                        offset += len;
                    }
                }
                Op::Select(a, axis, indices) => {
                    let mut ga = Tensor::zeros(val(*a).raw_dim());
                    for (k, &src) in indices.iter().enumerate() {
                        let part = g.index_axis(Axis(*axis), k);
                        let mut dst = ga.index_axis_mut(Axis(*axis), src);
                        dst += &part;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::StraightThrough(soft) => accumulate(&mut grads, *soft, g),
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sum `g` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn as_matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("weight must be a matrix")
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("cannot broadcast {a:?} with {b:?}"),
            }
        })
        .collect()
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = Tensor::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Batched graph propagation: `s` is `[N, N]` or `[B, N, N]`, `x` is `[B, L, N, F]`.
fn graph_mul_forward(s: &Tensor, x: &Tensor) -> Tensor {
    let (b, l, n, f) = dims4(x);
    let mut out = Tensor::zeros(IxDyn(&[b, l, n, f]));
    for bi in 0..b {
        let sb = graph_operator(s, bi);
        for li in 0..l {
            let xv = x
                .slice(ndarray::s![bi, li, .., ..])
                .into_dimensionality::<Ix2>()
                .unwrap();
            let mut o = out
                .slice_mut(ndarray::s![bi, li, .., ..])
                .into_dimensionality::<Ix2>()
                .unwrap();
            ndarray::linalg::general_mat_mul(1.0, &sb, &xv, 0.0, &mut o);
        }
    }
    out
}

fn graph_mul_backward(
    s: &Tensor,
    x: &Tensor,
    g: &Tensor,
    want_s: bool,
    want_x: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, l, n, f) = dims4(x);
    let mut gs = want_s.then(|| Tensor::zeros(s.raw_dim()));
    let mut gx = want_x.then(|| Tensor::zeros(IxDyn(&[b, l, n, f])));
    for bi in 0..b {
        let sb = graph_operator(s, bi);
        for li in 0..l {
            let xv = x.slice(ndarray::s![bi, li, .., ..]).into_dimensionality::<Ix2>().unwrap();
            let gv = g.slice(ndarray::s![bi, li, .., ..]).into_dimensionality::<Ix2>().unwrap();
            if let Some(gx) = gx.as_mut() {
                let mut o = gx
                    .slice_mut(ndarray::s![bi, li, .., ..])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                ndarray::linalg::general_mat_mul(1.0, &sb.t(), &gv, 0.0, &mut o);
            }
            if let Some(gs) = gs.as_mut() {
                let mut o = if s.ndim() == 2 {
                    gs.view_mut().into_dimensionality::<Ix2>().unwrap()
                } else {
                    gs.slice_mut(ndarray::s![bi, .., ..])
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                };
                ndarray::linalg::general_mat_mul(1.0, &gv, &xv.t(), 1.0, &mut o);
            }
        }
    }
    (gs, gx)
}

fn graph_operator(s: &Tensor, batch: usize) -> ArrayView2<'_, f64> {
    if s.ndim() == 2 {
        s.view().into_dimensionality::<Ix2>().unwrap()
    } else {
        s.slice(ndarray::s![batch, .., ..])
            .into_dimensionality::<Ix2>()
            .unwrap()
    }
}

fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a [B, L, N, F] tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.value().mapv(f);
        let rg = self.graph.requires(self.id);
        self.graph.push(value, op, rg)
    }

    fn bin(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let value = binary(&self.value(), &other.value(), f);
        let rg = self.graph.requires(self.id) || self.graph.requires(other.id);
        self.graph.push(value, op, rg)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.bin(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.bin(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.bin(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.bin(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// Contract the last axis of `self` with a `[K, N]` matrix.
    pub fn matmul(self, w: Var<'g>) -> Var<'g> {
        let value = {
            let a = self.value();
            let wt = w.value();
            let wm = as_matrix(&wt);
            let k = wm.nrows();
            let last = *a.shape().last().expect("matmul on a scalar");
            assert_eq!(last, k, "matmul inner dims: {:?} x {:?}", a.shape(), wt.shape());
            let rows = a.len() / k.max(1);
            let a_std = a.as_standard_layout();
            let a2 = a_std.to_shape((rows, k)).unwrap();
            let out = a2.dot(&wm);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = wm.ncols();
            out.to_shape(IxDyn(&shape)).unwrap().into_owned()
        };
        let rg = self.graph.requires(self.id) || self.graph.requires(w.id);
        self.graph.push(value, Op::MatMul(self.id, w.id), rg)
    }

    /// Propagate node features through `operator` (`[N, N]` or `[B, N, N]`);
    /// `self` is `[B, L, N, F]`.
    pub fn graph_mul(self, operator: Var<'g>) -> Var<'g> {
        let value = graph_mul_forward(&operator.value(), &self.value());
        let rg = self.graph.requires(self.id) || self.graph.requires(operator.id);
        self.graph.push(value, Op::GraphMul(operator.id, self.id), rg)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    /// `x^{-1/2}` for positive entries, zero elsewhere.
    pub fn inv_sqrt_or_zero(self) -> Var<'g> {
        self.unary(Op::InvSqrtOrZero(self.id), |x| {
            if x > 0.0 {
                1.0 / x.sqrt()
            } else {
                0.0
            }
        })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Elementwise maximum, written as `(a + b + |a - b|) / 2`.
    pub fn maximum(self, other: Var<'g>) -> Var<'g> {
        self.add(other)
            .add(self.sub(other).abs())
            .scale(0.5)
    }

    pub fn sum(self) -> Var<'g> {
        let value = Tensor::from_elem(IxDyn(&[]), self.value().sum());
        let rg = self.graph.requires(self.id);
        self.graph.push(value, Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length one.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let value = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let rg = self.graph.requires(self.id);
        self.graph.push(value, Op::SumAxis(self.id), rg)
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let n = self.value().shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape to {shape:?}: {e}"));
        let rg = self.graph.requires(self.id);
        self.graph.push(value, Op::Reshape(self.id), rg)
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.graph.requires(self.id);
        self.graph.push(value, Op::Permute(self.id, axes.to_vec()), rg)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Var<'g> {
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let rg = self.graph.requires(self.id);
        self.graph
            .push(value, Op::SliceAxis(self.id, axis, start, end), rg)
    }

    /// Gather `indices` along `axis` (repeats allowed).
    pub fn select(self, axis: usize, indices: &[usize]) -> Var<'g> {
        let value = self.value().select(Axis(axis), indices);
        let rg = self.graph.requires(self.id);
        self.graph
            .push(value, Op::Select(self.id, axis, indices.to_vec()), rg)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x`.
    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.raw_dim());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.as_slice_mut().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = orig + h;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[i] = orig - h;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[i] = orig;
            out.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn check(
        build: impl for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
        x: Tensor,
    ) {
        let g = Graph::new();
        let v = g.param(x.clone());
        let loss = build(&g, v);
        let analytic = g.backward(loss).get_or_zeros(v);
        let numeric = numeric_grad(
            |t| {
                let g = Graph::new();
                let v = g.param(t.clone());
                build(&g, v).item()
            },
            &x,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]].into_dyn();
        check(
            |_, v| v.sigmoid().mul(v.tanh()).add(v.square().exp().ln()).sum(),
            x.clone(),
        );
        check(|_, v| v.abs().add_scalar(1.0).sqrt().div(v.exp()).mean(), x);
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let x = array![[0.5], [-1.5]].into_dyn();
        check(
            |g, v| {
                let row = g.constant(array![[1.0, 2.0, 3.0]].into_dyn());
                v.mul(row).sigmoid().sum()
            },
            x,
        );
    }

    #[test]
    fn matmul_and_reshape_gradients() {
        let x = array![[0.2, 0.4], [1.0, -0.3], [0.5, 0.5]].into_dyn();
        check(
            |g, v| {
                let w = g.constant(array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]].into_dyn());
                v.matmul(w).tanh().reshape(&[9]).select(0, &[0, 0, 4, 8]).sum()
            },
            x.clone(),
        );
        check(
            |g, v| {
                let a = g.constant(array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]].into_dyn());
                a.matmul(v).square().sum()
            },
            x,
        );
    }

    #[test]
    fn graph_mul_gradients_both_sides() {
        let s = array![[[0.0, 1.0], [0.5, 0.2]]].into_dyn();
        let x = Tensor::from_shape_vec(IxDyn(&[1, 3, 2, 2]), (0..12).map(|i| i as f64 * 0.1 - 0.4).collect())
            .unwrap();
        let xc = x.clone();
        check(
            move |g, v| g.constant(xc.clone()).graph_mul(v).tanh().sum(),
            s.clone(),
        );
        check(move |g, v| v.graph_mul(g.constant(s.clone())).square().sum(), x);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let x = Tensor::from_shape_vec(IxDyn(&[2, 3, 2]), (0..12).map(|i| (i as f64 + 0.5).sin()).collect())
            .unwrap();
        check(
            |g, v| {
                let a = v.permute(&[2, 0, 1]).slice_axis(2, 1, 3);
                let b = v.sum_axis(1).permute(&[2, 0, 1]);
                g.concat(&[a, b], 2).square().mean()
            },
            x.clone(),
        );
        check(|_, v| v.clamp(-0.5, 0.5).mul(v).maximum(v.scale(0.3)).sum(), x);
    }

    #[test]
    fn straight_through_passes_soft_gradient() {
        let g = Graph::new();
        let p = g.param(array![0.2, 0.9].into_dyn());
        let soft = p.sigmoid();
        let hard = soft.value().mapv(|v| if v > 0.6 { 1.0 } else { 0.0 });
        let st = g.straight_through(hard, soft);
        assert_eq!(st.value().as_slice().unwrap(), &[0.0, 1.0]);
        let gs = g.backward(st.scale(3.0).sum()).get_or_zeros(p);

        let g2 = Graph::new();
        let p2 = g2.param(array![0.2, 0.9].into_dyn());
        let gsoft = g2.backward(p2.sigmoid().scale(3.0).sum()).get_or_zeros(p2);
        assert_eq!(gs, gsoft);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let g = Graph::new();
        let c = g.constant(array![1.0, 2.0].into_dyn());
        let p = g.param(array![3.0, 4.0].into_dyn());
        let grads = g.backward(c.mul(p).sum());
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }
}
