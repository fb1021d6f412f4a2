//! Wengert-tape reverse-mode autodiff over dynamic-dimension f64 arrays.
//!
//! Each forward pass records ops onto a fresh tape; `backward` sweeps the
//! tape once and accumulates gradients for every leaf. Constants (inputs,
//! stop-gradient targets, frozen parameters) are recorded with
//! `requires_grad = false`, so no gradient is ever computed for them — the
//! stop-gradient of the training objective is structural, not numerical.
//!
//! The op set is deliberately small; composite layers (layer norm is the
//! one fused exception, for node-count reasons) are built from these
//! primitives in `nn`. Every op's backward is checked against central
//! finite differences in the tests at the bottom of this file.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

pub type Arr = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax { x: NodeId, axis: usize },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis { x: NodeId, axis: usize },
    Concat { axis: usize, a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize, len: usize },
    TileRows { x: NodeId, n: usize },
    Reshape(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Im2Col { x: NodeId, kernel: usize, stride: usize, pad: usize },
}

struct Node {
    value: Arr,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep. Only leaves retain
/// their gradients; interior gradients are dropped as soon as consumed.
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Arr> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
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

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Arr, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable input (parameters).
    pub fn leaf(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, frozen parameters).
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.push(value, Op::Const, false)
    }

    /// Stop-gradient: a constant holding a copy of `id`'s current value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_bin(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::AddScalar(a, k), rg)
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        debug_assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim");
        let v = av.dot(&bv).into_dyn();
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        let rg = self.nodes[a.0].requires_grad;
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = softmax_forward(&self.nodes[x.0].value, axis);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Softmax { x, axis }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| 1.0 / (1.0 + (-t).exp()));
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t.max(0.0));
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::sqrt);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Sqrt(x), rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t * t);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Square(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(scalar_arr(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s = v.sum() / v.len() as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(scalar_arr(s), Op::MeanAll(x), rg)
    }

    /// Sum along `axis`, keeping the axis with size 1.
    pub fn sum_axis_keep(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self.nodes[x.0].value.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::SumAxis { x, axis }, rg)
    }

    /// Mean along `axis`, keeping the axis with size 1.
    pub fn mean_axis_keep(&mut self, x: NodeId, axis: usize) -> NodeId {
        let n = self.nodes[x.0].value.shape()[axis] as f64;
        let s = self.sum_axis_keep(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, axis: usize, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(
            Axis(axis),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat shapes");
        let rg = self.any_grad(&[a, b]);
        self.push(v, Op::Concat { axis, a, b }, rg)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::SliceRows { x, start, len }, rg)
    }

    /// Row `i` as a `[1, ...]` tensor.
    pub fn row(&mut self, x: NodeId, i: usize) -> NodeId {
        self.slice_rows(x, i, 1)
    }

    /// Repeats a `[1, c]` row `n` times into `[n, c]`.
    pub fn tile_rows(&mut self, x: NodeId, n: usize) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        debug_assert_eq!(xv.nrows(), 1, "tile_rows expects a single row");
        let v = xv
            .broadcast((n, xv.ncols()))
            .expect("tile broadcast")
            .to_owned()
            .into_dyn();
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::TileRows { x, n }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Reshape(x), rg)
    }

    /// Fused layer norm over the last axis: `gamma * (x - mu)/sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = layer_norm_forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(v, Op::LayerNorm { x, gamma, beta, eps }, rg)
    }

    /// Unfolds `[h, w, cin]` into `[oh*ow, kernel*kernel*cin]` patches.
    pub fn im2col(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> NodeId {
        let v = im2col_forward(&self.nodes[x.0].value, kernel, stride, pad);
        let rg = self.nodes[x.0].requires_grad;
        self.push(v, Op::Im2Col { x, kernel, stride, pad }, rg)
    }

    // ----- composites -----

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let d = self.sub(pred, target);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse sweep from a scalar `root`; returns gradients for leaves.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(self.nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // retain leaf gradient
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
        }
        Grads { by_node: grads }
    }

    fn accum(&self, grads: &mut [Option<Arr>], parent: NodeId, contrib: Arr) {
        if !self.nodes[parent.0].requires_grad {
            return;
        }
        debug_assert_eq!(
            contrib.shape(),
            self.nodes[parent.0].value.shape(),
            "gradient shape mismatch"
        );
        match &mut grads[parent.0] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, id: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let val = |n: NodeId| &self.nodes[n.0].value;
        match self.nodes[id].op.clone() {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accum(grads, a, reduce_to_shape(g, val(a).shape()));
                self.accum(grads, b, reduce_to_shape(g, val(b).shape()));
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, reduce_to_shape(g, val(a).shape()));
                let neg = g.mapv(|x| -x);
                self.accum(grads, b, reduce_to_shape(&neg, val(b).shape()));
            }
            Op::Mul(a, b) => {
                let gb = broadcast_bin(g, val(b), |x, y| x * y);
                self.accum(grads, a, reduce_to_shape(&gb, val(a).shape()));
                let ga = broadcast_bin(g, val(a), |x, y| x * y);
                self.accum(grads, b, reduce_to_shape(&ga, val(b).shape()));
            }
            Op::Div(a, b) => {
                let ga = broadcast_bin(g, val(b), |x, y| x / y);
                self.accum(grads, a, reduce_to_shape(&ga, val(a).shape()));
                let out = &self.nodes[id].value;
                let t = broadcast_bin(g, out, |x, o| x * o); // g * a/b
                let gb = broadcast_bin(&t, val(b), |x, y| -x / y);
                self.accum(grads, b, reduce_to_shape(&gb, val(b).shape()));
            }
            Op::Scale(a, k) => self.accum(grads, a, g.mapv(|x| x * k)),
            Op::AddScalar(a, _) => self.accum(grads, a, g.clone()),
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                let av = as2(val(a));
                let bv = as2(val(b));
                self.accum(grads, a, g2.dot(&bv.t()).into_dyn());
                self.accum(grads, b, av.t().dot(&g2).into_dyn());
            }
            Op::Transpose(a) => {
                self.accum(grads, a, as2(g).t().to_owned().into_dyn());
            }
            Op::Softmax { x, axis } => {
                let out = &self.nodes[id].value;
                let gy = g * out;
                let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let gx = out * &(g - &s.broadcast(g.raw_dim()).unwrap());
                self.accum(grads, x, gx);
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[id].value;
                self.accum(grads, x, g * &out.mapv(|o| o * (1.0 - o)));
            }
            Op::Tanh(x) => {
                let out = &self.nodes[id].value;
                self.accum(grads, x, g * &out.mapv(|o| 1.0 - o * o));
            }
            Op::Relu(x) => {
                let mask = val(x).mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, x, g * &mask);
            }
            Op::Sqrt(x) => {
                let out = &self.nodes[id].value;
                self.accum(grads, x, g * &out.mapv(|o| 0.5 / o));
            }
            Op::Square(x) => {
                self.accum(grads, x, g * &val(x).mapv(|t| 2.0 * t));
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().unwrap();
                self.accum(grads, x, Arr::from_elem(val(x).raw_dim(), gv));
            }
            Op::MeanAll(x) => {
                let n = val(x).len() as f64;
                let gv = *g.iter().next().unwrap() / n;
                self.accum(grads, x, Arr::from_elem(val(x).raw_dim(), gv));
            }
            Op::SumAxis { x, axis: _ } => {
                let gx = g.broadcast(val(x).raw_dim()).unwrap().to_owned();
                self.accum(grads, x, gx);
            }
            Op::Concat { axis, a, b } => {
                let na = val(a).shape()[axis];
                let ga = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(0..na))
                    .to_owned();
                let nb = val(b).shape()[axis];
                let gb = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(na..na + nb))
                    .to_owned();
                self.accum(grads, a, ga);
                self.accum(grads, b, gb);
            }
            Op::SliceRows { x, start, len } => {
                let mut gx = Arr::zeros(val(x).raw_dim());
                gx.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(g);
                self.accum(grads, x, gx);
            }
            Op::TileRows { x, n: _ } => {
                let gx = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(grads, x, gx);
            }
            Op::Reshape(x) => {
                let gx = g
                    .clone()
                    .into_shape_with_order(val(x).raw_dim())
                    .expect("reshape grad");
                self.accum(grads, x, gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, ggamma, gbeta) =
                    layer_norm_backward(val(x), val(gamma), g, eps);
                self.accum(grads, x, gx);
                self.accum(grads, gamma, ggamma);
                self.accum(grads, beta, gbeta);
            }
            Op::Im2Col { x, kernel, stride, pad } => {
                let gx = col2im(g, val(x).shape(), kernel, stride, pad);
                self.accum(grads, x, gx);
            }
        }
    }
}

pub fn scalar_arr(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), v)
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

/// Elementwise binary op with two-sided broadcasting.
fn broadcast_bin(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = Arr::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if out.shape()[axis] != dim {
            debug_assert_eq!(dim, 1, "reduce_to_shape target {shape:?} from {:?}", g.shape());
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn softmax_forward(x: &Arr, axis: usize) -> Arr {
    let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &v| m.max(v));
    let max = max.insert_axis(Axis(axis));
    let mut e = x - &max.broadcast(x.raw_dim()).unwrap();
    e.mapv_inplace(f64::exp);
    let s = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    &e / &s.broadcast(x.raw_dim()).unwrap()
}

fn layer_norm_forward(x: &Arr, gamma: &Arr, beta: &Arr, eps: f64) -> Arr {
    let axis = x.ndim() - 1;
    let mu = x.mean_axis(Axis(axis)).unwrap().insert_axis(Axis(axis));
    let centered = x - &mu.broadcast(x.raw_dim()).unwrap();
    let var = centered
        .mapv(|v| v * v)
        .mean_axis(Axis(axis))
        .unwrap()
        .insert_axis(Axis(axis));
    let inv = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = &centered * &inv.broadcast(x.raw_dim()).unwrap();
    let scaled = broadcast_bin(&xhat, gamma, |a, b| a * b);
    broadcast_bin(&scaled, beta, |a, b| a + b)
}

fn layer_norm_backward(x: &Arr, gamma: &Arr, g: &Arr, eps: f64) -> (Arr, Arr, Arr) {
    let axis = x.ndim() - 1;
    let c = x.shape()[axis] as f64;
    let mu = x.mean_axis(Axis(axis)).unwrap().insert_axis(Axis(axis));
    let centered = x - &mu.broadcast(x.raw_dim()).unwrap();
    let var = centered
        .mapv(|v| v * v)
        .mean_axis(Axis(axis))
        .unwrap()
        .insert_axis(Axis(axis));
    let inv = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = &centered * &inv.broadcast(x.raw_dim()).unwrap();

    let g_xhat = broadcast_bin(g, gamma, |a, b| a * b);
    let mean_g = g_xhat
        .mean_axis(Axis(axis))
        .unwrap()
        .insert_axis(Axis(axis));
    let gx_xhat = (&g_xhat * &xhat)
        .mean_axis(Axis(axis))
        .unwrap()
        .insert_axis(Axis(axis));
    let gx = &inv.broadcast(x.raw_dim()).unwrap().to_owned()
        * &(&g_xhat
            - &mean_g.broadcast(x.raw_dim()).unwrap().to_owned()
            - &(&xhat * &gx_xhat.broadcast(x.raw_dim()).unwrap().to_owned()));

    // Reduce gamma/beta grads over all leading axes.
    let g_gamma_full = g * &xhat;
    let mut g_gamma = g_gamma_full.clone();
    let mut g_beta = g.clone();
    while g_gamma.ndim() > gamma.ndim() {
        g_gamma = g_gamma.sum_axis(Axis(0));
        g_beta = g_beta.sum_axis(Axis(0));
    }
    let _ = c;
    (gx, g_gamma, g_beta)
}

fn im2col_forward(x: &Arr, kernel: usize, stride: usize, pad: usize) -> Arr {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut out = Arr::zeros(IxDyn(&[oh * ow, kernel * kernel * cin]));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        out[[row, (ky * kernel + kx) * cin + ci]] =
                            x[[iy as usize, ix as usize, ci]];
                    }
                }
            }
        }
    }
    out
}

fn col2im(g: &Arr, xshape: &[usize], kernel: usize, stride: usize, pad: usize) -> Arr {
    let (h, w, cin) = (xshape[0], xshape[1], xshape[2]);
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut gx = Arr::zeros(IxDyn(xshape));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        gx[[iy as usize, ix as usize, ci]] +=
                            g[[row, (ky * kernel + kx) * cin + ci]];
                    }
                }
            }
        }
    }
    gx
}

/// Central finite-difference gradient of a scalar function at `x`.
/// Used throughout the tests as the independent oracle for backward passes.
pub fn numeric_grad(mut f: impl FnMut(&Arr) -> f64, x: &Arr, eps: f64) -> Arr {
    let mut g = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let flat = x.as_slice().expect("contiguous")[idx];
        {
            let s = xp.as_slice_mut().unwrap();
            s[idx] = flat + eps;
        }
        let fp = f(&xp);
        {
            let s = xp.as_slice_mut().unwrap();
            s[idx] = flat - eps;
        }
        let fm = f(&xp);
        {
            let s = xp.as_slice_mut().unwrap();
            s[idx] = flat;
        }
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Max relative error between two gradients, with an absolute floor so
/// near-zero entries compare on absolute terms.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = make_rng(seed, "tape-test");
        let mut a = Arr::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = rng.normal();
        }
        a
    }

    /// Checks d(sum of f(x, aux...)) / dx against finite differences.
    fn check_unary(shape: &[usize], f: impl Fn(&mut Tape, NodeId) -> NodeId, seed: u64) {
        let x0 = rand_arr(shape, seed);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap();

        let numeric = numeric_grad(
            |xv| {
                let mut t = Tape::new();
                let x = t.leaf(xv.clone());
                let y = f(&mut t, x);
                let l = t.sum_all(y);
                t.scalar(l)
            },
            &x0,
            1e-5,
        );
        let err = max_rel_err(analytic, &numeric);
        assert!(err < 1e-6, "unary grad check failed: rel err {err}");
    }

    fn check_binary(
        sa: &[usize],
        sb: &[usize],
        f: impl Fn(&mut Tape, NodeId, NodeId) -> NodeId,
        seed: u64,
    ) {
        let a0 = rand_arr(sa, seed);
        let b0 = rand_arr(sb, seed + 1).mapv(|v| v + 3.0); // keep div well away from 0
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let y = f(&mut tape, a, b);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);

        for (which, x0, other0, id) in [("a", &a0, &b0, a), ("b", &b0, &a0, b)] {
            let numeric = numeric_grad(
                |xv| {
                    let mut t = Tape::new();
                    let (na, nb) = if which == "a" {
                        (t.leaf(xv.clone()), t.leaf(other0.clone()))
                    } else {
                        let oa = t.leaf(other0.clone());
                        (oa, t.leaf(xv.clone()))
                    };
                    let y = f(&mut t, na, nb);
                    let l = t.sum_all(y);
                    t.scalar(l)
                },
                x0,
                1e-5,
            );
            let err = max_rel_err(grads.get(id).unwrap(), &numeric);
            assert!(err < 1e-6, "binary grad check ({which}) failed: rel err {err}");
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        check_unary(&[3, 4], |t, x| t.sigmoid(x), 1);
        check_unary(&[3, 4], |t, x| t.tanh(x), 2);
        check_unary(&[3, 4], |t, x| t.square(x), 3);
        check_unary(&[5], |t, x| t.scale(x, -2.5), 4);
        check_unary(&[5], |t, x| t.add_scalar(x, 1.25), 5);
        check_unary(&[2, 3], |t, x| t.mean_all(x), 6);
        check_unary(&[2, 3], |t, x| t.transpose(x), 7);
        check_unary(&[4, 3], |t, x| t.slice_rows(x, 1, 2), 8);
        check_unary(&[1, 6], |t, x| t.tile_rows(x, 5), 9);
        check_unary(&[2, 6], |t, x| t.reshape(x, &[3, 4]), 10);
        check_unary(&[3, 4], |t, x| t.sum_axis_keep(x, 1), 11);
        check_unary(&[3, 4], |t, x| t.mean_axis_keep(x, 0), 12);
    }

    #[test]
    fn grad_relu_and_sqrt_away_from_kinks() {
        // shift inputs away from 0 so finite differences are valid
        let x0 = rand_arr(&[4, 4], 20).mapv(|v| v + if v >= 0.0 { 0.5 } else { -0.5 });
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let numeric = numeric_grad(
            |xv| {
                let mut t = Tape::new();
                let x = t.leaf(xv.clone());
                let y = t.relu(x);
                let l = t.sum_all(y);
                t.scalar(l)
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(grads.get(x).unwrap(), &numeric) < 1e-6);

        check_unary(&[3, 3], |t, x| {
            let p = t.square(x);
            let p = t.add_scalar(p, 1.0);
            t.sqrt(p)
        }, 21);
    }

    #[test]
    fn grad_binary_ops_with_broadcast() {
        check_binary(&[3, 4], &[3, 4], |t, a, b| t.add(a, b), 30);
        check_binary(&[3, 4], &[4], |t, a, b| t.add(a, b), 31);
        check_binary(&[3, 4], &[1, 4], |t, a, b| t.sub(a, b), 32);
        check_binary(&[3, 4], &[3, 1], |t, a, b| t.mul(a, b), 33);
        check_binary(&[3, 4], &[3, 1], |t, a, b| t.div(a, b), 34);
        check_binary(&[2, 5], &[5, 3], |t, a, b| t.matmul(a, b), 35);
        check_binary(&[2, 3], &[4, 3], |t, a, b| t.concat(0, a, b), 36);
        check_binary(&[2, 3], &[2, 2], |t, a, b| t.concat(1, a, b), 37);
    }

    #[test]
    fn grad_softmax_both_axes() {
        for axis in [0usize, 1] {
            let x0 = rand_arr(&[4, 5], 40 + axis as u64);
            let w0 = rand_arr(&[4, 5], 50 + axis as u64);
            // weight the output so the gradient is not trivially zero-sum
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let w = tape.constant(w0.clone());
            let y = tape.softmax(x, axis);
            let yw = tape.mul(y, w);
            let loss = tape.sum_all(yw);
            let grads = tape.backward(loss);
            let numeric = numeric_grad(
                |xv| {
                    let mut t = Tape::new();
                    let x = t.leaf(xv.clone());
                    let w = t.constant(w0.clone());
                    let y = t.softmax(x, axis);
                    let yw = t.mul(y, w);
                    let l = t.sum_all(yw);
                    t.scalar(l)
                },
                &x0,
                1e-5,
            );
            let err = max_rel_err(grads.get(x).unwrap(), &numeric);
            assert!(err < 1e-6, "softmax axis {axis}: rel err {err}");
        }
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let x0 = rand_arr(&[5, 6], 60);
        let g0 = rand_arr(&[6], 61).mapv(|v| v + 2.0);
        let b0 = rand_arr(&[6], 62);
        let w0 = rand_arr(&[5, 6], 63);

        let run = |xv: &Arr, gv: &Arr, bv: &Arr| -> (f64, Option<(Arr, Arr, Arr)>) {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let gamma = t.leaf(gv.clone());
            let beta = t.leaf(bv.clone());
            let w = t.constant(w0.clone());
            let y = t.layer_norm(x, gamma, beta, 1e-5);
            let yw = t.mul(y, w);
            let l = t.sum_all(yw);
            let grads = t.backward(l);
            let out = (
                grads.get(x).unwrap().clone(),
                grads.get(gamma).unwrap().clone(),
                grads.get(beta).unwrap().clone(),
            );
            (t.scalar(l), Some(out))
        };
        let (_, analytic) = run(&x0, &g0, &b0);
        let (gx, ggamma, gbeta) = analytic.unwrap();

        let nx = numeric_grad(|v| run(v, &g0, &b0).0, &x0, 1e-5);
        let ng = numeric_grad(|v| run(&x0, v, &b0).0, &g0, 1e-5);
        let nb = numeric_grad(|v| run(&x0, &g0, v).0, &b0, 1e-5);
        assert!(max_rel_err(&gx, &nx) < 1e-5, "x: {}", max_rel_err(&gx, &nx));
        assert!(max_rel_err(&ggamma, &ng) < 1e-6);
        assert!(max_rel_err(&gbeta, &nb) < 1e-6);
    }

    #[test]
    fn grad_im2col_roundtrip() {
        let x0 = rand_arr(&[5, 5, 2], 70);
        let w0 = rand_arr(&[9 * 2, 3], 71);
        let run = |xv: &Arr| -> (f64, Option<Arr>) {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let w = t.constant(w0.clone());
            let cols = t.im2col(x, 3, 2, 1);
            let y = t.matmul(cols, w);
            let sq = t.square(y);
            let l = t.sum_all(sq);
            let grads = t.backward(l);
            (t.scalar(l), Some(grads.get(x).unwrap().clone()))
        };
        let (_, g) = run(&x0);
        let numeric = numeric_grad(|v| run(v).0, &x0, 1e-5);
        assert!(max_rel_err(&g.unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_arr(&[2, 2], 80));
        let c = tape.constant(rand_arr(&[2, 2], 81));
        let y = tape.mul(x, c);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        // loss = x * detach(x): d/dx must be detach(x), not 2x.
        let x0 = rand_arr(&[3], 90);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let d = tape.detach(x);
        let y = tape.mul(x, d);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let gx = grads.get(x).unwrap();
        for (a, b) in gx.iter().zip(x0.iter()) {
            assert_eq!(a, b, "detach must stop the second path");
        }
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(rand_arr(&[4], 100));
        let y = tape.add(x, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        for &v in grads.get(x).unwrap().iter() {
            assert_eq!(v, 2.0);
        }
    }
}
