//! Reverse-mode tape over `ArrayD<T>`.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with a backward closure per op. Nodes are appended in topological order,
//! so `backward` is a single reverse sweep. Parameters enter the tape via
//! [`Graph::param`], which also records a binding so their gradients can be
//! accumulated back into the [`ParamStore`] afterwards.

use ndarray::{concatenate, ArrayD, ArrayView1, ArrayView4, Axis, IxDyn, Slice};

use super::kernels;
use super::Elem;
use crate::params::{BufferId, ParamId, ParamStore};

pub type NodeId = usize;

/// (all values, node value, node grad) -> per-parent gradients.
type BackFn<T> = Box<dyn Fn(&[ArrayD<T>], &ArrayD<T>, &ArrayD<T>) -> Vec<(NodeId, ArrayD<T>)>>;

pub type Gradients<T> = Vec<Option<ArrayD<T>>>;

pub struct Graph<T: Elem> {
    vals: Vec<ArrayD<T>>,
    backs: Vec<Option<BackFn<T>>>,
    requires: Vec<bool>,
    bindings: Vec<(ParamId, NodeId)>,
    pub train: bool,
}

/// Sums `g` down to `shape` (the adjoint of broadcasting `shape` up to `g`).
fn reduce_to_shape<T: Elem>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_to<T: Elem>(v: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    v.broadcast(IxDyn(shape)).expect("broadcastable").to_owned()
}

fn as4<T: Elem>(a: &ArrayD<T>) -> ArrayView4<'_, T> {
    a.view().into_dimensionality().expect("4-axis tensor")
}

fn as1<T: Elem>(a: &ArrayD<T>) -> ArrayView1<'_, T> {
    a.view().into_dimensionality().expect("1-axis tensor")
}

impl<T: Elem> Graph<T> {
    pub fn new(train: bool) -> Self {
        Graph {
            vals: Vec::new(),
            backs: Vec::new(),
            requires: Vec::new(),
            bindings: Vec::new(),
            train,
        }
    }

    fn push(&mut self, v: ArrayD<T>, requires: bool, back: Option<BackFn<T>>) -> NodeId {
        self.vals.push(v);
        self.backs.push(if requires { back } else { None });
        self.requires.push(requires);
        self.vals.len() - 1
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, v: ArrayD<T>) -> NodeId {
        self.push(v, false, None)
    }

    /// Differentiable leaf (used by gradient checks).
    pub fn leaf(&mut self, v: ArrayD<T>) -> NodeId {
        self.push(v, true, None)
    }

    /// Parameter leaf bound to the store for gradient accumulation.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), true, None);
        self.bindings.push((id, node));
        node
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.vals[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.vals[id].shape()
    }

    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.vals[id].len(), 1);
        *self.vals[id].iter().next().unwrap()
    }

    pub fn requires(&self, id: NodeId) -> bool {
        self.requires[id]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Reverse sweep from a scalar root. Leaf gradients stay in the result.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.vals[root].len(), 1, "backward root must be scalar");
        let mut grads: Gradients<T> = (0..self.vals.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::from_elem(self.vals[root].raw_dim(), T::one()));
        for id in (0..=root).rev() {
            if !self.requires[id] {
                continue;
            }
            let Some(back) = &self.backs[id] else { continue };
            let Some(g) = grads[id].take() else { continue };
            for (pid, pg) in back(&self.vals, &self.vals[id], &g) {
                debug_assert_eq!(pg.shape(), self.vals[pid].shape(), "grad shape for node {pid}");
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }

    /// Adds parameter gradients from a backward pass into the store.
    pub fn accumulate_into(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.bindings {
            if let Some(g) = &grads[node] {
                store.add_grad(pid, g);
            }
        }
    }

    // ---- elementwise ----

    /// `a + b` with `b` broadcastable into `a`'s shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] + &self.vals[b];
        let (ra, rb) = (self.requires[a], self.requires[b]);
        let bshape = self.vals[b].shape().to_vec();
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |_vals, _y, g| {
                let mut out = Vec::new();
                if ra {
                    out.push((a, g.clone()));
                }
                if rb {
                    out.push((b, reduce_to_shape(g, &bshape)));
                }
                out
            })),
        )
    }

    /// `a - b`, same shapes.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] - &self.vals[b];
        let (ra, rb) = (self.requires[a], self.requires[b]);
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |_vals, _y, g| {
                let mut out = Vec::new();
                if ra {
                    out.push((a, g.clone()));
                }
                if rb {
                    out.push((b, g.mapv(|x| -x)));
                }
                out
            })),
        )
    }

    /// `a * b` with `b` broadcastable into `a`'s shape.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bb = broadcast_to(&self.vals[b], self.vals[a].shape());
        let v = &self.vals[a] * &bb;
        let (ra, rb) = (self.requires[a], self.requires[b]);
        let bshape = self.vals[b].shape().to_vec();
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |vals, _y, g| {
                let mut out = Vec::new();
                if ra {
                    let bb = broadcast_to(&vals[b], vals[a].shape());
                    out.push((a, g * &bb));
                }
                if rb {
                    let prod = g * &vals[a];
                    out.push((b, reduce_to_shape(&prod, &bshape)));
                }
                out
            })),
        )
    }

    /// `a / b`, same shapes.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] / &self.vals[b];
        let (ra, rb) = (self.requires[a], self.requires[b]);
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |vals, _y, g| {
                let mut out = Vec::new();
                if ra {
                    out.push((a, g / &vals[b]));
                }
                if rb {
                    let d = g * &vals[a];
                    let b2 = &vals[b] * &vals[b];
                    out.push((b, (&d / &b2).mapv(|x| -x)));
                }
                out
            })),
        )
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let s = T::from_f64(scale);
        let c = T::from_f64(shift);
        let v = self.vals[x].mapv(|v| v * s + c);
        let rx = self.requires[x];
        self.push(
            v,
            rx,
            Some(Box::new(move |_vals, _y, g| vec![(x, g.mapv(|v| v * s))])),
        )
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |vals, _y, g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&vals[x]).for_each(|d, &xv| {
                    if xv <= T::zero() {
                        *d = T::zero();
                    }
                });
                vec![(x, dx)]
            })),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let half = T::from_f64(0.5);
        let one = T::one();
        let a = T::from_f64(A);
        let c = T::from_f64(C);
        let v = self.vals[x].mapv(|v| {
            let u = a * (v + c * v * v * v);
            half * v * (one + u.tanh())
        });
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |vals, _y, g| {
                let mut dx = vals[x].mapv(|v| {
                    let u = a * (v + c * v * v * v);
                    let t = u.tanh();
                    let du = a * (one + T::from_f64(3.0) * c * v * v);
                    half * (one + t) + half * v * (one - t * t) * du
                });
                dx *= g;
                vec![(x, dx)]
            })),
        )
    }

    pub fn tanh_act(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].mapv(|v| v.tanh());
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |_vals, y, g| {
                let one = T::one();
                let mut dx = y.mapv(|t| one - t * t);
                dx *= g;
                vec![(x, dx)]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let v = self.vals[x].mapv(|v| one / (one + (-v).exp()));
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |_vals, y, g| {
                let one = T::one();
                let mut dx = y.mapv(|s| s * (one - s));
                dx *= g;
                vec![(x, dx)]
            })),
        )
    }

    // ---- softmax / normalization ----

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let y = kernels::softmax_last(&self.vals[x]);
        self.push(
            y,
            self.requires[x],
            Some(Box::new(move |_vals, y, g| {
                // dx = y * (g - sum(g*y) per row)
                let t = g * y;
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let ts = t.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                let mut dx = ArrayD::<T>::zeros(y.raw_dim());
                let os = dx.as_slice_mut().unwrap();
                let gs = g.as_slice().unwrap();
                for r in 0..rows {
                    let base = r * d;
                    let mut s = T::zero();
                    for j in 0..d {
                        s = s + ts[base + j];
                    }
                    for j in 0..d {
                        os[base + j] = ys[base + j] * (gs[base + j] - s);
                    }
                }
                vec![(x, dx)]
            })),
        )
    }

    pub fn softmax_axis(&mut self, x: NodeId, ax: usize) -> NodeId {
        let nd = self.vals[x].ndim();
        if ax == nd - 1 {
            return self.softmax_last(x);
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(ax, nd - 1);
        let p = self.permute(x, &perm);
        let s = self.softmax_last(p);
        self.permute(s, &perm)
    }

    /// Layer norm over the last axis with learned affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (y, means, invstds) =
            kernels::layernorm_forward(&self.vals[x], &as1(&self.vals[gamma]), &as1(&self.vals[beta]), eps);
        let (rx, rg, rb) = (self.requires[x], self.requires[gamma], self.requires[beta]);
        self.push(
            y,
            rx || rg || rb,
            Some(Box::new(move |vals, _y, g| {
                let (dx, dgamma, dbeta) =
                    kernels::layernorm_backward(&vals[x], &as1(&vals[gamma]), &means, &invstds, g);
                let mut out = Vec::new();
                if rx {
                    out.push((x, dx));
                }
                if rg {
                    out.push((gamma, dgamma.into_dyn()));
                }
                if rb {
                    out.push((beta, dbeta.into_dyn()));
                }
                out
            })),
        )
    }

    /// Batch norm over (B, H, W) per channel. In train mode the running
    /// buffers in `store` are updated in place as a forward side effect.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &mut ParamStore<T>,
        running_mean: BufferId,
        running_var: BufferId,
        eps: f64,
        momentum: f64,
    ) -> NodeId {
        let (mean, var) = if self.train {
            let (mean, var) = kernels::batch_stats(&as4(&self.vals[x]));
            let dims = self.vals[x].shape();
            let n = (dims[0] * dims[2] * dims[3]) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mom = T::from_f64(momentum);
            let keep = T::from_f64(1.0 - momentum);
            {
                let rm = store.buffer_mut(running_mean);
                ndarray::Zip::from(rm).and(&mean).for_each(|r, &m| *r = keep * *r + mom * m);
            }
            {
                let rv = store.buffer_mut(running_var);
                let ub = T::from_f64(unbias);
                ndarray::Zip::from(rv).and(&var).for_each(|r, &v| *r = keep * *r + mom * v * ub);
            }
            (mean, var)
        } else {
            let mean = as1(store.buffer(running_mean)).to_owned();
            let var = as1(store.buffer(running_var)).to_owned();
            (mean, var)
        };
        let invstd = var.mapv(|v| T::one() / (v + T::from_f64(eps)).sqrt());
        let y = kernels::batchnorm_apply(
            &as4(&self.vals[x]),
            &mean.view(),
            &invstd.view(),
            &as1(&self.vals[gamma]),
            &as1(&self.vals[beta]),
        );
        let (rx, rg, rb) = (self.requires[x], self.requires[gamma], self.requires[beta]);
        let train = self.train;
        self.push(
            y.into_dyn(),
            rx || rg || rb,
            Some(Box::new(move |vals, _y, g| {
                let g4 = as4(g);
                let (dx, dgamma, dbeta) = if train {
                    kernels::batchnorm_train_backward(
                        &as4(&vals[x]),
                        &as1(&vals[gamma]),
                        &mean.view(),
                        &invstd.view(),
                        &g4,
                    )
                } else {
                    kernels::batchnorm_eval_backward(
                        &as4(&vals[x]),
                        &as1(&vals[gamma]),
                        &mean.view(),
                        &invstd.view(),
                        &g4,
                    )
                };
                let mut out = Vec::new();
                if rx {
                    out.push((x, dx.into_dyn()));
                }
                if rg {
                    out.push((gamma, dgamma.into_dyn()));
                }
                if rb {
                    out.push((beta, dbeta.into_dyn()));
                }
                out
            })),
        )
    }

    // ---- convolution / pooling / resize ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let bias = b.map(|bid| as1(&self.vals[bid]).to_owned());
        let y = kernels::conv2d_forward(
            &as4(&self.vals[x]),
            &as4(&self.vals[w]),
            bias.as_ref().map(|b| b.view()).as_ref(),
            stride,
            pad,
        );
        let rx = self.requires[x];
        let rw = self.requires[w];
        let rb = b.map(|bid| self.requires[bid]).unwrap_or(false);
        self.push(
            y.into_dyn(),
            rx || rw || rb,
            Some(Box::new(move |vals, _y, g| {
                let (dx, dw, db) = kernels::conv2d_backward(
                    &as4(&vals[x]),
                    &as4(&vals[w]),
                    &as4(g),
                    stride,
                    pad,
                    rx,
                    rw,
                );
                let mut out = Vec::new();
                if let (true, Some(dx)) = (rx, dx) {
                    out.push((x, dx.into_dyn()));
                }
                if let (true, Some(dw)) = (rw, dw) {
                    out.push((w, dw.into_dyn()));
                }
                if rb {
                    out.push((b.unwrap(), db.into_dyn()));
                }
                out
            })),
        )
    }

    /// Transposed conv, kernel 2 stride 2. Weight layout (Cin, Cout, 2, 2).
    pub fn conv_transpose2(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let bias = b.map(|bid| as1(&self.vals[bid]).to_owned());
        let y = kernels::conv_transpose2_forward(
            &as4(&self.vals[x]),
            &as4(&self.vals[w]),
            bias.as_ref().map(|b| b.view()).as_ref(),
        );
        let rx = self.requires[x];
        let rw = self.requires[w];
        let rb = b.map(|bid| self.requires[bid]).unwrap_or(false);
        self.push(
            y.into_dyn(),
            rx || rw || rb,
            Some(Box::new(move |vals, _y, g| {
                let (dx, dw, db) =
                    kernels::conv_transpose2_backward(&as4(&vals[x]), &as4(&vals[w]), &as4(g), rx, rw);
                let mut out = Vec::new();
                if let (true, Some(dx)) = (rx, dx) {
                    out.push((x, dx.into_dyn()));
                }
                if let (true, Some(dw)) = (rw, dw) {
                    out.push((w, dw.into_dyn()));
                }
                if rb {
                    out.push((b.unwrap(), db.into_dyn()));
                }
                out
            })),
        )
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (y, idx) = kernels::maxpool2_forward(&as4(&self.vals[x]));
        let dims = {
            let s = self.vals[x].shape();
            (s[0], s[1], s[2], s[3])
        };
        self.push(
            y.into_dyn(),
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                vec![(x, kernels::maxpool2_backward(&as4(g), &idx, dims).into_dyn())]
            })),
        )
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> NodeId {
        let y = kernels::bilinear_up_forward(&as4(&self.vals[x]), factor);
        let dims = {
            let s = self.vals[x].shape();
            (s[0], s[1], s[2], s[3])
        };
        self.push(
            y.into_dyn(),
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                vec![(x, kernels::bilinear_up_backward(&as4(g), dims, factor).into_dyn())]
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.vals[x]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: size mismatch");
        let xshape = self.vals[x].shape().to_vec();
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                vec![(x, g.clone().into_shape_with_order(IxDyn(&xshape)).unwrap())]
            })),
        )
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.vals[x]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let axes = axes.to_vec();
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(
                    x,
                    g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned(),
                )]
            })),
        )
    }

    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> NodeId {
        let v = self.vals[x]
            .index_axis(Axis(axis), index)
            .as_standard_layout()
            .to_owned();
        let xshape = self.vals[x].shape().to_vec();
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                let mut dx = ArrayD::<T>::zeros(IxDyn(&xshape));
                dx.index_axis_mut(Axis(axis), index).assign(g);
                vec![(x, dx)]
            })),
        )
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.vals[x]
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let xshape = self.vals[x].shape().to_vec();
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                let mut dx = ArrayD::<T>::zeros(IxDyn(&xshape));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
                vec![(x, dx)]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.vals[p].view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes");
        let parts = parts.to_vec();
        let lens: Vec<usize> = parts.iter().map(|&p| self.vals[p].shape()[axis]).collect();
        let requires = parts.iter().any(|&p| self.requires[p]);
        let reqs: Vec<bool> = parts.iter().map(|&p| self.requires[p]).collect();
        self.push(
            v,
            requires,
            Some(Box::new(move |_vals, _y, g| {
                let mut out = Vec::new();
                let mut off = 0usize;
                for (i, &p) in parts.iter().enumerate() {
                    if reqs[i] {
                        let piece = g
                            .slice_axis(Axis(axis), Slice::from(off..off + lens[i]))
                            .as_standard_layout()
                            .to_owned();
                        out.push((p, piece));
                    }
                    off += lens[i];
                }
                out
            })),
        )
    }

    pub fn stack0(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.vals[p].view()).collect();
        let v = ndarray::stack(Axis(0), &views).expect("stack shapes");
        let parts = parts.to_vec();
        let reqs: Vec<bool> = parts.iter().map(|&p| self.requires[p]).collect();
        let requires = reqs.iter().any(|&r| r);
        self.push(
            v,
            requires,
            Some(Box::new(move |_vals, _y, g| {
                let mut out = Vec::new();
                for (i, &p) in parts.iter().enumerate() {
                    if reqs[i] {
                        out.push((p, g.index_axis(Axis(0), i).as_standard_layout().to_owned()));
                    }
                }
                out
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.vals[x].sum();
        let xshape = self.vals[x].shape().to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                let gs = *g.iter().next().unwrap();
                vec![(x, ArrayD::from_elem(IxDyn(&xshape), gs))]
            })),
        )
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let n = self.vals[x].shape()[axis];
        let s = self.sum_axes(x, &[axis]);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the given axes (ascending, without keepdims).
    pub fn sum_axes(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        debug_assert!(axes.windows(2).all(|w| w[0] < w[1]));
        let mut v = self.vals[x].clone();
        for &ax in axes.iter().rev() {
            v = v.sum_axis(Axis(ax));
        }
        let axes = axes.to_vec();
        let xshape = self.vals[x].shape().to_vec();
        self.push(
            v,
            self.requires[x],
            Some(Box::new(move |_vals, _y, g| {
                let mut ge = g.clone();
                for &ax in axes.iter() {
                    ge = ge.insert_axis(Axis(ax));
                }
                vec![(x, broadcast_to(&ge, &xshape))]
            })),
        )
    }

    pub fn mean_axes(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let n: usize = axes.iter().map(|&a| self.vals[x].shape()[a]).product();
        let s = self.sum_axes(x, axes);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.vals[a].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.vals[b].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let y = av.dot(&bv);
        let (ra, rb) = (self.requires[a], self.requires[b]);
        self.push(
            y.into_dyn(),
            ra || rb,
            Some(Box::new(move |vals, _y, g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let av = vals[a].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let bv = vals[b].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut out = Vec::new();
                if ra {
                    out.push((a, g2.dot(&bv.t()).into_dyn()));
                }
                if rb {
                    out.push((b, av.t().dot(&g2).into_dyn()));
                }
                out
            })),
        )
    }

    /// Batched matmul on (B, H, m, k) x (B, H, k, n).
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.vals[a].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bv = self.vals[b].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (bb, hh, m, _k) = av.dim();
        let n = bv.dim().3;
        let mut y = ndarray::Array4::<T>::zeros((bb, hh, m, n));
        for bi in 0..bb {
            for hi in 0..hh {
                let prod = av
                    .slice(ndarray::s![bi, hi, .., ..])
                    .dot(&bv.slice(ndarray::s![bi, hi, .., ..]));
                y.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&prod);
            }
        }
        let (ra, rb) = (self.requires[a], self.requires[b]);
        self.push(
            y.into_dyn(),
            ra || rb,
            Some(Box::new(move |vals, _y, g| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let av = vals[a].view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let bv = vals[b].view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut out = Vec::new();
                if ra {
                    let mut da = ndarray::Array4::<T>::zeros(av.raw_dim());
                    for bi in 0..bb {
                        for hi in 0..hh {
                            let d = g4
                                .slice(ndarray::s![bi, hi, .., ..])
                                .dot(&bv.slice(ndarray::s![bi, hi, .., ..]).t());
                            da.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&d);
                        }
                    }
                    out.push((a, da.into_dyn()));
                }
                if rb {
                    let mut db = ndarray::Array4::<T>::zeros(bv.raw_dim());
                    for bi in 0..bb {
                        for hi in 0..hh {
                            let d = av
                                .slice(ndarray::s![bi, hi, .., ..])
                                .t()
                                .dot(&g4.slice(ndarray::s![bi, hi, .., ..]));
                            db.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&d);
                        }
                    }
                    out.push((b, db.into_dyn()));
                }
                out
            })),
        )
    }

    /// `x @ w^T + b` over the last axis; `w` is (d_out, d_in).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let din = self.vals[w].shape()[1];
        let dout = self.vals[w].shape()[0];
        let m = self.vals[x].len() / din;
        let x2 = self.vals[x].to_shape((m, din)).unwrap();
        let w2 = self.vals[w].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y2 = x2.dot(&w2.t());
        if let Some(bid) = b {
            y2 += &as1(&self.vals[bid]);
        }
        let mut yshape = self.vals[x].shape().to_vec();
        *yshape.last_mut().unwrap() = dout;
        let y = y2.into_shape_with_order(IxDyn(&yshape)).unwrap();
        let rx = self.requires[x];
        let rw = self.requires[w];
        let rb = b.map(|bid| self.requires[bid]).unwrap_or(false);
        self.push(
            y,
            rx || rw || rb,
            Some(Box::new(move |vals, _y, g| {
                let g2 = g.to_shape((m, dout)).unwrap();
                let w2 = vals[w].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let x2 = vals[x].to_shape((m, din)).unwrap();
                let mut out = Vec::new();
                if rx {
                    let dx = g2.dot(&w2);
                    out.push((x, dx.into_shape_with_order(vals[x].raw_dim()).unwrap()));
                }
                if rw {
                    out.push((w, g2.t().dot(&x2).into_dyn()));
                }
                if rb {
                    out.push((b.unwrap(), g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Registry};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    /// Scalar readout: sum(y * fixed pseudo-random weights).
    fn readout(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(randn(&g.shape(y).to_vec(), &mut rng));
        let prod = g.mul(y, w);
        g.sum_all(prod)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = (a.abs() + b.abs()).max(1e-7);
        (a - b).abs() / denom
    }

    /// Central-difference check of d(loss)/d(inputs[i]) for every element.
    fn check_grads<F>(inputs: &[ArrayD<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let run = |arrs: &[ArrayD<f64>]| -> (f64, Vec<Option<ArrayD<f64>>>, Vec<NodeId>) {
            let mut g = Graph::<f64>::new(true);
            let ids: Vec<NodeId> = arrs.iter().map(|a| g.leaf(a.clone())).collect();
            let loss = build(&mut g, &ids);
            let grads = g.backward(loss);
            (g.scalar(loss), grads, ids)
        };
        let (_, grads, ids) = run(inputs);
        let h = 1e-5;
        for (i, arr) in inputs.iter().enumerate() {
            let analytic = grads[ids[i]].as_ref().expect("missing gradient");
            for idx in 0..arr.len() {
                let mut plus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[i].as_slice_mut().unwrap()[idx] -= h;
                let lp = run(&plus).0;
                let lm = run(&minus).0;
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                assert!(
                    rel_err(fd, an) < tol || (fd.abs() < 1e-7 && an.abs() < 1e-7),
                    "input {i} elem {idx}: fd={fd:.10e} analytic={an:.10e}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&[2, 3], &mut rng);
        let b = randn(&[2, 3], &mut rng);
        check_grads(&[a.clone(), b.clone()], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let m = g.mul(s, ids[0]);
            let d = g.div(m, ids[1]);
            let t = g.tanh_act(d);
            readout(g, t, 11)
        }, 1e-6);
        // broadcast add/mul: (2,3) with (3,)
        let v = randn(&[3], &mut rng);
        check_grads(&[a.clone(), v], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let m = g.mul(s, ids[1]);
            readout(g, m, 12)
        }, 1e-6);
        check_grads(&[a], |g, ids| {
            let r = g.relu(ids[0]);
            let e = g.gelu(r);
            let s = g.sigmoid(e);
            readout(g, s, 13)
        }, 1e-5);
    }

    #[test]
    fn grad_softmax_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[2, 4], &mut rng);
        check_grads(&[x.clone()], |g, ids| {
            let y = g.softmax_last(ids[0]);
            readout(g, y, 21)
        }, 1e-6);
        let x4 = randn(&[2, 3, 2, 2], &mut rng);
        check_grads(&[x4], |g, ids| {
            let y = g.softmax_axis(ids[0], 1);
            readout(g, y, 22)
        }, 1e-6);
        let gamma = randn(&[4], &mut rng);
        let beta = randn(&[4], &mut rng);
        check_grads(&[x, gamma, beta], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            readout(g, y, 23)
        }, 1e-5);
    }

    #[test]
    fn grad_batch_norm_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[2, 3, 2, 2], &mut rng);
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let mut reg = Registry::new();
        let rm = reg.buffer("rm", &[3], 0.0);
        let rv = reg.buffer("rv", &[3], 1.0);

        for train in [true, false] {
            let run = |arrs: &[ArrayD<f64>]| -> (f64, Vec<Option<ArrayD<f64>>>, Vec<NodeId>) {
                let mut store = crate::params::ParamStore::<f64>::init(
                    &reg,
                    &mut ChaCha8Rng::seed_from_u64(0),
                );
                let mut g = Graph::<f64>::new(train);
                let ids: Vec<NodeId> = arrs.iter().map(|a| g.leaf(a.clone())).collect();
                let y = g.batch_norm(ids[0], ids[1], ids[2], &mut store, rm, rv, 1e-5, 0.1);
                let mut rng = ChaCha8Rng::seed_from_u64(31);
                let w = g.constant(randn(&g.shape(y).to_vec(), &mut rng));
                let p = g.mul(y, w);
                let loss = g.sum_all(p);
                let grads = g.backward(loss);
                (g.scalar(loss), grads, ids)
            };
            let inputs = vec![x.clone(), gamma.clone(), beta.clone()];
            let (_, grads, ids) = run(&inputs);
            let h = 1e-5;
            for i in 0..inputs.len() {
                let analytic = grads[ids[i]].as_ref().unwrap();
                for idx in 0..inputs[i].len() {
                    let mut plus = inputs.clone();
                    plus[i].as_slice_mut().unwrap()[idx] += h;
                    let mut minus = inputs.clone();
                    minus[i].as_slice_mut().unwrap()[idx] -= h;
                    let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                    let an = analytic.as_slice().unwrap()[idx];
                    assert!(
                        rel_err(fd, an) < 1e-5 || (fd.abs() < 1e-7 && an.abs() < 1e-7),
                        "train={train} input {i} elem {idx}: fd={fd:.8e} an={an:.8e}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_conv_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&[2, 2, 4, 4], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        check_grads(&[x.clone(), w, b.clone()], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1);
            readout(g, y, 41)
        }, 1e-5);
        // strided patch conv
        let wp = randn(&[3, 2, 2, 2], &mut rng);
        check_grads(&[x.clone(), wp, b.clone()], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 0);
            readout(g, y, 42)
        }, 1e-5);
        // transposed conv
        let wt = randn(&[2, 3, 2, 2], &mut rng);
        check_grads(&[x.clone(), wt, b], |g, ids| {
            let y = g.conv_transpose2(ids[0], ids[1], Some(ids[2]));
            readout(g, y, 43)
        }, 1e-5);
        check_grads(&[x.clone()], |g, ids| {
            let y = g.maxpool2(ids[0]);
            readout(g, y, 44)
        }, 1e-5);
        check_grads(&[x], |g, ids| {
            let y = g.upsample_bilinear(ids[0], 2);
            readout(g, y, 45)
        }, 1e-5);
    }

    #[test]
    fn grad_shape_and_reduce_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[2, 3, 4], &mut rng);
        let y = randn(&[2, 3, 4], &mut rng);
        check_grads(&[x.clone(), y], |g, ids| {
            let c = g.concat(1, &[ids[0], ids[1]]);
            let p = g.permute(c, &[1, 0, 2]);
            let r = g.reshape(p, &[6, 2, 4]);
            let n = g.narrow(r, 0, 1, 3);
            let s = g.select(n, 2, 1);
            readout(g, s, 51)
        }, 1e-6);
        check_grads(&[x.clone()], |g, ids| {
            let m = g.mean_axes(ids[0], &[0, 2]);
            readout(g, m, 52)
        }, 1e-6);
        check_grads(&[x.clone()], |g, ids| {
            let s = g.sum_axes(ids[0], &[1]);
            readout(g, s, 53)
        }, 1e-6);
        let parts = vec![randn(&[3], &mut rng), randn(&[3], &mut rng)];
        check_grads(&parts, |g, ids| {
            let s = g.stack0(ids);
            let m = g.mean_axis(s, 0);
            readout(g, m, 54)
        }, 1e-6);
    }

    #[test]
    fn grad_matmul_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[4, 2], &mut rng);
        check_grads(&[a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            readout(g, y, 61)
        }, 1e-6);
        let a4 = randn(&[2, 2, 3, 4], &mut rng);
        let b4 = randn(&[2, 2, 4, 3], &mut rng);
        check_grads(&[a4, b4], |g, ids| {
            let y = g.batch_matmul(ids[0], ids[1]);
            readout(g, y, 62)
        }, 1e-6);
        let x = randn(&[2, 3, 4], &mut rng);
        let w = randn(&[5, 4], &mut rng);
        let bias = randn(&[5], &mut rng);
        check_grads(&[x, w, bias], |g, ids| {
            let y = g.linear(ids[0], ids[1], Some(ids[2]));
            readout(g, y, 63)
        }, 1e-6);
    }

    #[test]
    fn constants_produce_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new(true);
        let a = g.leaf(randn(&[2, 2], &mut rng));
        let c = g.constant(randn(&[2, 2], &mut rng));
        let m = g.mul(a, c);
        let loss = g.sum_all(m);
        let grads = g.backward(loss);
        assert!(grads[a].is_some());
        assert!(grads[c].is_none());
    }

    #[test]
    fn param_binding_accumulates() {
        let mut reg = Registry::new();
        let p = reg.param("p", &[2], Init::Ones);
        let mut store = crate::params::ParamStore::<f64>::init(&reg, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::<f64>::new(true);
        // use the same param twice; gradients must sum
        let n1 = g.param(&store, p);
        let n2 = g.param(&store, p);
        let s = g.add(n1, n2);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        g.accumulate_into(&grads, &mut store);
        assert_eq!(store.grad(p).as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn gelu_matches_reference_values() {
        // tanh-approximation reference points
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.gelu(x);
        let v = g.value(y);
        assert!((v[[0]] - (-0.15880800939172324)).abs() < 1e-12);
        assert!(v[[1]].abs() < 1e-15);
        assert!((v[[2]] - 1.954597694087775).abs() < 1e-12);
    }
}
