//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] borrows the [`ParamStore`] immutably for the duration of a
//! forward pass. Parameter gradients and running-statistic updates are handed
//! back to the caller, who applies them after the graph is dropped.

use std::collections::HashMap;

use super::kernels::{
    col2im, conv_direct, conv_direct_input_grad, conv_direct_weight_grad, gemm, im2col,
    prefers_direct, resize_plane, resize_plane_backward, AxisTaps, ConvGeometry,
};
use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization; running-stat updates are recorded.
    Train,
    /// Running statistics for normalization.
    Eval,
}

/// Batch statistics observed by one normalization layer during a train-mode pass.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub batch_mean: Vec<f32>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f32>,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Subsample {
        x: Var,
        factor: usize,
    },
    Resize {
        x: Var,
        ty: AxisTaps,
        tx: AxisTaps,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddScalar(Var),
    MulPlane {
        x: Var,
        m: Var,
    },
    Concat(Vec<Var>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    norm_updates: Vec<NormUpdate>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            norm_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.param(*id).value,
        }
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.value(v).dims()
    }

    pub fn norm_updates(&self) -> &[NormUpdate] {
        &self.norm_updates
    }

    pub fn into_norm_updates(self) -> Vec<NormUpdate> {
        self.norm_updates
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: self.store.param(id).trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, cin, h, wd] = self.dims(x);
        let [cout, wcin, k, k2] = self.dims(w);
        assert_eq!(cin, wcin, "conv input channels {cin} vs kernel {wcin}");
        assert_eq!(k, k2, "square kernels only");
        let geom = ConvGeometry {
            in_channels: cin,
            in_h: h,
            in_w: wd,
            kernel: k,
            stride,
            pad,
        };
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "conv input smaller than kernel"
        );
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let ohw = oh * ow;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let rows = geom.col_rows();
            let direct = prefers_direct(&geom, cout);
            let mut col = if geom.is_pointwise() || direct {
                Vec::new()
            } else {
                vec![0.0; rows * ohw]
            };
            let out_data = out.data_mut();
            for ni in 0..n {
                let src = xv.sample(ni);
                if direct {
                    conv_direct(
                        src,
                        &geom,
                        wv,
                        cout,
                        &mut out_data[ni * cout * ohw..(ni + 1) * cout * ohw],
                    );
                    continue;
                }
                let colm: &[f32] = if geom.is_pointwise() {
                    src
                } else {
                    im2col(src, &geom, &mut col);
                    &col
                };
                let dst = &mut out_data[ni * cout * ohw..(ni + 1) * cout * ohw];
                gemm(cout, rows, ohw, wv, false, colm, false, dst, 0.0);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for ni in 0..n {
                    for (co, &bias) in bv.iter().enumerate() {
                        let s = (ni * cout + co) * ohw;
                        for v in &mut out_data[s..s + ohw] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, geom }, needs)
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean_buf: BufferId,
        var_buf: BufferId,
        eps: f32,
    ) -> Var {
        let [n, c, h, w] = self.dims(x);
        let plane = h * w;
        let m = (n * plane) as f64;
        let batch_stats = self.mode == Mode::Train;
        let (mean, inv_std) = {
            let xv = self.value(x);
            if batch_stats {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                let mut var_unbiased = vec![0.0f32; c];
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        s += xv.channel(ni, ci).iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0f64;
                    for ni in 0..n {
                        ss += xv
                            .channel(ni, ci)
                            .iter()
                            .map(|&v| (v as f64 - mu) * (v as f64 - mu))
                            .sum::<f64>();
                    }
                    mean[ci] = mu as f32;
                    var[ci] = (ss / m) as f32;
                    var_unbiased[ci] = if m > 1.0 {
                        (ss / (m - 1.0)) as f32
                    } else {
                        var[ci]
                    };
                }
                self.norm_updates.push(NormUpdate {
                    mean_buf,
                    var_buf,
                    batch_mean: mean.clone(),
                    batch_var: var_unbiased,
                });
                let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv_std)
            } else {
                let rm = self.store.buffer(mean_buf).data().to_vec();
                let inv_std: Vec<f32> = self
                    .store
                    .buffer(var_buf)
                    .data()
                    .iter()
                    .map(|&v| 1.0 / (v + eps).sqrt())
                    .collect();
                (rm, inv_std)
            }
        };
        let mut out = Tensor::zeros([n, c, h, w]);
        {
            let xv = self.value(x);
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let scale = g[ci] * inv_std[ci];
                    let shift = b[ci] - mean[ci] * scale;
                    let s = (ni * c + ci) * plane;
                    for (o, &v) in od[s..s + plane].iter_mut().zip(xv.channel(ni, ci)) {
                        *o = v * scale + shift;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.ng(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.ng(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.dims(x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xv = self.value(x);
            let od = out.data_mut();
            let mut o = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let src = xv.channel(ni, ci);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (2 * oy) * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = (2 * oy + dy) * w + 2 * ox + dx;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                            od[o] = src[best];
                            argmax[o] = best as u32;
                            o += 1;
                        }
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Keep every `factor`-th row and column, starting at the first.
    pub fn subsample(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let [n, c, h, w] = self.dims(x);
        let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
        let xv = self.value(x);
        let out = Tensor::from_fn([n, c, oh, ow], |ni, ci, y, xx| {
            xv.at(ni, ci, y * factor, xx * factor)
        });
        let needs = self.ng(x);
        self.push(out, Op::Subsample { x, factor }, needs)
    }

    /// Bilinear resize to `out_h x out_w` (half-pixel centers).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let [n, c, h, w] = self.dims(x);
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let ty = AxisTaps::new(h, out_h);
        let tx = AxisTaps::new(w, out_w);
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        {
            let xv = self.value(x);
            let plane = out_h * out_w;
            for (i, dst) in out.data_mut().chunks_exact_mut(plane).enumerate() {
                resize_plane(xv.channel(i / c, i % c), w, &ty, &tx, dst);
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::Resize { x, ty, tx }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "sub shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v + s);
        let needs = self.ng(x);
        self.push(out, Op::AddScalar(x), needs)
    }

    /// `x * m` with a single-channel `m` broadcast over the channels of `x`.
    pub fn mul_plane(&mut self, x: Var, m: Var) -> Var {
        let [n, c, h, w] = self.dims(x);
        assert_eq!(
            self.dims(m),
            [n, 1, h, w],
            "mul_plane expects a single-channel modulator"
        );
        let mut out = self.value(x).clone();
        {
            let mv = self.value(m);
            let plane = h * w;
            for ni in 0..n {
                let mp = mv.channel(ni, 0);
                for ci in 0..c {
                    let s = (ni * c + ci) * plane;
                    for (o, &f) in out.data_mut()[s..s + plane].iter_mut().zip(mp) {
                        *o *= f;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(m);
        self.push(out, Op::MulPlane { x, m }, needs)
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.dims(parts[0]);
        let c_total: usize = parts
            .iter()
            .map(|&p| {
                let d = self.dims(p);
                assert_eq!([d[0], d[2], d[3]], [n, h, w], "concat shape mismatch");
                d[1]
            })
            .sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for ni in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(ni));
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec([n, c_total, h, w], data),
            Op::Concat(parts.to_vec()),
            needs,
        )
    }

    /// Reverse pass seeded with `d(objective)/d(var)` for each seed.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.dims(v), g.dims(), "seed gradient shape mismatch");
            accumulate(&mut grads[v.0], g);
        }
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::Conv { x, w, b, geom } => self.conv_backward(&g, *x, *w, *b, geom, &mut grads),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => self.bn_backward(
                    &g,
                    *x,
                    *gamma,
                    *beta,
                    mean,
                    inv_std,
                    *batch_stats,
                    &mut grads,
                ),
                Op::Relu(x) => {
                    if self.ng(*x) {
                        let y = self.value(Var(i)).data();
                        let mut d = g;
                        for (dv, &yv) in d.data_mut().iter_mut().zip(y) {
                            if yv <= 0.0 {
                                *dv = 0.0;
                            }
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.ng(*x) {
                        let y = self.value(Var(i)).data();
                        let mut d = g;
                        for (dv, &yv) in d.data_mut().iter_mut().zip(y) {
                            *dv *= yv * (1.0 - yv);
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.ng(*x) {
                        let [n, c, h, w] = self.dims(*x);
                        let mut d = Tensor::zeros([n, c, h, w]);
                        let plane_out = g.plane();
                        let dd = d.data_mut();
                        for (o, (&gv, &am)) in g.data().iter().zip(argmax).enumerate() {
                            let base = (o / plane_out) * h * w;
                            dd[base + am as usize] += gv;
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::Subsample { x, factor } => {
                    if self.ng(*x) {
                        let [n, c, h, w] = self.dims(*x);
                        let mut d = Tensor::zeros([n, c, h, w]);
                        let [_, _, oh, ow] = g.dims();
                        for ni in 0..n {
                            for ci in 0..c {
                                for y in 0..oh {
                                    for xx in 0..ow {
                                        let di = d.index(ni, ci, y * factor, xx * factor);
                                        d.data_mut()[di] = g.at(ni, ci, y, xx);
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::Resize { x, ty, tx } => {
                    if self.ng(*x) {
                        let [n, c, h, w] = self.dims(*x);
                        let mut d = Tensor::zeros([n, c, h, w]);
                        let plane = h * w;
                        for (pi, dst) in d.data_mut().chunks_exact_mut(plane).enumerate() {
                            resize_plane_backward(g.channel(pi / c, pi % c), w, ty, tx, dst);
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], g.map(|v| -v));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddScalar(x) => {
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::MulPlane { x, m } => {
                    let [n, c, h, w] = g.dims();
                    let plane = h * w;
                    if self.ng(*m) {
                        let xv = self.value(*x);
                        let mut dm = Tensor::zeros([n, 1, h, w]);
                        for ni in 0..n {
                            let dst = &mut dm.data_mut()[ni * plane..(ni + 1) * plane];
                            for ci in 0..c {
                                for ((o, &gv), &xv) in dst
                                    .iter_mut()
                                    .zip(g.channel(ni, ci))
                                    .zip(xv.channel(ni, ci))
                                {
                                    *o += gv * xv;
                                }
                            }
                        }
                        accumulate(&mut grads[m.0], dm);
                    }
                    if self.ng(*x) {
                        let mv = self.value(*m);
                        let mut dx = g;
                        for ni in 0..n {
                            let mp = mv.channel(ni, 0);
                            for ci in 0..c {
                                let s = (ni * c + ci) * plane;
                                for (o, &f) in dx.data_mut()[s..s + plane].iter_mut().zip(mp) {
                                    *o *= f;
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.dims();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.dims(p)[1];
                        if self.ng(p) {
                            let mut data = Vec::with_capacity(n * c * plane);
                            for ni in 0..n {
                                let s = g.index(ni, offset, 0, 0);
                                data.extend_from_slice(&g.data()[s..s + c * plane]);
                            }
                            accumulate(&mut grads[p.0], Tensor::from_vec([n, c, h, w], data));
                        }
                        offset += c;
                    }
                }
            }
        }
        out
    }

    fn conv_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeometry,
        grads: &mut [Option<Tensor>],
    ) {
        let [n, cout, oh, ow] = g.dims();
        let ohw = oh * ow;
        let rows = geom.col_rows();
        if let Some(b) = b {
            if self.ng(b) {
                let mut db = Tensor::zeros([1, cout, 1, 1]);
                for ni in 0..n {
                    for co in 0..cout {
                        db.data_mut()[co] += g.channel(ni, co).iter().sum::<f32>();
                    }
                }
                accumulate(&mut grads[b.0], db);
            }
        }
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        if !need_w && !need_x {
            return;
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut dw = need_w.then(|| Tensor::zeros(wv.dims()));
        let mut dx = need_x.then(|| Tensor::zeros(xv.dims()));
        let in_sz = xv.sample(0).len();
        if prefers_direct(geom, cout) {
            for ni in 0..n {
                let gy = g.sample(ni);
                if let Some(dw) = dw.as_mut() {
                    conv_direct_weight_grad(gy, geom, xv.sample(ni), cout, dw.data_mut());
                }
                if let Some(dx) = dx.as_mut() {
                    conv_direct_input_grad(
                        gy,
                        geom,
                        wv.data(),
                        cout,
                        &mut dx.data_mut()[ni * in_sz..(ni + 1) * in_sz],
                    );
                }
            }
        }
        let dense = !prefers_direct(geom, cout);
        let mut col = vec![
            0.0;
            if geom.is_pointwise() || !dense {
                0
            } else {
                rows * ohw
            }
        ];
        let mut dcol = vec![
            0.0;
            if need_x && !geom.is_pointwise() && dense {
                rows * ohw
            } else {
                0
            }
        ];
        for ni in (0..n).filter(|_| dense) {
            let gy = g.sample(ni);
            if let Some(dw) = dw.as_mut() {
                let colm: &[f32] = if geom.is_pointwise() {
                    xv.sample(ni)
                } else {
                    im2col(xv.sample(ni), geom, &mut col);
                    &col
                };
                gemm(cout, ohw, rows, gy, false, colm, true, dw.data_mut(), 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[ni * in_sz..(ni + 1) * in_sz];
                if geom.is_pointwise() {
                    gemm(rows, cout, ohw, wv.data(), true, gy, false, dst, 0.0);
                } else {
                    gemm(rows, cout, ohw, wv.data(), true, gy, false, &mut dcol, 0.0);
                    col2im(&dcol, geom, dst);
                }
            }
        }
        if let Some(dw) = dw {
            accumulate(&mut grads[w.0], dw);
        }
        if let Some(dx) = dx {
            accumulate(&mut grads[x.0], dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        g: &Tensor,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv_std: &[f32],
        batch_stats: bool,
        grads: &mut [Option<Tensor>],
    ) {
        let [n, c, h, w] = g.dims();
        let plane = h * w;
        let m = (n * plane) as f32;
        let xv = self.value(x);
        let gam = self.value(gamma).data();
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                for (&dy, &xi) in g.channel(ni, ci).iter().zip(xv.channel(ni, ci)) {
                    let xhat = (xi - mean[ci]) * inv_std[ci];
                    sum_dy[ci] += dy as f64;
                    sum_dy_xhat[ci] += (dy * xhat) as f64;
                }
            }
        }
        if self.ng(gamma) {
            let t = Tensor::from_vec(
                [1, c, 1, 1],
                sum_dy_xhat.iter().map(|&v| v as f32).collect(),
            );
            accumulate(&mut grads[gamma.0], t);
        }
        if self.ng(beta) {
            let t = Tensor::from_vec([1, c, 1, 1], sum_dy.iter().map(|&v| v as f32).collect());
            accumulate(&mut grads[beta.0], t);
        }
        if self.ng(x) {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for ni in 0..n {
                for ci in 0..c {
                    let k = gam[ci] * inv_std[ci];
                    let s = (ni * c + ci) * plane;
                    let dst = &mut dx.data_mut()[s..s + plane];
                    if batch_stats {
                        let mdy = sum_dy[ci] as f32 / m;
                        let mdyx = sum_dy_xhat[ci] as f32 / m;
                        for ((o, &dy), &xi) in dst
                            .iter_mut()
                            .zip(g.channel(ni, ci))
                            .zip(xv.channel(ni, ci))
                        {
                            let xhat = (xi - mean[ci]) * inv_std[ci];
                            *o = k * (dy - mdy - xhat * mdyx);
                        }
                    } else {
                        for (o, &dy) in dst.iter_mut().zip(g.channel(ni, ci)) {
                            *o = k * dy;
                        }
                    }
                }
            }
            accumulate(&mut grads[x.0], dx);
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Parameter gradients in id order, for deterministic iteration.
    pub fn sorted_params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut v: Vec<_> = self.params().collect();
        v.sort_by_key(|(id, _)| *id);
        v
    }
}
