//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt on every forward call. Nodes are appended in
//! evaluation order, so the node vector is already topologically sorted and
//! the backward sweep is a single reverse pass. The last node pushed is the
//! terminal and must be a scalar.

use std::sync::Arc;

use super::params::{Layout, ParamVector};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param {
        offset: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    layout: Arc<Layout>,
}

impl Tape {
    /// Empty tape whose gradients are laid out per `layout`.
    pub fn new(layout: Arc<Layout>) -> Self {
        Self {
            nodes: Vec::new(),
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Records the named parameter block of `params` as a differentiable leaf.
    pub fn param(&mut self, params: &ParamVector, name: &str) -> Result<Var> {
        if params.layout().as_ref() != self.layout.as_ref() {
            return Err(Error::Shape("parameter vector layout differs from tape layout".into()));
        }
        let entry = self
            .layout
            .entry(name)
            .ok_or_else(|| Error::Shape(format!("no parameter block named `{name}`")))?
            .clone();
        let value = Tensor::new(entry.shape.clone(), params.as_slice()[entry.range()].to_vec())?;
        Ok(self.push(value, Op::Param { offset: entry.offset }, true))
    }

    /// Records the whole parameter vector as one flat leaf.
    pub fn param_all(&mut self, params: &ParamVector) -> Result<Var> {
        if params.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "tape expects {} parameters, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        let value = Tensor::new(vec![params.len()], params.as_slice().to_vec())?;
        Ok(self.push(value, Op::Param { offset: 0 }, true))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `[n, ...] -> [n, prod(...)]`
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a)[0];
        let k = self.value(a).len() / n;
        self.reshape(a, vec![n, k])
    }

    /// Fully-connected layer: `x [n, in]`, `w [out, in]`, `b [out]` to `[n, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(Error::Shape(format!("dense: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            let xr = &xd[i * inp..(i + 1) * inp];
            let yr = &mut y[i * out..(i + 1) * out];
            for (o, yo) in yr.iter_mut().enumerate() {
                let wr = &wd[o * inp..(o + 1) * inp];
                *yo = bd[o] + super::params::dot(wr, xr);
            }
        }
        let t = Tensor::new(vec![n, out], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Dense { x, w, b }, rg))
    }

    /// Valid (unpadded) stride-1 convolution:
    /// `x [n, c, h, w]`, `w [o, c, kh, kw]`, `b [o]` to `[n, o, h-kh+1, w-kw+1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != [ws[0]] || ws[2] > xs[2] || ws[3] > xs[3] {
            return Err(Error::Shape(format!("conv2d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let g = ConvGeom::new(xs, ws);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; g.n * g.o * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.o {
                let yo = &mut y[g.y_idx(n, o, 0, 0)..g.y_idx(n, o, 0, 0) + g.oh * g.ow];
                yo.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..g.c {
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let wv = wd[g.w_idx(o, c, i, j)];
                            for yy in 0..g.oh {
                                let xs0 = g.x_idx(n, c, yy + i, j);
                                let xr = &xd[xs0..xs0 + g.ow];
                                let yr = &mut yo[yy * g.ow..(yy + 1) * g.ow];
                                for (yv, xv) in yr.iter_mut().zip(xr) {
                                    *yv += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![g.n, g.o, g.oh, g.ow], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv2d { x, w, b }, rg))
    }

    /// Non-overlapping `size x size` max pooling over `[n, c, h, w]`;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::Shape(format!("maxpool2d({size}) on {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for py in 0..oh {
                for px in 0..ow {
                    let mut best = base + py * size * w + px * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (py * size + dy) * w + px * size + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Mean softmax cross-entropy of `logits [n, k]` against (possibly soft)
    /// row-major `targets` of length `n * k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || targets.len() != ls[0] * ls[1] {
            return Err(Error::Shape(format!(
                "cross-entropy: logits {ls:?} with {} target values",
                targets.len()
            )));
        }
        let (n, k) = (ls[0], ls[1]);
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let zr = &z[i * k..(i + 1) * k];
            let m = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + zr.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let tr = &targets[i * k..(i + 1) * k];
            for j in 0..k {
                probs[i * k + j] = (zr[j] - lse).exp();
                if tr[j] != 0.0 {
                    total -= tr[j] * (zr[j] - lse);
                }
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy { logits, targets, probs },
            rg,
        ))
    }

    /// Reverse sweep from the terminal (last) node; returns d terminal / d params.
    pub fn backward(&self) -> Result<ParamVector> {
        let last = self
            .nodes
            .last()
            .ok_or_else(|| Error::Usage("backward on an empty tape".into()))?;
        if last.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar terminal, got shape {:?}",
                last.value.shape()
            )));
        }
        let mut out = vec![0.0; self.layout.len()];
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[self.nodes.len() - 1] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (o, v) in out[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, || zip(&g, bv, |x, y| x * y));
                    self.accumulate(&mut grads, *b, || zip(&g, av, |x, y| x * y));
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, || g.iter().map(|v| v * c).collect());
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, || vec![g[0]; n]);
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    self.accumulate(&mut grads, *a, || zip(&g, av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
                Op::Reshape(a) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                }
                Op::Dense { x, w, b } => self.dense_backward(&mut grads, &g, *x, *w, *b),
                Op::Conv2d { x, w, b } => self.conv_backward(&mut grads, &g, *x, *w, *b),
                Op::MaxPool2d { x, argmax } => {
                    let n = self.value(*x).len();
                    self.accumulate(&mut grads, *x, || {
                        let mut dx = vec![0.0; n];
                        for (gi, &src) in g.iter().zip(argmax) {
                            dx[src] += gi;
                        }
                        dx
                    });
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let s = self.shape(*logits);
                    let (n, k) = (s[0], s[1]);
                    let scale = g[0] / n as f64;
                    self.accumulate(&mut grads, *logits, || {
                        let mut dz = vec![0.0; n * k];
                        for i in 0..n {
                            let tr = &targets[i * k..(i + 1) * k];
                            let mass: f64 = tr.iter().sum();
                            for j in 0..k {
                                dz[i * k + j] = scale * (probs[i * k + j] * mass - tr[j]);
                            }
                        }
                        dz
                    });
                }
            }
        }
        ParamVector::from_vec(Arc::clone(&self.layout), out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, make: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let d = make();
        match &mut grads[target.0] {
            Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(d),
        }
    }

    fn dense_backward(&self, grads: &mut [Option<Vec<f64>>], g: &[f64], x: Var, w: Var, b: Var) {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        self.accumulate(grads, x, || {
            let mut dx = vec![0.0; n * inp];
            for i in 0..n {
                let dxr = &mut dx[i * inp..(i + 1) * inp];
                for o in 0..out {
                    let go = g[i * out + o];
                    if go == 0.0 {
                        continue;
                    }
                    for (d, wv) in dxr.iter_mut().zip(&wd[o * inp..(o + 1) * inp]) {
                        *d += go * wv;
                    }
                }
            }
            dx
        });
        self.accumulate(grads, w, || {
            let mut dw = vec![0.0; out * inp];
            for i in 0..n {
                let xr = &xd[i * inp..(i + 1) * inp];
                for o in 0..out {
                    let go = g[i * out + o];
                    if go == 0.0 {
                        continue;
                    }
                    for (d, xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                        *d += go * xv;
                    }
                }
            }
            dw
        });
        self.accumulate(grads, b, || {
            let mut db = vec![0.0; out];
            for i in 0..n {
                for (d, gv) in db.iter_mut().zip(&g[i * out..(i + 1) * out]) {
                    *d += gv;
                }
            }
            db
        });
    }

    fn conv_backward(&self, grads: &mut [Option<Vec<f64>>], g: &[f64], x: Var, w: Var, b: Var) {
        let geom = ConvGeom::new(self.shape(x), self.shape(w));
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let plane = geom.oh * geom.ow;
        self.accumulate(grads, b, || {
            let mut db = vec![0.0; geom.o];
            for n in 0..geom.n {
                for (o, d) in db.iter_mut().enumerate() {
                    let s = geom.y_idx(n, o, 0, 0);
                    *d += g[s..s + plane].iter().sum::<f64>();
                }
            }
            db
        });
        self.accumulate(grads, w, || {
            let mut dw = vec![0.0; wd.len()];
            for n in 0..geom.n {
                for o in 0..geom.o {
                    let gs = geom.y_idx(n, o, 0, 0);
                    let go = &g[gs..gs + plane];
                    for c in 0..geom.c {
                        for i in 0..geom.kh {
                            for j in 0..geom.kw {
                                let mut acc = 0.0;
                                for yy in 0..geom.oh {
                                    let xs0 = geom.x_idx(n, c, yy + i, j);
                                    let xr = &xd[xs0..xs0 + geom.ow];
                                    let gr = &go[yy * geom.ow..(yy + 1) * geom.ow];
                                    acc += super::params::dot(xr, gr);
                                }
                                dw[geom.w_idx(o, c, i, j)] += acc;
                            }
                        }
                    }
                }
            }
            dw
        });
        self.accumulate(grads, x, || {
            let mut dx = vec![0.0; xd.len()];
            for n in 0..geom.n {
                for o in 0..geom.o {
                    let gs = geom.y_idx(n, o, 0, 0);
                    let go = &g[gs..gs + plane];
                    for c in 0..geom.c {
                        for i in 0..geom.kh {
                            for j in 0..geom.kw {
                                let wv = wd[geom.w_idx(o, c, i, j)];
                                for yy in 0..geom.oh {
                                    let xs0 = geom.x_idx(n, c, yy + i, j);
                                    let gr = &go[yy * geom.ow..(yy + 1) * geom.ow];
                                    for (d, gv) in dx[xs0..xs0 + geom.ow].iter_mut().zip(gr) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx
        });
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        Self {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh: xs[2] - ws[2] + 1,
            ow: xs[3] - ws[3] + 1,
        }
    }

    fn x_idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    fn w_idx(&self, o: usize, c: usize, i: usize, j: usize) -> usize {
        ((o * self.c + c) * self.kh + i) * self.kw + j
    }

    fn y_idx(&self, n: usize, o: usize, y: usize, x: usize) -> usize {
        ((n * self.o + o) * self.oh + y) * self.ow + x
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
