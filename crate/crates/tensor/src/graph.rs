//! Define-by-run tape. Every op evaluates eagerly and records enough to
//! replay its vector-Jacobian product in [`Graph::backward`].

use crate::conv::{conv2d_backward, conv2d_forward};
use crate::tensor::{gemm, Element, Tensor};
use crate::warp;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Clamp(Var, T, T),
    ChannelAffine(Var, Vec<T>),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    CwMargin {
        logits: Var,
        /// `(true class, strongest other class)` for samples whose margin
        /// is above `-kappa`; `None` where the clamp is active.
        active: Vec<Option<(usize, usize)>>,
    },
    StraightThrough(Var),
    Warp {
        img: Var,
        flow: Var,
    },
    FlowSmoothness(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// A tape of tensor operations.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Graph::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when `v` does not influence the loss or is not tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), tracked)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        self.unary(a, v, Op::AddConst(a))
    }

    /// `a * c` elementwise for a constant tensor `c` of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.unary(a, v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    /// Clips to `[lo, hi]`. The gradient passes where the input lies in the
    /// closed interval and is zero outside it.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    /// Per-channel `x * scale[c] + shift[c]` on an NCHW tensor.
    pub fn channel_affine(&mut self, a: Var, scale: &[T], shift: &[T]) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        assert!(scale.len() == c && shift.len() == c, "channel_affine length mismatch");
        let mut v = self.value(a).clone();
        for (i, chunk) in v.data_mut().chunks_mut(h * w).enumerate().take(n * c) {
            let ch = i % c;
            for x in chunk {
                *x = *x * scale[ch] + shift[ch];
            }
        }
        self.unary(a, v, Op::ChannelAffine(a, scale.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(a, v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.unary(a, v, Op::Abs(a))
    }

    /// Square-kernel convolution; `x` is NCHW, `w` is `[O, I, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, tracked)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[p * 4 * h * w + i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::new(vec![n, c, 2 * h, 2 * w], out);
        self.unary(a, v, Op::Upsample2(a))
    }

    /// 2x2 average pooling with stride 2 (even sides required).
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial sides");
        let src = self.value(a).data();
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let b = p * h * w;
                    let s = src[b + 2 * i * w + 2 * j]
                        + src[b + 2 * i * w + 2 * j + 1]
                        + src[b + (2 * i + 1) * w + 2 * j]
                        + src[b + (2 * i + 1) * w + 2 * j + 1];
                    out[p * ho * wo + i * wo + j] = s * quarter;
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out);
        self.unary(a, v, Op::AvgPool2(a))
    }

    /// Spatial mean, NCHW -> `[N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let data = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(vec![n, c], data);
        self.unary(a, v, Op::GlobalAvgPool(a))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert!(n == nb && h == hb && w == wb, "concat_channels shape mismatch");
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let v = Tensor::new(vec![n, ca + cb, h, w], out);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::ConcatChannels(a, b), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape.to_vec());
        self.unary(a, v, Op::Reshape(a))
    }

    /// `x @ w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        assert_eq!(xs.shape().len(), 2, "linear input must be [N, in]");
        let (n, fin) = (xs.shape()[0], xs.shape()[1]);
        let fout = ws.shape()[0];
        assert_eq!(ws.shape(), &[fout, fin], "linear weight shape mismatch");
        let mut out = vec![T::zero(); n * fout];
        gemm(n, fin, fout, xs.data(), false, ws.data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), fout, "linear bias length mismatch");
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(Tensor::new(vec![n, fout], out), Op::Linear { x, w, b }, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, v, Op::Mean(a))
    }

    /// Batch-mean of `-log softmax(logits)[label]`. Labels must be in range.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape().len(), 2, "logits must be [N, C]");
        let (n, c) = (z.shape()[0], z.shape()[1]);
        assert_eq!(labels.len(), n, "one label per logit row");
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = T::zero();
        for (row, &y) in z.data().chunks(c).zip(labels) {
            assert!(y < c, "label {y} out of range for {c} classes");
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = m + s.ln();
            loss = loss + log_z - row[y];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let v = Tensor::scalar(loss / T::from_usize(n).unwrap());
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs: Tensor::new(vec![n, c], probs),
        };
        self.unary(logits, v, op)
    }

    /// Batch-mean of `max(z_y - max_{c != y} z_c, -kappa)`.
    pub fn cw_margin(&mut self, logits: Var, labels: &[usize], kappa: T) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape().len(), 2, "logits must be [N, C]");
        let (n, c) = (z.shape()[0], z.shape()[1]);
        assert!(c >= 2, "margin loss needs at least two classes");
        assert_eq!(labels.len(), n, "one label per logit row");
        let mut total = T::zero();
        let mut active = Vec::with_capacity(n);
        for (row, &y) in z.data().chunks(c).zip(labels) {
            assert!(y < c, "label {y} out of range for {c} classes");
            let (other, best) = row.iter().enumerate().filter(|&(i, _)| i != y).fold(
                (usize::MAX, T::neg_infinity()),
                |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                },
            );
            let margin = row[y] - best;
            if margin > -kappa {
                total = total + margin;
                active.push(Some((y, other)));
            } else {
                total = total - kappa;
                active.push(None);
            }
        }
        let v = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.unary(logits, v, Op::CwMargin { logits, active })
    }

    /// Forward value of `forward`, gradient routed to `backward_to` as if
    /// the map between them were the identity.
    pub fn straight_through(&mut self, forward: Var, backward_to: Var) -> Var {
        assert_eq!(
            self.value(forward).shape(),
            self.value(backward_to).shape(),
            "straight-through shapes must agree"
        );
        let v = self.value(forward).clone();
        self.unary(backward_to, v, Op::StraightThrough(backward_to))
    }

    /// Bilinear resampling of `img` by `flow` (see [`crate::warp`]).
    pub fn warp(&mut self, img: Var, flow: Var) -> Var {
        let v = warp::warp_forward(self.value(img), self.value(flow));
        let tracked = self.tracked(img) || self.tracked(flow);
        self.push(v, Op::Warp { img, flow }, tracked)
    }

    pub fn flow_smoothness(&mut self, flow: Var) -> Var {
        let v = Tensor::scalar(warp::smoothness_forward(self.value(flow)));
        self.unary(flow, v, Op::FlowSmoothness(flow))
    }

    /// Reverse sweep from `root`, seeded with ones (for scalar losses this
    /// is the usual gradient).
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::ones(self.value(root).shape().to_vec()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // keep the gradient of non-leaf nodes available to callers
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if self.tracked(to) {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.send(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.tracked(*b) {
                    self.send(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddConst(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.send(grads, *a, g.clone().reshape(shape));
            }
            Op::MulConst(a, c) => self.send(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::Scale(a, s) => self.send(grads, *a, g.scale(*s)),
            Op::Clamp(a, lo, hi) => {
                let pass = g.zip_map(
                    self.value(*a),
                    |gv, x| {
                        if x >= *lo && x <= *hi {
                            gv
                        } else {
                            T::zero()
                        }
                    },
                );
                self.send(grads, *a, pass);
            }
            Op::ChannelAffine(a, scale) => {
                let (_, c, h, w) = g.dims4();
                let mut d = g.clone();
                for (i, chunk) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let s = scale[i % c];
                    chunk.iter_mut().for_each(|v| *v = *v * s);
                }
                self.send(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.send(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * *slope });
                self.send(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gv, y| gv * y * (T::one() - y));
                self.send(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gv, y| gv * (T::one() - y * y));
                self.send(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.send(grads, *a, d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = (self.tracked(*x), self.tracked(*w), b.is_some_and(|b| self.tracked(b)));
                let cg = conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, need);
                if let Some(d) = cg.input {
                    self.send(grads, *x, d);
                }
                if let Some(d) = cg.weight {
                    self.send(grads, *w, d);
                }
                if let (Some(b), Some(d)) = (b, cg.bias) {
                    self.send(grads, *b, d);
                }
            }
            Op::Upsample2(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let t = p * h * w + (i / 2) * w + j / 2;
                            d[t] = d[t] + g.data()[p * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
                self.send(grads, *a, Tensor::new(vec![n, c, h, w], d));
            }
            Op::AvgPool2(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            d[p * h * w + i * w + j] = g.data()[p * ho * wo + (i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                self.send(grads, *a, Tensor::new(vec![n, c, h, w], d));
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut d = Vec::with_capacity(n * c * h * w);
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv * inv).take(h * w));
                }
                self.send(grads, *a, Tensor::new(vec![n, c, h, w], d));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for row in g.data().chunks(la + lb) {
                    da.extend_from_slice(&row[..la]);
                    db.extend_from_slice(&row[la..]);
                }
                self.send(grads, *a, Tensor::new(vec![n, ca, h, w], da));
                self.send(grads, *b, Tensor::new(vec![n, cb, h, w], db));
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (n, fin) = (xs.shape()[0], xs.shape()[1]);
                let fout = ws.shape()[0];
                if self.tracked(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    gemm(n, fout, fin, g.data(), false, ws.data(), false, &mut dx, false);
                    self.send(grads, *x, Tensor::new(vec![n, fin], dx));
                }
                if self.tracked(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(fout, n, fin, g.data(), true, xs.data(), false, &mut dw, false);
                    self.send(grads, *w, Tensor::new(vec![fout, fin], dw));
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.data().chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        self.send(grads, *b, Tensor::new(vec![fout], db));
                    }
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.send(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                let v = g.item() / T::from_usize(src.len().max(1)).unwrap();
                self.send(grads, *a, Tensor::full(src.shape().to_vec(), v));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.shape()[1];
                let scale = g.item() / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (row, &y) in d.data_mut().chunks_mut(c).zip(labels) {
                    row[y] = row[y] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                self.send(grads, *logits, d);
            }
            Op::CwMargin { logits, active } => {
                let shape = self.value(*logits).shape().to_vec();
                let c = shape[1];
                let scale = g.item() / T::from_usize(active.len()).unwrap();
                let mut d = Tensor::zeros(shape);
                for (row, act) in d.data_mut().chunks_mut(c).zip(active) {
                    if let Some((y, o)) = act {
                        row[*y] = scale;
                        row[*o] = -scale;
                    }
                }
                self.send(grads, *logits, d);
            }
            Op::Warp { img, flow } => {
                let (di, df) = warp::warp_backward(self.value(*img), self.value(*flow), g);
                self.send(grads, *img, di);
                self.send(grads, *flow, df);
            }
            Op::FlowSmoothness(flow) => {
                let d = warp::smoothness_backward(self.value(*flow), g.item());
                self.send(grads, *flow, d);
            }
        }
    }
}
