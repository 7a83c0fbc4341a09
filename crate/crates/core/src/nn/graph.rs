//! Reverse-mode automatic differentiation over dynamic-dimensional arrays.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every leaf created
//! with `requires_grad`. Ops cover exactly what the model needs: dense and
//! convolutional linear maps, norms, gates, pooling, attention plumbing.
//!
//! Determinism: every op visits elements in a fixed order and max-pooling
//! ties break toward the first maximum, so repeated runs are bit-identical.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use super::Real;

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Conv2d { x: usize, w: usize, b: usize, pad: usize, col: Option<Box<[F]>> },
    DepthwiseConv1d { x: usize, w: usize, b: usize },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Swish(usize),
    SoftmaxLast(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    ChannelNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    PoolAvg { x: usize, axis: usize, window: usize },
    PoolMax { x: usize, axis: usize, window: usize },
    GlobalMean { x: usize },
    MulChanGate { x: usize, g: usize },
    MulSpatialGate { x: usize, q: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize, len: usize },
    RelShift(usize),
    MeanAll(usize),
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// One forward pass worth of computation.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    fn parents_need_grad(&self, op: &Op<F>) -> bool {
        let p = |i: &usize| self.nodes[*i].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b)
            | Op::AddRowBias(a, b) => p(a) || p(b),
            Op::Conv2d { x, w, b, .. } | Op::DepthwiseConv1d { x, w, b } => {
                p(x) || p(w) || p(b)
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::ChannelNorm { x, gamma, beta, .. } => {
                p(x) || p(gamma) || p(beta)
            }
            Op::MulChanGate { x, g } => p(x) || p(g),
            Op::MulSpatialGate { x, q } => p(x) || p(q),
            Op::Concat { parts, .. } => parts.iter().any(p),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Swish(a)
            | Op::SoftmaxLast(a)
            | Op::PoolAvg { x: a, .. }
            | Op::PoolMax { x: a, .. }
            | Op::GlobalMean { x: a }
            | Op::Reshape(a)
            | Op::Permute { x: a, .. }
            | Op::Slice { x: a, .. }
            | Op::RelShift(a)
            | Op::MeanAll(a) => p(a),
        }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        let needs_grad = self.parents_need_grad(&op);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input node. Gradients flow into it only when `requires_grad`.
    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * F::from_f64(c));
        self.push(v, Op::Scale(a.0, c))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a.0, b.0))
    }

    /// `[n, d] + [d]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let bv = self.nodes[bias.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let v = (&xv + &bv).into_dyn();
        self.push(v, Op::AddRowBias(x.0, bias.0))
    }

    /// Same-padding 2D convolution: x `[Ci, H, W]`, w `[Co, Ci, kh, kw]`,
    /// b `[Co]`, stride 1, `pad = (k - 1) / 2` on both axes.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let wv = &self.nodes[w.0].value;
        let (co, ci, kh, kw) =
            (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let (ci_x, h, wid) = xv.dim();
        assert_eq!(ci, ci_x, "conv2d channel mismatch");
        let col = im2col(&xv, kh, kw, pad);
        let w2 = wv.view().into_shape_with_order((co, ci * kh * kw)).unwrap();
        let mut y = w2.dot(&col);
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, bias) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + *bias);
        }
        let v = y.into_shape_with_order((co, h, wid)).unwrap().into_dyn();
        let keep_col = self.nodes[w.0].needs_grad;
        let col = keep_col.then(|| col.into_raw_vec_and_offset().0.into_boxed_slice());
        self.push(v, Op::Conv2d { x: x.0, w: w.0, b: b.0, pad, col })
    }

    /// Depthwise 1D convolution along the first axis: x `[T, D]`,
    /// w `[D, k]` (k odd, same padding), b `[D]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let (t_len, d) = xv.dim();
        let k = wv.ncols();
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let pad = (k - 1) / 2;
        let mut y = ndarray::Array2::<F>::zeros((t_len, d));
        for t in 0..t_len {
            for dd in 0..d {
                let mut acc = bv[dd];
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < t_len {
                        acc = acc + wv[[dd, j]] * xv[[src as usize, dd]];
                    }
                }
                y[[t, dd]] = acc;
            }
        }
        self.push(y.into_dyn(), Op::DepthwiseConv1d { x: x.0, w: w.0, b: b.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a.0))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid_scalar(x));
        self.push(v, Op::Swish(a.0))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in lane.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in lane.iter_mut() {
                *x = *x / sum;
            }
        }
        self.push(v, Op::SoftmaxLast(a.0))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let (mean, inv_std) = lane_stats(lane.iter().cloned(), lane.len(), eps);
            for (i, x) in lane.iter_mut().enumerate() {
                *x = (*x - mean) * inv_std * gv[[i]] + bv[[i]];
            }
        }
        self.push(v, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps })
    }

    /// Per-channel normalization of `[C, ...]` over all trailing axes, with
    /// per-channel affine parameters.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        for (c, mut ch) in v.outer_iter_mut().enumerate() {
            let n = ch.len();
            let (mean, inv_std) = lane_stats(ch.iter().cloned(), n, eps);
            let (g, b) = (gv[[c]], bv[[c]]);
            ch.mapv_inplace(|x| (x - mean) * inv_std * g + b);
        }
        self.push(v, Op::ChannelNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps })
    }

    /// Non-overlapping average pooling along `axis`; trailing remainder
    /// elements are dropped (floor semantics).
    pub fn pool_avg(&mut self, x: Var, axis: usize, window: usize) -> Var {
        let v = pool_forward(&self.nodes[x.0].value, axis, window, PoolKind::Avg);
        self.push(v, Op::PoolAvg { x: x.0, axis, window })
    }

    /// Non-overlapping max pooling along `axis` (floor semantics).
    pub fn pool_max(&mut self, x: Var, axis: usize, window: usize) -> Var {
        let v = pool_forward(&self.nodes[x.0].value, axis, window, PoolKind::Max);
        self.push(v, Op::PoolMax { x: x.0, axis, window })
    }

    /// Sum of average and max pooling over the same window.
    pub fn pool_avg_max(&mut self, x: Var, axis: usize, window: usize) -> Var {
        let a = self.pool_avg(x, axis, window);
        let m = self.pool_max(x, axis, window);
        self.add(a, m)
    }

    /// Mean over all trailing axes of `[C, ...]`, yielding `[C]`.
    pub fn global_mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[0];
        let mut v = ndarray::Array1::<F>::zeros(c);
        for (i, ch) in xv.outer_iter().enumerate() {
            let n = F::from_f64(ch.len() as f64);
            v[i] = ch.iter().fold(F::zero(), |acc, x| acc + *x) / n;
        }
        self.push(v.into_dyn(), Op::GlobalMean { x: x.0 })
    }

    /// `[C, T, F] * [C]`, gate broadcast per channel.
    pub fn mul_chan_gate(&mut self, x: Var, g: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[g.0].value;
        let mut v = xv.clone();
        for (c, mut ch) in v.outer_iter_mut().enumerate() {
            let gc = gv[[c]];
            ch.mapv_inplace(|x| x * gc);
        }
        self.push(v, Op::MulChanGate { x: x.0, g: g.0 })
    }

    /// `[C, T, F] * [T, F]`, gate broadcast over channels.
    pub fn mul_spatial_gate(&mut self, x: Var, q: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let qv = as2(&self.nodes[q.0].value);
        let mut v = ndarray::Array3::<F>::zeros(xv.dim());
        for (mut vc, xc) in v.outer_iter_mut().zip(xv.outer_iter()) {
            vc.assign(&(&xc * &qv));
        }
        self.push(v.into_dyn(), Op::MulSpatialGate { x: x.0, q: q.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(v, Op::Reshape(x.0))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Permute { x: x.0, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(v, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis })
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::Slice { x: x.0, axis, start, len })
    }

    /// Relative-position shift: input `[T, 2T-1]` whose column r holds the
    /// score for relative offset `r - (T-1)`; output `[T, T]` with
    /// `y[i, j] = x[i, T-1 + j - i]`.
    pub fn rel_shift(&mut self, x: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let t = xv.nrows();
        assert_eq!(xv.ncols(), 2 * t - 1, "rel_shift expects [T, 2T-1]");
        let mut v = ndarray::Array2::<F>::zeros((t, t));
        for i in 0..t {
            for j in 0..t {
                v[[i, j]] = xv[[i, t - 1 + j - i]];
            }
        }
        self.push(v.into_dyn(), Op::RelShift(x.0))
    }

    /// Mean over every element, yielding a 0-dimensional scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = F::from_f64(xv.len() as f64);
        let mean = xv.iter().fold(F::zero(), |acc, v| acc + *v) / n;
        let v = ArrayD::from_elem(IxDyn(&[]), mean);
        self.push(v, Op::MeanAll(x.0))
    }

    /// Scalar value of a 0-dimensional node.
    pub fn scalar(&self, v: Var) -> F {
        *self.nodes[v.0].value.first().expect("scalar node")
    }

    /// Runs the backward pass from a scalar loss node. Returns one gradient
    /// slot per node; only nodes on a `requires_grad` path are populated.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<F>>> {
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), F::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad && !matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        self.accum(&mut grads, *a, &g * &self.nodes[*b].value);
                    }
                    if self.nodes[*b].needs_grad {
                        self.accum(&mut grads, *b, &g * &self.nodes[*a].value);
                    }
                }
                Op::Scale(a, c) => {
                    self.accum(&mut grads, *a, g.mapv(|v| v * F::from_f64(*c)));
                }
                Op::MatMul(a, b) => {
                    let gv = as2(&g);
                    if self.nodes[*a].needs_grad {
                        let bv = as2(&self.nodes[*b].value);
                        self.accum(&mut grads, *a, gv.dot(&bv.t()).into_dyn());
                    }
                    if self.nodes[*b].needs_grad {
                        let av = as2(&self.nodes[*a].value);
                        self.accum(&mut grads, *b, av.t().dot(&gv).into_dyn());
                    }
                }
                Op::AddRowBias(x, b) => {
                    self.accum(&mut grads, *x, g.clone());
                    if self.nodes[*b].needs_grad {
                        let gv = as2(&g);
                        self.accum(&mut grads, *b, gv.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::Conv2d { x, w, b, pad, col } => {
                    self.conv2d_backward(&mut grads, &g, *x, *w, *b, *pad, col.as_deref());
                }
                Op::DepthwiseConv1d { x, w, b } => {
                    self.depthwise_backward(&mut grads, &g, *x, *w, *b);
                }
                Op::Relu(a) => {
                    let xv = &self.nodes[*a].value;
                    let dx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|gv, x| if *x > F::zero() { *gv } else { F::zero() });
                    self.accum(&mut grads, *a, dx);
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value;
                    let dx = ndarray::Zip::from(&g)
                        .and(yv)
                        .map_collect(|gv, y| *gv * *y * (F::one() - *y));
                    self.accum(&mut grads, *a, dx);
                }
                Op::Tanh(a) => {
                    let yv = &node.value;
                    let dx = ndarray::Zip::from(&g)
                        .and(yv)
                        .map_collect(|gv, y| *gv * (F::one() - *y * *y));
                    self.accum(&mut grads, *a, dx);
                }
                Op::Swish(a) => {
                    let xv = &self.nodes[*a].value;
                    let dx = ndarray::Zip::from(&g).and(xv).map_collect(|gv, x| {
                        let s = sigmoid_scalar(*x);
                        *gv * (s + *x * s * (F::one() - s))
                    });
                    self.accum(&mut grads, *a, dx);
                }
                Op::SoftmaxLast(a) => {
                    let yv = &node.value;
                    let mut dx = g.clone();
                    let last = dx.ndim() - 1;
                    for (mut dlane, ylane) in
                        dx.lanes_mut(Axis(last)).into_iter().zip(yv.lanes(Axis(last)))
                    {
                        let dot = dlane
                            .iter()
                            .zip(ylane.iter())
                            .fold(F::zero(), |acc, (d, y)| acc + *d * *y);
                        for (d, y) in dlane.iter_mut().zip(ylane.iter()) {
                            *d = (*d - dot) * *y;
                        }
                    }
                    self.accum(&mut grads, *a, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.norm_backward(&mut grads, &g, *x, *gamma, *beta, *eps, true);
                }
                Op::ChannelNorm { x, gamma, beta, eps } => {
                    self.norm_backward(&mut grads, &g, *x, *gamma, *beta, *eps, false);
                }
                Op::PoolAvg { x, axis, window } => {
                    let xv = &self.nodes[*x].value;
                    let dx = pool_avg_backward(&g, xv.shape(), *axis, *window);
                    self.accum(&mut grads, *x, dx);
                }
                Op::PoolMax { x, axis, window } => {
                    let xv = &self.nodes[*x].value;
                    let dx = pool_max_backward(&g, xv, *axis, *window);
                    self.accum(&mut grads, *x, dx);
                }
                Op::GlobalMean { x } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    for (c, mut ch) in dx.outer_iter_mut().enumerate() {
                        let scale = g[[c]] / F::from_f64(ch.len() as f64);
                        ch.fill(scale);
                    }
                    self.accum(&mut grads, *x, dx);
                }
                Op::MulChanGate { x, g: gate } => {
                    if self.nodes[*x].needs_grad {
                        let gv = &self.nodes[*gate].value;
                        let mut dx = g.clone();
                        for (c, mut ch) in dx.outer_iter_mut().enumerate() {
                            let gc = gv[[c]];
                            ch.mapv_inplace(|v| v * gc);
                        }
                        self.accum(&mut grads, *x, dx);
                    }
                    if self.nodes[*gate].needs_grad {
                        let xv = &self.nodes[*x].value;
                        let c = xv.shape()[0];
                        let mut dg = ndarray::Array1::<F>::zeros(c);
                        for ((i, xc), gc) in xv.outer_iter().enumerate().zip(g.outer_iter()) {
                            dg[i] = xc
                                .iter()
                                .zip(gc.iter())
                                .fold(F::zero(), |acc, (x, gg)| acc + *x * *gg);
                        }
                        self.accum(&mut grads, *gate, dg.into_dyn());
                    }
                }
                Op::MulSpatialGate { x, q } => {
                    let xv = as3(&self.nodes[*x].value);
                    let qv = as2(&self.nodes[*q].value);
                    let g3 = as3(&g);
                    if self.nodes[*x].needs_grad {
                        let mut dx = ndarray::Array3::<F>::zeros(xv.dim());
                        for (mut dc, gc) in dx.outer_iter_mut().zip(g3.outer_iter()) {
                            dc.assign(&(&gc * &qv));
                        }
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                    if self.nodes[*q].needs_grad {
                        let mut dq = ndarray::Array2::<F>::zeros(qv.dim());
                        for (gc, xc) in g3.outer_iter().zip(xv.outer_iter()) {
                            dq = dq + &(&gc * &xc);
                        }
                        self.accum(&mut grads, *q, dq.into_dyn());
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[*x].value.raw_dim();
                    self.accum(
                        &mut grads,
                        *x,
                        g.clone().into_shape_with_order(shape).unwrap(),
                    );
                }
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, p) in perm.iter().enumerate() {
                        inverse[*p] = i;
                    }
                    let dx = g
                        .view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    self.accum(&mut grads, *x, dx);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[*p].value.shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        self.accum(&mut grads, *p, piece);
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    dx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..start + len))
                        .assign(&g);
                    self.accum(&mut grads, *x, dx);
                }
                Op::RelShift(x) => {
                    let g2 = as2(&g);
                    let t = g2.nrows();
                    let mut dx = ndarray::Array2::<F>::zeros((t, 2 * t - 1));
                    for i in 0..t {
                        for j in 0..t {
                            dx[[i, t - 1 + j - i]] = dx[[i, t - 1 + j - i]] + g2[[i, j]];
                        }
                    }
                    self.accum(&mut grads, *x, dx.into_dyn());
                }
                Op::MeanAll(x) => {
                    let xv = &self.nodes[*x].value;
                    let scale = *g.first().unwrap() / F::from_f64(xv.len() as f64);
                    self.accum(&mut grads, *x, ArrayD::from_elem(xv.raw_dim(), scale));
                }
            }
            grads[i] = Some(g);
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<ArrayD<F>>], idx: usize, delta: ArrayD<F>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        grads: &mut [Option<ArrayD<F>>],
        g: &ArrayD<F>,
        x: usize,
        w: usize,
        b: usize,
        pad: usize,
        cached_col: Option<&[F]>,
    ) {
        let xv = as3(&self.nodes[x].value);
        let wv = &self.nodes[w].value;
        let (co, ci, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let (_, h, wid) = xv.dim();
        let g2 = g.view().into_shape_with_order((co, h * wid)).unwrap();

        if self.nodes[b].needs_grad {
            self.accum(grads, b, g2.sum_axis(Axis(1)).into_dyn());
        }
        if self.nodes[w].needs_grad {
            let owned;
            let col = match cached_col {
                Some(data) => {
                    ndarray::ArrayView2::from_shape((ci * kh * kw, h * wid), data).unwrap()
                }
                None => {
                    owned = im2col(&xv, kh, kw, pad);
                    owned.view()
                }
            };
            let dw = g2.dot(&col.t());
            self.accum(
                grads,
                w,
                dw.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn(),
            );
        }
        if self.nodes[x].needs_grad {
            let w2 = wv.view().into_shape_with_order((co, ci * kh * kw)).unwrap();
            let dcol = w2.t().dot(&g2);
            let dx = col2im(&dcol, ci, h, wid, kh, kw, pad);
            self.accum(grads, x, dx.into_dyn());
        }
    }

    fn depthwise_backward(
        &self,
        grads: &mut [Option<ArrayD<F>>],
        g: &ArrayD<F>,
        x: usize,
        w: usize,
        b: usize,
    ) {
        let xv = as2(&self.nodes[x].value);
        let wv = as2(&self.nodes[w].value);
        let g2 = as2(g);
        let (t_len, d) = xv.dim();
        let k = wv.ncols();
        let pad = (k - 1) / 2;
        if self.nodes[b].needs_grad {
            self.accum(grads, b, g2.sum_axis(Axis(0)).into_dyn());
        }
        if self.nodes[w].needs_grad {
            let mut dw = ndarray::Array2::<F>::zeros((d, k));
            for t in 0..t_len {
                for dd in 0..d {
                    let gv = g2[[t, dd]];
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < t_len {
                            dw[[dd, j]] = dw[[dd, j]] + gv * xv[[src as usize, dd]];
                        }
                    }
                }
            }
            self.accum(grads, w, dw.into_dyn());
        }
        if self.nodes[x].needs_grad {
            let mut dx = ndarray::Array2::<F>::zeros((t_len, d));
            for t in 0..t_len {
                for dd in 0..d {
                    let gv = g2[[t, dd]];
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < t_len {
                            dx[[src as usize, dd]] = dx[[src as usize, dd]] + gv * wv[[dd, j]];
                        }
                    }
                }
            }
            self.accum(grads, x, dx.into_dyn());
        }
    }

    fn norm_backward(
        &self,
        grads: &mut [Option<ArrayD<F>>],
        g: &ArrayD<F>,
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        last_axis: bool,
    ) {
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gamma].value;
        let mut dx = ArrayD::zeros(xv.raw_dim());
        let mut dgamma = ArrayD::<F>::zeros(gv.raw_dim());
        let mut dbeta = ArrayD::<F>::zeros(gv.raw_dim());

        // with dg = dy * gamma:
        // dx = inv_std * (dg - mean(dg) - xhat * mean(dg * xhat))
        if last_axis {
            let last = xv.ndim() - 1;
            for ((xlane, glane), mut dxlane) in xv
                .lanes(Axis(last))
                .into_iter()
                .zip(g.lanes(Axis(last)))
                .zip(dx.lanes_mut(Axis(last)))
            {
                let n = xlane.len();
                let nf = F::from_f64(n as f64);
                let (mean, inv_std) = lane_stats(xlane.iter().cloned(), n, eps);
                let mut sum_dg = F::zero();
                let mut sum_dg_xhat = F::zero();
                for i in 0..n {
                    let xhat = (xlane[i] - mean) * inv_std;
                    let dg = glane[i] * gv[[i]];
                    sum_dg = sum_dg + dg;
                    sum_dg_xhat = sum_dg_xhat + dg * xhat;
                    dgamma[[i]] = dgamma[[i]] + glane[i] * xhat;
                    dbeta[[i]] = dbeta[[i]] + glane[i];
                }
                let mean_dg = sum_dg / nf;
                let mean_dg_xhat = sum_dg_xhat / nf;
                for i in 0..n {
                    let xhat = (xlane[i] - mean) * inv_std;
                    let dg = glane[i] * gv[[i]];
                    dxlane[i] = inv_std * (dg - mean_dg - xhat * mean_dg_xhat);
                }
            }
        } else {
            for (c, (xc, gc)) in xv.outer_iter().zip(g.outer_iter()).enumerate() {
                let n = xc.len();
                let nf = F::from_f64(n as f64);
                let (mean, inv_std) = lane_stats(xc.iter().cloned(), n, eps);
                let gamma_c = gv[[c]];
                let mut sum_g = F::zero();
                let mut sum_g_xhat = F::zero();
                for (xi, gi) in xc.iter().zip(gc.iter()) {
                    let xhat = (*xi - mean) * inv_std;
                    sum_g = sum_g + *gi;
                    sum_g_xhat = sum_g_xhat + *gi * xhat;
                }
                dgamma[[c]] = dgamma[[c]] + sum_g_xhat;
                dbeta[[c]] = dbeta[[c]] + sum_g;
                let mean_dg = gamma_c * sum_g / nf;
                let mean_dg_xhat = gamma_c * sum_g_xhat / nf;
                let mut dxc = dx.index_axis_mut(Axis(0), c);
                ndarray::Zip::from(&mut dxc).and(&xc).and(&gc).for_each(|d, xi, gi| {
                    let xhat = (*xi - mean) * inv_std;
                    let dg = *gi * gamma_c;
                    *d = inv_std * (dg - mean_dg - xhat * mean_dg_xhat);
                });
            }
        }
        self.accum(grads, x, dx);
        self.accum(grads, gamma, dgamma);
        self.accum(grads, beta, dbeta);
    }
}

fn as2<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

fn as3<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d array")
}

fn sigmoid_scalar<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn lane_stats<F: Real>(values: impl Iterator<Item = F>, n: usize, eps: f64) -> (F, F) {
    let nf = F::from_f64(n as f64);
    let mut sum = F::zero();
    let mut sum_sq = F::zero();
    for v in values {
        sum = sum + v;
        sum_sq = sum_sq + v * v;
    }
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(F::zero());
    let inv_std = F::one() / (var + F::from_f64(eps)).sqrt();
    (mean, inv_std)
}

/// For one kernel offset `dx - pad`, the overlapping destination range
/// `[w_lo, w_hi)` and the source start such that
/// `dest[w] = src[w + dx - pad]` stays in bounds.
fn shift_range(w: usize, dx: usize, pad: usize) -> (usize, usize, usize) {
    let shift = dx as isize - pad as isize;
    let w_lo = (-shift).max(0) as usize;
    let w_hi = (w as isize - shift).min(w as isize) as usize;
    let src_lo = (w_lo as isize + shift) as usize;
    (w_lo, w_hi, src_lo)
}

fn im2col<F: Real>(
    x: &ndarray::ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    pad: usize,
) -> ndarray::Array2<F> {
    let (ci, h, w) = x.dim();
    let mut col = ndarray::Array2::<F>::zeros((ci * kh * kw, h * w));
    for c in 0..ci {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let (w_lo, w_hi, src_lo) = shift_range(w, dx, pad);
                if w_lo >= w_hi {
                    continue;
                }
                let mut out_row = col.row_mut(row);
                for hh in 0..h {
                    let src_h = hh as isize + dy as isize - pad as isize;
                    if src_h < 0 || src_h >= h as isize {
                        continue;
                    }
                    let src = x.slice(ndarray::s![
                        c,
                        src_h as usize,
                        src_lo..src_lo + (w_hi - w_lo)
                    ]);
                    out_row
                        .slice_mut(ndarray::s![hh * w + w_lo..hh * w + w_hi])
                        .assign(&src);
                }
            }
        }
    }
    col
}

fn col2im<F: Real>(
    dcol: &ndarray::Array2<F>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> ndarray::Array3<F> {
    let mut dx = ndarray::Array3::<F>::zeros((ci, h, w));
    for c in 0..ci {
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = (c * kh + dy) * kw + dxk;
                let (w_lo, w_hi, src_lo) = shift_range(w, dxk, pad);
                if w_lo >= w_hi {
                    continue;
                }
                let drow = dcol.row(row);
                for hh in 0..h {
                    let src_h = hh as isize + dy as isize - pad as isize;
                    if src_h < 0 || src_h >= h as isize {
                        continue;
                    }
                    let mut dst = dx.slice_mut(ndarray::s![
                        c,
                        src_h as usize,
                        src_lo..src_lo + (w_hi - w_lo)
                    ]);
                    let grad = drow.slice(ndarray::s![hh * w + w_lo..hh * w + w_hi]);
                    dst += &grad;
                }
            }
        }
    }
    dx
}

enum PoolKind {
    Avg,
    Max,
}

fn pool_forward<F: Real>(x: &ArrayD<F>, axis: usize, window: usize, kind: PoolKind) -> ArrayD<F> {
    let in_len = x.shape()[axis];
    let out_len = in_len / window;
    let mut shape = x.shape().to_vec();
    shape[axis] = out_len;
    let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
    let inv_w = F::one() / F::from_f64(window as f64);
    for (mut out_lane, in_lane) in
        out.lanes_mut(Axis(axis)).into_iter().zip(x.lanes(Axis(axis)))
    {
        match kind {
            PoolKind::Avg => {
                let mut acc = F::zero();
                let mut o = 0;
                for (i, v) in in_lane.iter().enumerate().take(out_len * window) {
                    acc = acc + *v;
                    if (i + 1) % window == 0 {
                        out_lane[o] = acc * inv_w;
                        acc = F::zero();
                        o += 1;
                    }
                }
            }
            PoolKind::Max => {
                let mut acc = F::neg_infinity();
                let mut o = 0;
                for (i, v) in in_lane.iter().enumerate().take(out_len * window) {
                    acc = acc.max(*v);
                    if (i + 1) % window == 0 {
                        out_lane[o] = acc;
                        acc = F::neg_infinity();
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

fn pool_avg_backward<F: Real>(
    g: &ArrayD<F>,
    in_shape: &[usize],
    axis: usize,
    window: usize,
) -> ArrayD<F> {
    let mut dx = ArrayD::<F>::zeros(IxDyn(in_shape));
    let scale = F::one() / F::from_f64(window as f64);
    let covered = (in_shape[axis] / window) * window;
    for (mut dx_lane, g_lane) in
        dx.lanes_mut(Axis(axis)).into_iter().zip(g.lanes(Axis(axis)))
    {
        for (i, d) in dx_lane.iter_mut().enumerate().take(covered) {
            *d = g_lane[i / window] * scale;
        }
    }
    dx
}

fn pool_max_backward<F: Real>(
    g: &ArrayD<F>,
    x: &ArrayD<F>,
    axis: usize,
    window: usize,
) -> ArrayD<F> {
    let mut dx = ArrayD::<F>::zeros(x.raw_dim());
    let out_len = x.shape()[axis] / window;
    for ((mut dx_lane, g_lane), x_lane) in dx
        .lanes_mut(Axis(axis))
        .into_iter()
        .zip(g.lanes(Axis(axis)))
        .zip(x.lanes(Axis(axis)))
    {
        // first maximum wins ties, matching the forward pass
        let mut best = 0usize;
        let mut best_val = F::neg_infinity();
        let mut o = 0usize;
        for (i, v) in x_lane.iter().enumerate().take(out_len * window) {
            if *v > best_val {
                best_val = *v;
                best = i;
            }
            if (i + 1) % window == 0 {
                dx_lane[best] = dx_lane[best] + g_lane[o];
                o += 1;
                best_val = F::neg_infinity();
            }
        }
    }
    dx
}
