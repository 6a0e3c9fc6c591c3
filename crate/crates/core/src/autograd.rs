//! A small reverse-mode autodiff tape over dense `f64` tensors.
//!
//! Every forward pass builds a fresh [`Graph`]. Nodes are appended in
//! topological order, so backpropagation is a single reverse sweep. Nodes whose
//! inputs carry no gradient are skipped during the sweep.

use crate::tensor::{gemm, gemm_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { a: Var, bias: Var },
    AddColBias { a: Var, bias: Var },
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, bias: Var, cols: Tensor, geom: ConvGeom },
    Upsample2x { a: Var, h: usize, w: usize },
    ConcatRows(Vec<Var>),
    SelectRows { a: Var, idx: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    MeanRows(Var),
    WeightedSum(Vec<(Var, f64)>),
    ClusterSum { v: Var, winners: Vec<usize> },
    BceLogits { logits: Var, target: Vec<f64> },
    Dice { logits: Var, target: Vec<f64>, sig: Vec<f64>, inter: f64, denom: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = gemm(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "elementwise shape mismatch {:?} vs {:?}", x.shape, y.shape);
        Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let x = self.value(a);
        let b = self.value(bias);
        let n = x.cols();
        assert_eq!(b.len(), n, "row bias length mismatch");
        let mut out = x.clone();
        for row in out.data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&b.data) {
                *v += bb;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRowBias { a, bias }, ng)
    }

    /// `a[c, ...] + bias[c]` broadcast over trailing dimensions.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Var {
        let x = self.value(a);
        let b = self.value(bias);
        assert_eq!(b.len(), x.rows(), "column bias length mismatch");
        let n = x.cols();
        let mut out = x.clone();
        for (row, bb) in out.data.chunks_mut(n).zip(&b.data) {
            for v in row {
                *v += bb;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddColBias { a, bias }, ng)
    }

    /// `x · w + b` for row-vector inputs `x[m, din]`, `w[din, dout]`, `b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, false, w, false);
        self.add_row_bias(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * s).collect());
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v.max(0.0)).collect());
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row layer normalization with affine `gain[n]`, `bias[n]`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let n = x.cols();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.rows());
        for (r, row) in x.data.chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(x.shape.clone(), out);
        let ng = self.ng(a) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { a, gain, bias, xhat, inv_std }, ng)
    }

    /// 2D convolution of `x[cin, h, w]` with `w[cout, cin*k*k]` and `bias[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape.len(), 3, "conv2d expects a [c, h, w] input");
        let (cin, h, wd) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { cin, h, w: wd, k, stride, pad, hout, wout };
        let cols = im2col(&xv.data, geom);
        let wv = self.value(w);
        assert_eq!(wv.cols(), cin * k * k, "conv weight shape mismatch");
        let cout = wv.rows();
        let mut out = gemm(wv, false, &cols, false);
        let bv = &self.value(bias).data;
        for (row, bb) in out.data.chunks_mut(hout * wout).zip(bv) {
            for v in row {
                *v += bb;
            }
        }
        let out = out.reshaped(vec![cout, hout, wout]);
        let ng = self.ng(x) || self.ng(w) || self.ng(bias);
        self.push(out, Op::Conv2d { x, w, bias, cols, geom }, ng)
    }

    /// Nearest-neighbour upsampling of `a[c, h, w]` to `[c, out_h, out_w]`, `out_* <= 2 * *`.
    pub fn upsample2x(&mut self, a: Var, out_h: usize, out_w: usize) -> Var {
        let x = self.value(a);
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        assert!(out_h <= 2 * h && out_w <= 2 * w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for i in 0..out_h {
                for j in 0..out_w {
                    out[(ch * out_h + i) * out_w + j] = x.data[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], out);
        let ng = self.ng(a);
        self.push(out, Op::Upsample2x { a, h, w }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), n, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(vec![rows, n], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![idx.len(), n], data), Op::SelectRows { a, idx: idx.to_vec() }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose2();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape.to_vec());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for row in x.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![1, n], out), Op::MeanRows(a), ng)
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, w)| self.scalar(*v) * w).sum();
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Rows of `v[p, d]` summed into `clusters` groups by `winners[p]`, in pixel order.
    /// Equivalent to `A · v` for the one-hot matrix `A` built from `winners`.
    pub fn cluster_sum(&mut self, v: Var, winners: &[usize], clusters: usize) -> Var {
        let x = self.value(v);
        let d = x.cols();
        assert_eq!(x.rows(), winners.len());
        let out = scatter_rows(&x.data, d, winners, clusters);
        let ng = self.ng(v);
        self.push(Tensor::new(vec![clusters, d], out), Op::ClusterSum { v, winners: winners.to_vec() }, ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), target.len());
        let total: f64 = x.data.iter().zip(&target).map(|(&z, &t)| bce_logit(z, t)).sum();
        let ng = self.ng(logits);
        self.push(Tensor::scalar(total / x.len() as f64), Op::BceLogits { logits, target }, ng)
    }

    /// Soft Dice loss `1 - (2 Σ σt + s) / (Σσ + Σt + s)`.
    pub fn dice_loss(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), target.len());
        let sig: Vec<f64> = x.data.iter().map(|&z| sigmoid(z)).collect();
        let inter: f64 = sig.iter().zip(&target).map(|(s, t)| s * t).sum();
        let denom = sig.iter().sum::<f64>() + target.iter().sum::<f64>() + DICE_SMOOTH;
        let loss = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom;
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::Dice { logits, target, sig, inter, denom }, ng)
    }

    /// Weighted mean softmax cross-entropy over rows of `logits[m, c]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let x = self.value(logits);
        let c = x.cols();
        assert_eq!(targets.len(), x.rows());
        assert_eq!(weights.len(), x.rows());
        let mut probs = x.data.clone();
        let mut total = 0.0;
        let wsum: f64 = weights.iter().sum();
        for (r, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            total -= weights[r] * row[targets[r]].max(1e-300).ln();
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, weights, probs }, ng)
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&self.nodes[loss.0].value.shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.nodes[v.0].value.shape));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |ga| {
                    if *ta {
                        gemm_into(bv, *tb, g, true, 1.0, &mut ga.data);
                    } else {
                        gemm_into(g, false, bv, !*tb, 1.0, &mut ga.data);
                    }
                });
                self.accum(grads, *b, |gb| {
                    if *tb {
                        gemm_into(g, true, av, *ta, 1.0, &mut gb.data);
                    } else {
                        gemm_into(av, !*ta, g, false, 1.0, &mut gb.data);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                self.accum(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                self.accum(grads, *b, |gb| {
                    for (x, y) in gb.data.iter_mut().zip(&g.data) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |ga| {
                    for ((x, y), z) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *x += y * z;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for ((x, y), z) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *x += y * z;
                    }
                });
            }
            Op::AddRowBias { a, bias } => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                let n = g.cols();
                self.accum(grads, *bias, |gb| {
                    for row in g.data.chunks(n) {
                        for (x, y) in gb.data.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::AddColBias { a, bias } => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                let n = g.cols();
                self.accum(grads, *bias, |gb| {
                    for (x, row) in gb.data.iter_mut().zip(g.data.chunks(n)) {
                        *x += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, |ga| {
                    for (x, y) in ga.data.iter_mut().zip(&g.data) {
                        *x += y * s;
                    }
                });
            }
            Op::Relu(a) => {
                let out = &node.value.data;
                self.accum(grads, *a, |ga| {
                    for ((x, y), o) in ga.data.iter_mut().zip(&g.data).zip(out) {
                        if *o > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                self.accum(grads, *a, |ga| {
                    for ((gx, gy), yy) in ga.data.chunks_mut(n).zip(g.data.chunks(n)).zip(y.data.chunks(n)) {
                        let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gx[j] += yy[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let n = g.cols();
                let gv = &self.value(*gain).data;
                self.accum(grads, *gain, |gg| {
                    for (row_g, row_x) in g.data.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg.data[j] += row_g[j] * row_x[j];
                        }
                    }
                });
                self.accum(grads, *bias, |gb| {
                    for row_g in g.data.chunks(n) {
                        for j in 0..n {
                            gb.data[j] += row_g[j];
                        }
                    }
                });
                self.accum(grads, *a, |ga| {
                    let nf = n as f64;
                    for (r, (row_g, row_x)) in g.data.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let d = row_g[j] * gv[j];
                            s1 += d;
                            s2 += d * row_x[j];
                        }
                        let is = inv_std[r];
                        for j in 0..n {
                            let d = row_g[j] * gv[j];
                            ga.data[r * n + j] += is / nf * (nf * d - s1 - row_x[j] * s2);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, bias, cols, geom } => {
                let wv = self.value(*w);
                let cout = wv.rows();
                let gy = Tensor::new(vec![cout, geom.hout * geom.wout], g.data.clone());
                self.accum(grads, *w, |gw| gemm_into(&gy, false, cols, true, 1.0, &mut gw.data));
                self.accum(grads, *bias, |gb| {
                    for (x, row) in gb.data.iter_mut().zip(gy.data.chunks(geom.hout * geom.wout)) {
                        *x += row.iter().sum::<f64>();
                    }
                });
                if self.ng(*x) {
                    let gcols = gemm(wv, true, &gy, false);
                    self.accum(grads, *x, |gx| col2im_add(&gcols.data, *geom, &mut gx.data));
                }
            }
            Op::Upsample2x { a, h, w } => {
                let (c, oh, ow) = (g.shape[0], g.shape[1], g.shape[2]);
                self.accum(grads, *a, |ga| {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                ga.data[(ch * h + i / 2) * w + j / 2] += g.data[(ch * oh + i) * ow + j];
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accum(grads, *p, |gp| {
                        for (x, y) in gp.data.iter_mut().zip(&g.data[offset..offset + len]) {
                            *x += y;
                        }
                    });
                    offset += len;
                }
            }
            Op::SelectRows { a, idx } => {
                let n = g.cols();
                self.accum(grads, *a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga.data[i * n + j] += g.data[r * n + j];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = g.transpose2();
                self.accum(grads, *a, |ga| ga.add_assign(&gt));
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
            }
            Op::MeanRows(a) => {
                let m = self.value(*a).rows() as f64;
                let n = g.len();
                self.accum(grads, *a, |ga| {
                    for row in ga.data.chunks_mut(n) {
                        for (x, y) in row.iter_mut().zip(&g.data) {
                            *x += y / m;
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for (v, wgt) in terms {
                    self.accum(grads, *v, |gv| gv.data[0] += g.data[0] * wgt);
                }
            }
            Op::ClusterSum { v, winners } => {
                let d = g.cols();
                self.accum(grads, *v, |gv| {
                    for (p, &w) in winners.iter().enumerate() {
                        for j in 0..d {
                            gv.data[p * d + j] += g.data[w * d + j];
                        }
                    }
                });
            }
            Op::BceLogits { logits, target } => {
                let x = self.value(*logits);
                let scale = g.data[0] / x.len() as f64;
                self.accum(grads, *logits, |gl| {
                    for ((d, &z), &t) in gl.data.iter_mut().zip(&x.data).zip(target) {
                        *d += scale * (sigmoid(z) - t);
                    }
                });
            }
            Op::Dice { logits, target, sig, inter, denom } => {
                let numer = 2.0 * inter + DICE_SMOOTH;
                let go = g.data[0];
                self.accum(grads, *logits, |gl| {
                    for ((d, &s), &t) in gl.data.iter_mut().zip(sig).zip(target) {
                        // d loss / d s = -(2t·denom - numer) / denom²
                        let dl_ds = -(2.0 * t * denom - numer) / (denom * denom);
                        *d += go * dl_ds * s * (1.0 - s);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = self.value(*logits).cols();
                let wsum: f64 = weights.iter().sum();
                if wsum <= 0.0 {
                    return;
                }
                let go = g.data[0];
                self.accum(grads, *logits, |gl| {
                    for (r, (grow, prow)) in gl.data.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        let s = go * weights[r] / wsum;
                        for j in 0..c {
                            let ind = if j == targets[r] { 1.0 } else { 0.0 };
                            grow[j] += s * (prow[j] - ind);
                        }
                    }
                });
            }
        }
    }
}

/// `out[winners[p]] += rows[p]`, accumulating in pixel order from `+0.0`.
pub fn scatter_rows(rows: &[f64], d: usize, winners: &[usize], clusters: usize) -> Vec<f64> {
    let mut out = vec![0.0; clusters * d];
    for (p, &w) in winners.iter().enumerate() {
        for j in 0..d {
            out[w * d + j] += rows[p * d + j];
        }
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-(t ln σ(z) + (1-t) ln(1-σ(z)))`.
pub fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn im2col(x: &[f64], g: ConvGeom) -> Tensor {
    let kk = g.k * g.k;
    let p = g.hout * g.wout;
    let mut cols = vec![0.0; g.cin * kk * p];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * kk + ky * g.k + kx) * p;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            cols[row + oy * g.wout + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.cin * kk, p], cols)
}

fn col2im_add(cols: &[f64], g: ConvGeom, out: &mut [f64]) {
    let kk = g.k * g.k;
    let p = g.hout * g.wout;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * kk + ky * g.k + kx) * p;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out[dst + ix as usize] += cols[row + oy * g.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn numerical_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data[i];
            probe.data[i] = orig + h;
            let up = f(&probe);
            probe.data[i] = orig - h;
            let down = f(&probe);
            probe.data[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(max |a|, max |b|, floor)` over paired gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}
