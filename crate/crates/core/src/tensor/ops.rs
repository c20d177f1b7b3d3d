//! Primitive operations and their reverse-mode rules.

use super::kernels::{col2im_add, gemm, im2col, sigmoid, softplus, ConvGeom, Stencil};
use super::tape::{GradSink, Tape};
use super::{Result, Tensor, TensorError, Var};

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_out: usize, cols: Vec<f64> },
    AvgPool2 { x: Var, c: usize, h: usize, w: usize },
    BilinearSample { map: Var, points: Var },
    MsDeformAttn(Box<MsDeformAttn>),
    Gather { x: Var, idx: Vec<usize> },
    ScatterAdd { x: Var, idx: Vec<usize> },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    ChannelScale { x: Var, s: Var },
    OuterLift { fused: Var, probs: Var },
    Sum(Var),
    FocalLoss { logits: Var, target: Vec<f64>, alpha: f64, beta: f64, norm: f64 },
    MaskedL1 { pred: Var, target: Vec<f64>, cells: Vec<usize>, plane: usize, norm: f64 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

/// Saved state of a multi-scale deformable attention gather.
pub(crate) struct MsDeformAttn {
    values: Vec<Var>,
    offsets: Var,
    weights: Var,
    refs: Vec<(f64, f64)>,
    heads: usize,
    levels: usize,
    points: usize,
}

/// Index into the `[Q × heads × levels × points]` slot layout.
fn slot(q: usize, h: usize, l: usize, p: usize, heads: usize, levels: usize, points: usize) -> usize {
    ((q * heads + h) * levels + l) * points + p
}

impl MsDeformAttn {
    /// Pixel location of slot `s` for query `q` on a level of size `h×w`.
    fn location(&self, q: usize, off: &[f64], s: usize, h: usize, w: usize) -> (f64, f64) {
        let (rx, ry) = self.refs[q];
        ((rx + off[2 * s]) * w as f64 - 0.5, (ry + off[2 * s + 1]) * h as f64 - 0.5)
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::MsDeformAttn(..) => "ms_deform_attn",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ChannelScale { .. } => "channel_scale",
            Op::OuterLift { .. } => "outer_lift",
            Op::Sum(..) => "sum",
            Op::FocalLoss { .. } => "focal_loss",
            Op::MaskedL1 { .. } => "masked_l1",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Reshape(x) | Op::Relu(x) | Op::Sigmoid(x) | Op::Sum(x) => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Transpose { x, .. } | Op::Softmax { x, .. } | Op::AvgPool2 { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BilinearSample { map, points } => vec![*map, *points],
            Op::MsDeformAttn(m) => {
                let mut v = m.values.clone();
                v.push(m.offsets);
                v.push(m.weights);
                v
            }
            Op::Gather { x, .. } | Op::ScatterAdd { x, .. } => vec![*x],
            Op::ConcatCols { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::ChannelScale { x, s } => vec![*x, *s],
            Op::OuterLift { fused, probs } => vec![*fused, *probs],
            Op::FocalLoss { logits, .. } | Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::MaskedL1 { pred, .. } => vec![*pred],
        }
    }

    pub fn backward(&self, y: &Tensor, gy: &[f64], g: &mut GradSink<'_>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                g.with(*a, |d| axpy(d, gy, 1.0));
                g.with(*b, |d| axpy(d, gy, 1.0));
            }
            Op::Sub(a, b) => {
                g.with(*a, |d| axpy(d, gy, 1.0));
                g.with(*b, |d| axpy(d, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let bv = g.value(*b).data();
                g.with(*a, |d| d.iter_mut().zip(gy).zip(bv).for_each(|((d, gy), b)| *d += gy * b));
                let av = g.value(*a).data();
                g.with(*b, |d| d.iter_mut().zip(gy).zip(av).for_each(|((d, gy), a)| *d += gy * a));
            }
            Op::Scale(x, c) => g.with(*x, |d| axpy(d, gy, *c)),
            Op::AddBias { x, bias } => {
                g.with(*x, |d| axpy(d, gy, 1.0));
                let m = g.value(*bias).len();
                g.with(*bias, |d| {
                    for row in gy.chunks(m) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                if g.wants(*a) {
                    let bv = g.value(*b).data();
                    // dA = dC · op(B)ᵀ
                    g.with(*a, |d| gemm(m, n, k, gy, false, bv, !*trans_b, d, true));
                }
                if g.wants(*b) {
                    let av = g.value(*a).data();
                    if *trans_b {
                        // B stored n×k: dB = dCᵀ · A
                        g.with(*b, |d| gemm(n, m, k, gy, true, av, false, d, true));
                    } else {
                        // dB = Aᵀ · dC
                        g.with(*b, |d| gemm(k, m, n, av, true, gy, false, d, true));
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                let (r, c) = (*rows, *cols);
                g.with(*x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => g.with(*x, |d| axpy(d, gy, 1.0)),
            Op::Relu(x) => {
                let xv = g.value(*x).data();
                g.with(*x, |d| {
                    for ((d, gy), x) in d.iter_mut().zip(gy).zip(xv) {
                        if *x > 0.0 {
                            *d += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => g.with(*x, |d| {
                for ((d, gy), y) in d.iter_mut().zip(gy).zip(y.data()) {
                    *d += gy * y * (1.0 - y);
                }
            }),
            Op::Softmax { x, outer, len, inner } => {
                let (len, inner) = (*len, *inner);
                let yv = y.data();
                g.with(*x, |d| {
                    for o in 0..*outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| gy[at(k)] * yv[at(k)]).sum();
                            for k in 0..len {
                                d[at(k)] += yv[at(k)] * (gy[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let dim = g.value(*gamma).len();
                let gam = g.value(*gamma).data();
                g.with(*gamma, |d| {
                    for (row_g, row_x) in gy.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] += row_g[j] * row_x[j];
                        }
                    }
                });
                g.with(*beta, |d| {
                    for row in gy.chunks(dim) {
                        axpy(d, row, 1.0);
                    }
                });
                g.with(*x, |d| {
                    let nd = dim as f64;
                    for (r, ((drow, grow), xrow)) in
                        d.chunks_mut(dim).zip(gy.chunks(dim)).zip(xhat.chunks(dim)).enumerate()
                    {
                        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(g, a)| g * a).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            drow[j] += inv_std[r] / nd * (nd * dxhat[j] - s1 - xrow[j] * s2);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, c_out, cols } => {
                let (p, kk) = (geom.out_len(), geom.patch_len());
                g.with(*w, |d| gemm(*c_out, p, kk, gy, false, cols, true, d, true));
                if let Some(b) = b {
                    g.with(*b, |d| {
                        for (co, row) in gy.chunks(p).enumerate() {
                            d[co] += row.iter().sum::<f64>();
                        }
                    });
                }
                if g.wants(*x) {
                    let wv = g.value(*w).data();
                    let mut dcols = vec![0.0; kk * p];
                    gemm(kk, *c_out, p, wv, true, gy, false, &mut dcols, false);
                    g.with(*x, |d| col2im_add(&dcols, geom, d));
                }
            }
            Op::AvgPool2 { x, c, h, w } => {
                let (ho, wo) = (h / 2, w / 2);
                g.with(*x, |d| {
                    for ch in 0..*c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gv = 0.25 * gy[(ch * ho + i) * wo + j];
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    d[(ch * h + 2 * i + di) * w + 2 * j + dj] += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::BilinearSample { map, points } => {
                let mv = g.value(*map);
                let pv = g.value(*points).data();
                let [c, h, w] = dims3(&mv);
                let mut dmap = g.wants(*map).then(|| vec![0.0; mv.len()]);
                let mut dpts = vec![0.0; pv.len()];
                for (n, pt) in pv.chunks(2).enumerate() {
                    if let Some(st) = Stencil::new(pt[0], pt[1], h, w) {
                        let (du, dv) = st.backward(mv.data(), h, w, 0, &gy[n * c..(n + 1) * c], dmap.as_deref_mut());
                        dpts[2 * n] = du;
                        dpts[2 * n + 1] = dv;
                    }
                }
                if let Some(dm) = dmap {
                    g.with(*map, |d| axpy(d, &dm, 1.0));
                }
                g.with(*points, |d| axpy(d, &dpts, 1.0));
            }
            Op::MsDeformAttn(m) => ms_deform_attn_backward(m, gy, g),
            Op::Gather { x, idx } => g.with(*x, |d| {
                for (gy, &i) in gy.iter().zip(idx) {
                    d[i] += gy;
                }
            }),
            Op::ScatterAdd { x, idx } => g.with(*x, |d| {
                for (d, &i) in d.iter_mut().zip(idx) {
                    if i != usize::MAX {
                        *d += gy[i];
                    }
                }
            }),
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut c0 = 0;
                for &(v, cols) in parts {
                    g.with(v, |d| {
                        for r in 0..*rows {
                            axpy(&mut d[r * cols..(r + 1) * cols], &gy[r * total + c0..r * total + c0 + cols], 1.0);
                        }
                    });
                    c0 += cols;
                }
            }
            Op::ChannelScale { x, s } => {
                let sv = g.value(*s).data();
                let plane = g.value(*x).len() / sv.len();
                g.with(*x, |d| {
                    for (c, (drow, grow)) in d.chunks_mut(plane).zip(gy.chunks(plane)).enumerate() {
                        axpy(drow, grow, sv[c]);
                    }
                });
                let xv = g.value(*x).data();
                g.with(*s, |d| {
                    for (c, (grow, xrow)) in gy.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                        d[c] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::OuterLift { fused, probs } => {
                let fv = g.value(*fused).data();
                let pv = g.value(*probs).data();
                let c = g.value(*fused).shape()[0];
                let bins = g.value(*probs).shape()[0];
                let hw = fv.len() / c;
                g.with(*fused, |d| {
                    for px in 0..hw {
                        for b in 0..bins {
                            let row = &gy[(px * bins + b) * c..][..c];
                            let p = pv[b * hw + px];
                            for ch in 0..c {
                                d[ch * hw + px] += p * row[ch];
                            }
                        }
                    }
                });
                g.with(*probs, |d| {
                    for px in 0..hw {
                        for b in 0..bins {
                            let row = &gy[(px * bins + b) * c..][..c];
                            d[b * hw + px] += (0..c).map(|ch| row[ch] * fv[ch * hw + px]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Sum(x) => g.with(*x, |d| d.iter_mut().for_each(|d| *d += gy[0])),
            Op::FocalLoss { logits, target, alpha, beta, norm } => {
                let xv = g.value(*logits).data();
                g.with(*logits, |d| {
                    for ((d, &x), &t) in d.iter_mut().zip(xv).zip(target) {
                        let p = sigmoid(x);
                        let deriv = if t == 1.0 {
                            (1.0 - p).powf(*alpha) * (-alpha * p * (-softplus(-x)) + (1.0 - p))
                        } else {
                            (1.0 - t).powf(*beta) * p.powf(*alpha) * (alpha * (1.0 - p) * (-softplus(x)) - p)
                        };
                        *d -= gy[0] * deriv / norm;
                    }
                });
            }
            Op::MaskedL1 { pred, target, cells, plane, norm } => {
                let pv = g.value(*pred).data();
                let channels = pv.len() / plane;
                g.with(*pred, |d| {
                    for ch in 0..channels {
                        for (k, &cell) in cells.iter().enumerate() {
                            let i = ch * plane + cell;
                            let diff = pv[i] - target[ch * cells.len() + k];
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d[i] += gy[0] * sign / norm;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                g.with(*logits, |d| {
                    for (i, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                        let (k, col) = (i / n, i % n);
                        let onehot = if labels[col] == k { 1.0 } else { 0.0 };
                        *d += gy[0] * (p - onehot) / n as f64;
                    }
                });
            }
        }
    }
}

fn axpy(d: &mut [f64], x: &[f64], a: f64) {
    for (d, x) in d.iter_mut().zip(x) {
        *d += a * x;
    }
}

fn dims3(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    [s[0], s[1], s[2]]
}

fn ms_deform_attn_backward(m: &MsDeformAttn, gy: &[f64], g: &mut GradSink<'_>) {
    let (heads, levels, points) = (m.heads, m.levels, m.points);
    let maps: Vec<&Tensor> = m.values.iter().map(|v| g.value(*v)).collect();
    let off = g.value(m.offsets).data();
    let wts = g.value(m.weights).data();
    let c = maps[0].shape()[0];
    let dh = c / heads;
    let mut dmaps: Vec<Option<Vec<f64>>> =
        m.values.iter().zip(&maps).map(|(v, t)| g.wants(*v).then(|| vec![0.0; t.len()])).collect();
    let mut doff = vec![0.0; off.len()];
    let mut dw = vec![0.0; wts.len()];
    let mut sample = vec![0.0; dh];
    let mut scaled = vec![0.0; dh];
    for q in 0..m.refs.len() {
        for h in 0..heads {
            let gq = &gy[q * c + h * dh..q * c + (h + 1) * dh];
            for l in 0..levels {
                let [_, hl, wl] = dims3(&maps[l]);
                for p in 0..points {
                    let s = slot(q, h, l, p, heads, levels, points);
                    let (u, v) = m.location(q, off, s, hl, wl);
                    let Some(st) = Stencil::new(u, v, hl, wl) else { continue };
                    sample.fill(0.0);
                    st.gather_add(maps[l].data(), hl, wl, h * dh, 1.0, &mut sample);
                    dw[s] = gq.iter().zip(&sample).map(|(a, b)| a * b).sum();
                    for (sc, gv) in scaled.iter_mut().zip(gq) {
                        *sc = wts[s] * gv;
                    }
                    let (du, dv) = st.backward(maps[l].data(), hl, wl, h * dh, &scaled, dmaps[l].as_deref_mut());
                    doff[2 * s] = du * wl as f64;
                    doff[2 * s + 1] = dv * hl as f64;
                }
            }
        }
    }
    for (v, dm) in m.values.iter().zip(dmaps) {
        if let Some(dm) = dm {
            g.with(*v, |d| axpy(d, &dm, 1.0));
        }
    }
    g.with(m.offsets, |d| axpy(d, &doff, 1.0));
    g.with(m.weights, |d| axpy(d, &dw, 1.0));
}

fn dim_err(msg: String) -> TensorError {
    TensorError::Dimension(msg)
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same-shape zip")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect()).expect("map keeps shape")
    }

    fn dims3_of(&self, x: Var, op: &str) -> Result<[usize; 3]> {
        match *self.shape(x) {
            [c, h, w] => Ok([c, h, w]),
            ref s => Err(dim_err(format!("{op}: expected a C×H×W tensor, got {s:?}"))),
        }
    }

    fn dims2_of(&self, x: Var, op: &str) -> Result<[usize; 2]> {
        match *self.shape(x) {
            [r, c] => Ok([r, c]),
            ref s => Err(dim_err(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let y = self.map(x, |v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    /// Adds `bias` (length = last-axis extent) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let m = self.value(bias).len();
        let last = self.shape(x).last().copied().unwrap_or(1);
        if last != m || self.value(bias).rank() != 1 {
            return Err(dim_err(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(m) {
            row.iter_mut().zip(b).for_each(|(r, b)| *r += b);
        }
        self.push(y, Op::AddBias { x, bias })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ([m, k], [r, c]) = (self.dims2_of(a, "matmul")?, self.dims2_of(b, "matmul")?);
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(dim_err(format!("matmul: inner dimensions of {sa:?} and {sb:?} disagree")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n, trans_b })
    }

    /// `x · w + b` for `x: [n×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.dims2_of(x, "transpose")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x, rows: r, cols: c })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.map(x, sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(dim_err(format!("softmax: axis {axis} of {shape:?} is empty")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (xv[at(k)] - mx).exp();
                    y[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[at(k)] /= s;
                }
            }
        }
        self.push(Tensor::new(shape, y)?, Op::Softmax { x, outer, len, inner })
    }

    /// Per-row normalization over the last axis (`eps = 1e-5`), then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let dim = self.value(gamma).len();
        let last = self.shape(x).last().copied().unwrap_or(0);
        if last != dim || self.value(beta).len() != dim {
            return Err(dim_err(format!(
                "layer_norm: gamma/beta of length {dim} do not match {:?}",
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / dim.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..dim {
                let xh = (row[j] - mean) * inv;
                xhat[r * dim + j] = xh;
                y[r * dim + j] = gam[j] * xh + bet[j];
            }
        }
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// 2D convolution of a `C_in×H×W` map with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [c_in, h, wd] = self.dims3_of(x, "conv2d")?;
        let ks = self.shape(w).to_vec();
        let [c_out, kc, kh, kw] = match ks[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(dim_err(format!("conv2d: kernel must be 4-D, got {ks:?}"))),
        };
        if kc != c_in {
            return Err(dim_err(format!(
                "conv2d: kernel {ks:?} expects {kc} input channels but input is {:?}",
                self.shape(x)
            )));
        }
        if kh != kw {
            return Err(dim_err(format!("conv2d: kernel must be square, got {ks:?}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(dim_err(format!("conv2d: bias {:?} for {c_out} output channels", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, kh, stride, pad)
            .ok_or_else(|| dim_err(format!("conv2d: input {h}×{wd} too small for kernel {kh} with pad {pad}")))?;
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.out_len();
        let mut out = vec![0.0; c_out * p];
        gemm(c_out, geom.patch_len(), p, self.value(w).data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (co, row) in out.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let y = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        self.push(y, Op::Conv2d { x, w, b, geom, c_out, cols })
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = self.dims3_of(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err(format!("avg_pool2: spatial dims {h}×{w} are not even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let at = |di: usize, dj: usize| xv[(ch * h + 2 * i + di) * w + 2 * j + dj];
                    out[(ch * ho + i) * wo + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out)?, Op::AvgPool2 { x, c, h, w })
    }

    /// Samples a `C×H×W` map at `N×2` continuous `(u, v)` pixel coordinates,
    /// returning `N×C`. Points outside `[0, W-1]×[0, H-1]` yield zeros.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let [c, h, w] = self.dims3_of(map, "bilinear_sample")?;
        let [n, two] = self.dims2_of(points, "bilinear_sample")?;
        if two != 2 {
            return Err(dim_err(format!("bilinear_sample: points must be N×2, got {:?}", self.shape(points))));
        }
        let (mv, pv) = (self.value(map).data(), self.value(points).data());
        let mut out = vec![0.0; n * c];
        for (i, pt) in pv.chunks(2).enumerate() {
            if let Some(st) = Stencil::new(pt[0], pt[1], h, w) {
                st.gather_add(mv, h, w, 0, 1.0, &mut out[i * c..(i + 1) * c]);
            }
        }
        self.push(Tensor::new(vec![n, c], out)?, Op::BilinearSample { map, points })
    }

    /// Multi-scale deformable gather.
    ///
    /// `values[l]` is a `C×H_l×W_l` level, `offsets` is `Q×(heads·levels·points·2)`
    /// in normalized image units, `weights` is `Q×(heads·levels·points)`. Query `q`
    /// samples level `l` at `(ref_q + offset) ⊙ (W_l, H_l) − 0.5`; head `h` reads
    /// channel slice `h·C/heads..(h+1)·C/heads`. Output is `Q×C`.
    #[allow(clippy::too_many_arguments)]
    pub fn ms_deform_attn(
        &mut self,
        values: &[Var],
        offsets: Var,
        weights: Var,
        refs: &[(f64, f64)],
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let levels = values.len();
        if levels == 0 || heads == 0 || points == 0 {
            return Err(dim_err("ms_deform_attn: levels, heads and points must be positive".into()));
        }
        let mut dims = Vec::with_capacity(levels);
        for &v in values {
            dims.push(self.dims3_of(v, "ms_deform_attn")?);
        }
        let c = dims[0][0];
        if dims.iter().any(|d| d[0] != c) || c % heads != 0 {
            return Err(dim_err(format!("ms_deform_attn: level channels {dims:?} incompatible with {heads} heads")));
        }
        let q = refs.len();
        let slots = heads * levels * points;
        if self.shape(offsets) != [q, slots * 2] || self.shape(weights) != [q, slots] {
            return Err(dim_err(format!(
                "ms_deform_attn: offsets {:?} / weights {:?} do not match {q} queries × {slots} slots",
                self.shape(offsets),
                self.shape(weights)
            )));
        }
        let m = MsDeformAttn {
            values: values.to_vec(),
            offsets,
            weights,
            refs: refs.to_vec(),
            heads,
            levels,
            points,
        };
        let dh = c / heads;
        let off = self.value(offsets).data();
        let wts = self.value(weights).data();
        let mut out = vec![0.0; q * c];
        for qi in 0..q {
            for h in 0..heads {
                let dst = &mut out[qi * c + h * dh..qi * c + (h + 1) * dh];
                for (l, &[_, hl, wl]) in dims.iter().enumerate() {
                    let map = self.value(values[l]).data();
                    for p in 0..points {
                        let s = slot(qi, h, l, p, heads, levels, points);
                        let (u, v) = m.location(qi, off, s, hl, wl);
                        if let Some(st) = Stencil::new(u, v, hl, wl) {
                            st.gather_add(map, hl, wl, h * dh, wts[s], dst);
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![q, c], out)?, Op::MsDeformAttn(Box::new(m)))
    }

    /// `y.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(dim_err(format!("gather: index {bad} out of range for {} elements", xv.len())));
        }
        let y = Tensor::new(shape.to_vec(), idx.iter().map(|&i| xv[i]).collect())?;
        self.push(y, Op::Gather { x, idx })
    }

    /// `y.flat[idx[i]] += x.flat[i]`; entries equal to `usize::MAX` are dropped.
    pub fn scatter_add(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if idx.len() != xv.len() {
            return Err(dim_err(format!("scatter_add: {} indices for {} elements", idx.len(), xv.len())));
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for (&i, v) in idx.iter().zip(xv) {
            if i == usize::MAX {
                continue;
            }
            if i >= n {
                return Err(dim_err(format!("scatter_add: target {i} out of range for {n} elements")));
            }
            out[i] += v;
        }
        self.push(Tensor::new(shape.to_vec(), out)?, Op::ScatterAdd { x, idx })
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims2_of(p, "concat_cols")?);
        }
        let rows = dims.first().map(|d| d[0]).unwrap_or(0);
        if dims.iter().any(|d| d[0] != rows) {
            return Err(dim_err(format!("concat_cols: row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d[1]).sum();
        let mut out = vec![0.0; rows * total];
        let mut c0 = 0;
        for (&p, d) in parts.iter().zip(&dims) {
            let pv = self.value(p).data();
            for r in 0..rows {
                out[r * total + c0..r * total + c0 + d[1]].copy_from_slice(&pv[r * d[1]..(r + 1) * d[1]]);
            }
            c0 += d[1];
        }
        let meta = parts.iter().zip(&dims).map(|(&p, d)| (p, d[1])).collect();
        self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols { parts: meta, rows })
    }

    /// Multiplies channel `c` of a `C×…` tensor by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.shape(x).first().copied().unwrap_or(0);
        if self.value(s).len() != c || c == 0 {
            return Err(dim_err(format!(
                "channel_scale: scale {:?} vs input {:?}",
                self.shape(s),
                self.shape(x)
            )));
        }
        let sv = self.value(s).data();
        let mut y = self.value(x).clone();
        let plane = y.len() / c;
        for (ch, row) in y.data_mut().chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v *= sv[ch]);
        }
        self.push(y, Op::ChannelScale { x, s })
    }

    /// Outer product of a `C×H×W` feature map with a `B×H×W` distribution:
    /// row `(i·W + j)·B + b` of the `(H·W·B)×C` result is `probs[b,i,j] · fused[:,i,j]`.
    pub fn outer_lift(&mut self, fused: Var, probs: Var) -> Result<Var> {
        let [c, h, w] = self.dims3_of(fused, "outer_lift")?;
        let [bins, ph, pw] = self.dims3_of(probs, "outer_lift")?;
        if (ph, pw) != (h, w) {
            return Err(dim_err(format!(
                "outer_lift: features {h}×{w} and height distribution {ph}×{pw} are not aligned"
            )));
        }
        let (fv, pv) = (self.value(fused).data(), self.value(probs).data());
        let hw = h * w;
        let mut out = vec![0.0; hw * bins * c];
        for px in 0..hw {
            for b in 0..bins {
                let p = pv[b * hw + px];
                let row = &mut out[(px * bins + b) * c..][..c];
                for (ch, r) in row.iter_mut().enumerate() {
                    *r = p * fv[ch * hw + px];
                }
            }
        }
        self.push(Tensor::new(vec![hw * bins, c], out)?, Op::OuterLift { fused, probs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Penalty-reduced focal loss on heatmap logits (CenterNet form), normalized
    /// by the number of cells whose target is exactly 1.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(dim_err(format!(
                "focal_loss: logits {:?} vs target {:?}",
                self.shape(logits),
                target.shape()
            )));
        }
        let xv = self.value(logits).data();
        let n_pos = target.data().iter().filter(|&&t| t == 1.0).count();
        let norm = n_pos.max(1) as f64;
        let mut total = 0.0;
        for (&x, &t) in xv.iter().zip(target.data()) {
            let (log_p, log_1mp) = (-softplus(-x), -softplus(x));
            let p = sigmoid(x);
            total += if t == 1.0 {
                (1.0 - p).powf(alpha) * log_p
            } else {
                (1.0 - t).powf(beta) * p.powf(alpha) * log_1mp
            };
        }
        let op = Op::FocalLoss { logits, target: target.data().to_vec(), alpha, beta, norm };
        self.push(Tensor::scalar(-total / norm), op)
    }

    /// L1 over the listed cells of every channel of a `K×H×W` prediction,
    /// normalized by the number of cells. `target` is `K×cells.len()`.
    pub fn masked_l1(&mut self, pred: Var, target: &[f64], cells: &[usize]) -> Result<Var> {
        let [k, h, w] = self.dims3_of(pred, "masked_l1")?;
        let plane = h * w;
        if target.len() != k * cells.len() || cells.iter().any(|&c| c >= plane) {
            return Err(dim_err("masked_l1: target/cell list inconsistent with prediction".into()));
        }
        let pv = self.value(pred).data();
        let norm = cells.len().max(1) as f64;
        let mut total = 0.0;
        for ch in 0..k {
            for (i, &cell) in cells.iter().enumerate() {
                total += (pv[ch * plane + cell] - target[ch * cells.len() + i]).abs();
            }
        }
        let op = Op::MaskedL1 { pred, target: target.to_vec(), cells: cells.to_vec(), plane, norm };
        self.push(Tensor::scalar(total / norm), op)
    }

    /// Mean cross-entropy of `K×N` logits (classes along axis 0) against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let k = shape.first().copied().unwrap_or(0);
        let n = labels.len();
        if k == 0 || k * n != self.value(logits).len() || labels.iter().any(|&l| l >= k) {
            return Err(dim_err(format!("softmax_cross_entropy: logits {shape:?} vs {n} labels")));
        }
        let xv = self.value(logits).data();
        let mut probs = vec![0.0; xv.len()];
        let mut total = 0.0;
        for col in 0..n {
            let mx = (0..k).map(|c| xv[c * n + col]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (xv[c * n + col] - mx).exp()).sum::<f64>().ln();
            for c in 0..k {
                probs[c * n + col] = (xv[c * n + col] - lse).exp();
            }
            total += lse - xv[labels[col] * n + col];
        }
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(total / n.max(1) as f64), op)
    }
}
