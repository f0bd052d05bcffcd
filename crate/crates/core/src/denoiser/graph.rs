//! A small reverse-mode autodiff tape covering exactly the layers the
//! reference network uses: 3x3/1x1 convolutions (stride 1 or 2), group
//! normalization, SiLU, nearest 2x upsampling, channel concat, dense layers
//! and broadcast channel biases.
//!
//! Tensors are single-sample `(channels, height, width)` blocks; batching is
//! done by the caller, one tape per sample.

use std::fmt::Debug;

use num_traits::Float;

/// Scalar type the network can run in.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    /// `c = a · b (+ c)`; all matrices row-major, `a` is `m x k`
    /// (stored `k x m` when `a_t`), `b` is `k x n` (stored `n x k` when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], acc: bool);

    #[inline]
    fn of(v: f64) -> Self {
        Self::from(v).expect("representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

macro_rules! impl_element {
    ($t:ty, $f:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                acc: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if acc { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe the stated layouts.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Element> Param<F> {
    pub fn cast<G: Element>(&self) -> Param<G> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }
}

pub type NodeId = usize;
pub type ParamId = usize;

const GN_EPS: f64 = 1e-5;

enum Op<F> {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        k: usize,
        stride: usize,
        cols: Vec<F>,
    },
    GroupNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Upsample {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
}

struct Node<F> {
    c: usize,
    h: usize,
    w: usize,
    value: Vec<F>,
    op: Op<F>,
}

pub struct Graph<'p, F> {
    params: &'p [Param<F>],
    nodes: Vec<Node<F>>,
    record: bool,
}

impl<'p, F: Element> Graph<'p, F> {
    /// `record = false` drops the caches backward needs (inference only).
    pub fn new(params: &'p [Param<F>], record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record,
        }
    }

    fn push(&mut self, c: usize, h: usize, w: usize, value: Vec<F>, op: Op<F>) -> NodeId {
        debug_assert_eq!(value.len(), c * h * w);
        self.nodes.push(Node { c, h, w, value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, c: usize, h: usize, w: usize, value: Vec<F>) -> NodeId {
        self.push(c, h, w, value, Op::Input)
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize, usize) {
        let n = &self.nodes[id];
        (n.c, n.h, n.w)
    }

    pub fn into_value(mut self, id: NodeId) -> Vec<F> {
        std::mem::take(&mut self.nodes[id].value)
    }

    /// Square `k x k` convolution with `k / 2` zero padding.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: ParamId, stride: usize) -> NodeId {
        let (cin, h, wd) = self.shape(x);
        let wshape = &self.params[w].shape;
        let (cout, k) = (wshape[0], wshape[2]);
        assert_eq!(wshape[1], cin, "conv {} input channels", self.params[w].name);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(&self.nodes[x].value, cin, h, wd, k, stride, pad, ho, wo);
        let n = ho * wo;
        let mut out = vec![F::zero(); cout * n];
        F::gemm(cout, cin * k * k, n, &self.params[w].data, false, &cols, false, &mut out, false);
        let bias = &self.params[b].data;
        for (co, row) in out.chunks_exact_mut(n).enumerate() {
            let bv = bias[co];
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
        let cols = if self.record { cols } else { Vec::new() };
        self.push(
            cout,
            ho,
            wo,
            out,
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                cols,
            },
        )
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, groups: usize) -> NodeId {
        let (c, h, w) = self.shape(x);
        assert_eq!(c % groups, 0);
        let cpg = c / groups;
        let hw = h * w;
        let m = (cpg * hw) as f64;
        let xv = &self.nodes[x].value;
        let mut xhat = vec![F::zero(); c * hw];
        let mut rstd = vec![F::zero(); groups];
        for g in 0..groups {
            let range = g * cpg * hw..(g + 1) * cpg * hw;
            let seg = &xv[range.clone()];
            let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / m;
            let var = seg
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / m;
            let r = 1.0 / (var + GN_EPS).sqrt();
            rstd[g] = F::of(r);
            let (mean_f, r_f) = (F::of(mean), F::of(r));
            for (o, &v) in xhat[range].iter_mut().zip(seg) {
                *o = (v - mean_f) * r_f;
            }
        }
        let gd = &self.params[gamma].data;
        let bd = &self.params[beta].data;
        let mut out = vec![F::zero(); c * hw];
        for ch in 0..c {
            let (gv, bv) = (gd[ch], bd[ch]);
            for i in ch * hw..(ch + 1) * hw {
                out[i] = gv * xhat[i] + bv;
            }
        }
        let (xhat, rstd) = if self.record {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            c,
            h,
            w,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.shape(x);
        let out = self.nodes[x]
            .value
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        self.push(c, h, w, out, Op::Silu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (c, h, w) = self.shape(a);
        assert_eq!(self.shape(b), (c, h, w));
        let out = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&p, &q)| p + q)
            .collect();
        self.push(c, h, w, out, Op::Add { a, b })
    }

    /// Adds the vector `v` (shape `(c, 1, 1)`) to every pixel of channel `c`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (c, h, w) = self.shape(x);
        assert_eq!(self.shape(v), (c, 1, 1));
        let hw = h * w;
        let vv = &self.nodes[v].value;
        let mut out = self.nodes[x].value.clone();
        for (ch, row) in out.chunks_exact_mut(hw).enumerate() {
            let b = vv[ch];
            row.iter_mut().for_each(|p| *p = *p + b);
        }
        self.push(c, h, w, out, Op::AddChannel { x, v })
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let (d, h, wd) = self.shape(x);
        assert_eq!((h, wd), (1, 1));
        let shape = &self.params[w].shape;
        let o = shape[0];
        assert_eq!(shape[1], d);
        let mut out = self.params[b].data.clone();
        F::gemm(o, d, 1, &self.params[w].data, false, &self.nodes[x].value, false, &mut out, true);
        self.push(o, 1, 1, out, Op::Linear { x, w, b })
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.shape(x);
        let (h2, w2) = (2 * h, 2 * w);
        let xv = &self.nodes[x].value;
        let mut out = vec![F::zero(); c * h2 * w2];
        for ch in 0..c {
            for r in 0..h2 {
                let src = &xv[ch * h * w + (r / 2) * w..ch * h * w + (r / 2) * w + w];
                let dst = &mut out[ch * h2 * w2 + r * w2..ch * h2 * w2 + (r + 1) * w2];
                for (cc, d) in dst.iter_mut().enumerate() {
                    *d = src[cc / 2];
                }
            }
        }
        self.push(c, h2, w2, out, Op::Upsample { x })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = self.shape(a);
        let (cb, hb, wb) = self.shape(b);
        assert_eq!((h, w), (hb, wb));
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(&self.nodes[a].value);
        out.extend_from_slice(&self.nodes[b].value);
        self.push(ca + cb, h, w, out, Op::Concat { a, b })
    }

    /// Back-propagates `seed` (the gradient of the loss w.r.t. node `out`)
    /// and accumulates parameter gradients into `grads`.
    pub fn backward(&self, out: NodeId, seed: Vec<F>, grads: &mut [Vec<F>]) {
        assert!(self.record, "backward on a graph built without recording");
        let mut g: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out] = Some(seed);
        for id in (0..=out).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    cols,
                } => {
                    let (cin, h, wd) = self.shape(*x);
                    let cout = node.c;
                    let n = node.h * node.w;
                    let r = cin * k * k;
                    F::gemm(cout, n, r, &dy, false, cols, true, &mut grads[*w], true);
                    for (co, row) in dy.chunks_exact(n).enumerate() {
                        let s = row.iter().fold(F::zero(), |acc, &v| acc + v);
                        grads[*b][co] = grads[*b][co] + s;
                    }
                    let mut dcols = vec![F::zero(); r * n];
                    F::gemm(r, cout, n, &self.params[*w].data, true, &dy, false, &mut dcols, false);
                    let dx = accumulator(&mut g, *x, cin * h * wd);
                    col2im(&dcols, dx, cin, h, wd, *k, *stride, k / 2, node.h, node.w);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let (c, h, w) = (node.c, node.h, node.w);
                    let hw = h * w;
                    let cpg = c / groups;
                    let gd = &self.params[*gamma].data;
                    let mut dxhat = vec![F::zero(); c * hw];
                    for ch in 0..c {
                        let mut sg = F::zero();
                        let mut sb = F::zero();
                        for i in ch * hw..(ch + 1) * hw {
                            sg = sg + dy[i] * xhat[i];
                            sb = sb + dy[i];
                            dxhat[i] = dy[i] * gd[ch];
                        }
                        grads[*gamma][ch] = grads[*gamma][ch] + sg;
                        grads[*beta][ch] = grads[*beta][ch] + sb;
                    }
                    let dx = accumulator(&mut g, *x, c * hw);
                    let m = F::of((cpg * hw) as f64);
                    for grp in 0..*groups {
                        let range = grp * cpg * hw..(grp + 1) * cpg * hw;
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for i in range.clone() {
                            s1 = s1 + dxhat[i];
                            s2 = s2 + dxhat[i] * xhat[i];
                        }
                        let r = rstd[grp] / m;
                        for i in range {
                            dx[i] = dx[i] + r * (m * dxhat[i] - s1 - xhat[i] * s2);
                        }
                    }
                }
                Op::Silu { x } => {
                    let xv = &self.nodes[*x].value;
                    let dx = accumulator(&mut g, *x, xv.len());
                    for ((d, &v), &gy) in dx.iter_mut().zip(xv).zip(&dy) {
                        let s = sigmoid(v);
                        *d = *d + gy * s * (F::one() + v * (F::one() - s));
                    }
                }
                Op::Add { a, b } => {
                    add_into(accumulator(&mut g, *a, dy.len()), &dy);
                    add_into(accumulator(&mut g, *b, dy.len()), &dy);
                }
                Op::AddChannel { x, v } => {
                    let hw = node.h * node.w;
                    let dv = accumulator(&mut g, *v, node.c);
                    for (ch, row) in dy.chunks_exact(hw).enumerate() {
                        dv[ch] = dv[ch] + row.iter().fold(F::zero(), |acc, &q| acc + q);
                    }
                    add_into(accumulator(&mut g, *x, dy.len()), &dy);
                }
                Op::Linear { x, w, b } => {
                    let d = self.nodes[*x].c;
                    let o = node.c;
                    F::gemm(o, 1, d, &dy, false, &self.nodes[*x].value, false, &mut grads[*w], true);
                    add_into(&mut grads[*b], &dy);
                    let dx = accumulator(&mut g, *x, d);
                    F::gemm(d, o, 1, &self.params[*w].data, true, &dy, false, dx, true);
                }
                Op::Upsample { x } => {
                    let (c, h, w) = self.shape(*x);
                    let (h2, w2) = (node.h, node.w);
                    let dx = accumulator(&mut g, *x, c * h * w);
                    for ch in 0..c {
                        for r in 0..h2 {
                            for cc in 0..w2 {
                                let i = ch * h * w + (r / 2) * w + cc / 2;
                                dx[i] = dx[i] + dy[ch * h2 * w2 + r * w2 + cc];
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let la = self.nodes[*a].value.len();
                    add_into(accumulator(&mut g, *a, la), &dy[..la]);
                    add_into(accumulator(&mut g, *b, dy.len() - la), &dy[la..]);
                }
            }
        }
    }
}

#[inline]
fn sigmoid<F: Element>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

fn accumulator<F: Element>(g: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut Vec<F> {
    g[id].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Element>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<F> {
    if k == 1 && stride == 1 {
        return x.to_vec();
    }
    let n = ho * wo;
    let mut cols = vec![F::zero(); c * k * k * n];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Element>(
    cols: &[F],
    dx: &mut [F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let n = ho * wo;
    if k == 1 && stride == 1 {
        add_into(dx, cols);
        return;
    }
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, shape: Vec<usize>, f: impl Fn(usize) -> f64) -> Param<f64> {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: (0..len).map(f).collect(),
        }
    }

    /// Direct-summation convolution used to check the im2col path.
    fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &Param<f64>, bias: &[f64], stride: usize) -> Vec<f64> {
        let (co, k) = (wt.shape[0], wt.shape[2]);
        let pad = (k / 2) as isize;
        let ho = (h + 2 * (k / 2) - k) / stride + 1;
        let wo = (w + 2 * (k / 2) - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt.data[((o * c + ci) * k + ky) * k + kx]
                                        * x[ci * h * w + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let params = vec![
            param("w", vec![4, 3, 3, 3], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1),
            param("b", vec![4], |i| i as f64 * 0.01),
        ];
        let x: Vec<f64> = (0..3 * 6 * 6).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        for stride in [1, 2] {
            let mut g = Graph::new(&params, false);
            let xi = g.input(3, 6, 6, x.clone());
            let y = g.conv(xi, 0, 1, stride);
            let want = naive_conv(&x, 3, 6, 6, &params[0], &params[1].data, stride);
            for (a, b) in g.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride}: {a} vs {b}");
            }
        }
    }

    /// Finite-difference check of every op's backward rule on a tiny graph.
    #[test]
    fn backward_matches_finite_differences() {
        let params = vec![
            param("c1.w", vec![4, 2, 3, 3], |i| ((i * 17 % 13) as f64 - 6.0) * 0.05),
            param("c1.b", vec![4], |i| 0.1 * i as f64),
            param("gn.g", vec![4], |i| 1.0 + 0.1 * i as f64),
            param("gn.b", vec![4], |i| -0.05 * i as f64),
            param("lin.w", vec![4, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3),
            param("lin.b", vec![4], |i| 0.02 * i as f64),
            param("down.w", vec![4, 4, 3, 3], |i| ((i * 29 % 17) as f64 - 8.0) * 0.03),
            param("down.b", vec![4], |_| 0.0),
            param("out.w", vec![1, 8, 1, 1], |i| 0.2 * i as f64 - 0.5),
            param("out.b", vec![1], |_| 0.1),
        ];
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| ((i * 31 % 19) as f64 - 9.0) * 0.1).collect();
        let v: Vec<f64> = vec![0.3, -0.7, 1.1];
        let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();

        let run = |params: &[Param<f64>], grads: Option<&mut Vec<Vec<f64>>>| -> f64 {
            let mut g = Graph::new(params, grads.is_some());
            let xi = g.input(2, 4, 4, x.clone());
            let vi = g.input(3, 1, 1, v.clone());
            let h = g.conv(xi, 0, 1, 1);
            let h = g.group_norm(h, 2, 3, 2);
            let h = g.silu(h);
            let e = g.linear(vi, 4, 5);
            let h = g.add_channel(h, e);
            let d = g.conv(h, 6, 7, 2);
            let u = g.upsample(d);
            let s = g.add(u, h);
            let cat = g.concat(s, h);
            let out = g.conv(cat, 8, 9, 1);
            let y = g.value(out).to_vec();
            let loss: f64 = y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
            if let Some(grads) = grads {
                let seed = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
                g.backward(out, seed, grads);
            }
            loss
        };

        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        run(&params, Some(&mut grads));
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for j in (0..p.data.len()).step_by(3) {
                let mut plus = params.clone();
                plus[pi].data[j] += h;
                let mut minus = params.clone();
                minus[pi].data[j] -= h;
                let fd = (run(&plus, None) - run(&minus, None)) / (2.0 * h);
                let an = grads[pi][j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "{}[{j}]: fd {fd} vs analytic {an}",
                    p.name
                );
            }
        }
    }
}
