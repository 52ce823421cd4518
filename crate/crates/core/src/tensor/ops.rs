use std::sync::Arc;

use super::{gemm, Float, Tensor, Var};

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn new_tensor<F: Float>(shape: &[usize], data: Vec<F>) -> Tensor<F> {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

/// Geometry of a 2D convolution over one sample.
#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Float>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'g, F: Float> Var<'g, F> {
    fn unary(
        self,
        value: Tensor<F>,
        backward: impl Fn(&Tensor<F>) -> Tensor<F> + 'static,
    ) -> Var<'g, F> {
        self.graph.push_op(value, &[self.id], move |g, _| vec![Some(backward(g))])
    }

    pub fn add(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = (self.value(), other.value());
        let out = a.add(&b).expect("add: shape mismatch");
        self.graph
            .push_op(out, &[self.id, other.id], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = (self.value(), other.value());
        let out = a.sub(&b).expect("sub: shape mismatch");
        self.graph
            .push_op(out, &[self.id, other.id], |g, _| vec![Some(g.clone()), Some(g.scale(-F::one()))])
    }

    pub fn mul(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y).expect("mul: shape mismatch");
        self.graph.push_op(out, &[self.id, other.id], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |g, x| g * x).unwrap()),
            ]
        })
    }

    pub fn scale(self, s: F) -> Var<'g, F> {
        let out = self.value().scale(s);
        self.unary(out, move |g| g.scale(s))
    }

    pub fn silu(self) -> Var<'g, F> {
        let x = self.value();
        let out = x.map(|v| v * sigmoid(v));
        self.unary(out, move |g| {
            g.zip_map(&x, |g, v| {
                let s = sigmoid(v);
                g * s * (F::one() + v * (F::one() - s))
            })
            .unwrap()
        })
    }

    pub fn tanh(self) -> Var<'g, F> {
        let y = Arc::new(self.value().map(|v| v.tanh()));
        let y2 = Arc::clone(&y);
        self.graph.push_op((*y).clone(), &[self.id], move |g, _| {
            vec![Some(g.zip_map(&y2, |g, y| g * (F::one() - y * y)).unwrap())]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, F> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).expect("reshape: element count mismatch");
        self.unary(out, move |g| g.clone().reshape(&in_shape).unwrap())
    }

    pub fn sum(self) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.data()[0]))
    }

    /// Mean over all elements of `(self - target)^2`.
    pub fn mse(self, target: Var<'g, F>) -> Var<'g, F> {
        let (p, t) = (self.value(), target.value());
        let diff = p.sub(&t).expect("mse: shape mismatch");
        let n = F::of(diff.numel() as f64);
        let loss = diff.data().iter().map(|&d| d * d).sum::<F>() / n;
        self.graph.push_op(Tensor::scalar(loss), &[self.id, target.id], move |g, need| {
            let k = F::of(2.0) * g.data()[0] / n;
            let gp = diff.scale(k);
            vec![need[0].then(|| gp.clone()), need[1].then(|| gp.scale(-F::one()))]
        })
    }

    /// `y = x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g, F>, bias: Option<Var<'g, F>>) -> Var<'g, F> {
        let (x, w) = (self.value(), weight.value());
        let (n, d_in) = (x.shape()[0], x.shape()[1]);
        let d_out = w.shape()[0];
        assert_eq!(w.shape()[1], d_in, "linear: weight {:?} vs input {:?}", w.shape(), x.shape());
        let mut out = vec![F::zero(); n * d_out];
        if let Some(b) = &bias {
            let b = b.value();
            assert_eq!(b.numel(), d_out);
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(false, true, n, d_out, d_in, F::one(), x.data(), w.data(), F::one(), &mut out);
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = &bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        self.graph.push_op(new_tensor(&[n, d_out], out), &parents, move |g, need| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dx = vec![F::zero(); n * d_in];
                gemm(false, false, n, d_in, d_out, F::one(), gd, w.data(), F::zero(), &mut dx);
                new_tensor(&[n, d_in], dx)
            });
            let dw = need[1].then(|| {
                let mut dw = vec![F::zero(); d_out * d_in];
                gemm(true, false, d_out, d_in, n, F::one(), gd, x.data(), F::zero(), &mut dw);
                new_tensor(&[d_out, d_in], dw)
            });
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(need[2].then(|| {
                    let mut db = vec![F::zero(); d_out];
                    for row in gd.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    new_tensor(&[d_out], db)
                }));
            }
            res
        })
    }

    /// 2D convolution, `x: [N, Ci, H, W]`, `W: [Co, Ci, k, k]`, square kernel,
    /// symmetric zero padding.
    pub fn conv2d(
        self,
        weight: Var<'g, F>,
        bias: Option<Var<'g, F>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, F> {
        let (x, w) = (self.value(), weight.value());
        let (n, c_in, h, wd) = x.dims4();
        let ws = w.shape();
        let (c_out, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c_in, "conv2d: weight {ws:?} vs input {:?}", x.shape());
        assert_eq!(ws[3], k, "conv2d: square kernels only");
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_per = c_in * h * wd;
        let out_per = c_out * cols;
        let mut out = vec![F::zero(); n * out_per];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * cols] };
        let bias_v = bias.map(|b| b.value());
        for i in 0..n {
            let xi = &x.data()[i * in_per..(i + 1) * in_per];
            let oi = &mut out[i * out_per..(i + 1) * out_per];
            if let Some(b) = &bias_v {
                for (co, plane) in oi.chunks_mut(cols).enumerate() {
                    plane.iter_mut().for_each(|v| *v = b.data()[co]);
                }
            }
            let src: &[F] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut col);
                &col
            };
            gemm(false, false, c_out, cols, rows, F::one(), w.data(), src, F::one(), oi);
        }
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = &bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        let out_shape = [n, c_out, geom.h_out, geom.w_out];
        self.graph.push_op(new_tensor(&out_shape, out), &parents, move |g, need| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![F::zero(); n * in_per]);
            let mut dw = need[1].then(|| vec![F::zero(); c_out * rows]);
            let mut col = vec![F::zero(); if geom.is_pointwise() { 0 } else { rows * cols }];
            let mut dcol = vec![F::zero(); rows * cols];
            for i in 0..n {
                let gi = &gd[i * out_per..(i + 1) * out_per];
                if let Some(dw) = &mut dw {
                    let xi = &x.data()[i * in_per..(i + 1) * in_per];
                    let src: &[F] = if geom.is_pointwise() {
                        xi
                    } else {
                        im2col(xi, &geom, &mut col);
                        &col
                    };
                    gemm(false, true, c_out, rows, cols, F::one(), gi, src, F::one(), dw);
                }
                if let Some(dx) = &mut dx {
                    let dxi = &mut dx[i * in_per..(i + 1) * in_per];
                    if geom.is_pointwise() {
                        gemm(true, false, rows, cols, c_out, F::one(), w.data(), gi, F::one(), dxi);
                    } else {
                        gemm(true, false, rows, cols, c_out, F::one(), w.data(), gi, F::zero(), &mut dcol);
                        col2im_add(&dcol, &geom, dxi);
                    }
                }
            }
            let mut res = vec![
                dx.map(|d| new_tensor(&[n, c_in, h, wd], d)),
                dw.map(|d| new_tensor(&[c_out, c_in, k, k], d)),
            ];
            if has_bias {
                res.push(need[2].then(|| {
                    let mut db = vec![F::zero(); c_out];
                    for gi in gd.chunks(out_per) {
                        for (co, plane) in gi.chunks(cols).enumerate() {
                            db[co] += plane.iter().copied().sum::<F>();
                        }
                    }
                    new_tensor(&[c_out], db)
                }));
            }
            res
        })
    }

    /// Group normalization without affine parameters; statistics per sample
    /// and per group of `C / groups` channels.
    pub fn group_norm(self, groups: usize, eps: f64) -> Var<'g, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let m = (c / groups) * h * w;
        let eps = F::of(eps);
        let mut y = vec![F::zero(); x.numel()];
        let mut rstd = vec![F::zero(); n * groups];
        for (gi, (seg, out)) in x.data().chunks(m).zip(y.chunks_mut(m)).enumerate() {
            let mf = F::of(m as f64);
            let mean = seg.iter().copied().sum::<F>() / mf;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
            let r = F::one() / (var + eps).sqrt();
            rstd[gi] = r;
            out.iter_mut().zip(seg).for_each(|(o, &v)| *o = (v - mean) * r);
        }
        let y = Arc::new(new_tensor(x.shape(), y));
        let y2 = Arc::clone(&y);
        self.graph.push_op((*y).clone(), &[self.id], move |g, _| {
            let mut dx = vec![F::zero(); g.numel()];
            let mf = F::of(m as f64);
            for (gi, ((gs, ys), ds)) in
                g.data().chunks(m).zip(y2.data().chunks(m)).zip(dx.chunks_mut(m)).enumerate()
            {
                let mean_g = gs.iter().copied().sum::<F>() / mf;
                let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<F>() / mf;
                let r = rstd[gi];
                for ((d, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                    *d = r * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(new_tensor(g.shape(), dx))]
        })
    }

    /// Adds a per-sample, per-channel vector `b: [N, C]` to `x: [N, C, H, W]`.
    pub fn add_channel(self, b: Var<'g, F>) -> Var<'g, F> {
        let (x, bv) = (self.value(), b.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(bv.shape(), [n, c], "add_channel: {:?} vs {:?}", bv.shape(), x.shape());
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (plane, &bias) in out.chunks_mut(hw).zip(bv.data()) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
        self.graph.push_op(new_tensor(x.shape(), out), &[self.id, b.id], move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| {
                    let db = g.data().chunks(hw).map(|p| p.iter().copied().sum::<F>()).collect();
                    new_tensor(&[n, c], db)
                }),
            ]
        })
    }

    /// Multiplies `x: [N, C, H, W]` by a per-sample, per-channel `s: [N, C]`.
    pub fn mul_channel(self, s: Var<'g, F>) -> Var<'g, F> {
        let (x, sv) = (self.value(), s.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(sv.shape(), [n, c], "mul_channel: {:?} vs {:?}", sv.shape(), x.shape());
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (plane, &k) in out.chunks_mut(hw).zip(sv.data()) {
            plane.iter_mut().for_each(|v| *v *= k);
        }
        self.graph.push_op(new_tensor(x.shape(), out), &[self.id, s.id], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = g.data().to_vec();
                for (plane, &k) in dx.chunks_mut(hw).zip(sv.data()) {
                    plane.iter_mut().for_each(|v| *v *= k);
                }
                new_tensor(g.shape(), dx)
            });
            let ds = need[1].then(|| {
                let ds = g
                    .data()
                    .chunks(hw)
                    .zip(x.data().chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<F>())
                    .collect();
                new_tensor(&[n, c], ds)
            });
            vec![dx, ds]
        })
    }

    /// Columns `[start, start + len)` of a `[N, D]` matrix.
    pub fn narrow_cols(self, start: usize, len: usize) -> Var<'g, F> {
        let x = self.value();
        let (n, d) = (x.shape()[0], x.shape()[1]);
        assert!(start + len <= d, "narrow_cols out of range");
        let out: Vec<F> = x.data().chunks(d).flat_map(|r| r[start..start + len].iter().copied()).collect();
        self.unary(new_tensor(&[n, len], out), move |g| {
            let mut dx = vec![F::zero(); n * d];
            for (dr, gr) in dx.chunks_mut(d).zip(g.data().chunks(len)) {
                dr[start..start + len].copy_from_slice(gr);
            }
            new_tensor(&[n, d], dx)
        })
    }

    /// Concatenation along the channel axis of rank-4 (or rank-2) tensors.
    pub fn concat_channels(parts: &[Var<'g, F>]) -> Var<'g, F> {
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let hw = h * w;
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels: mismatched {:?}", v.shape());
                vc
            })
            .collect();
        let c_total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * c_total * hw);
        for i in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let rank4 = values[0].shape().len() == 4;
        let shape: Vec<usize> = if rank4 { vec![n, c_total, h, w] } else { vec![n, c_total] };
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.push_op(new_tensor(&shape, out), &ids, move |g, need| {
            let gd = g.data();
            let mut offsets = Vec::with_capacity(chans.len());
            let mut acc = 0;
            for &c in &chans {
                offsets.push(acc);
                acc += c;
            }
            chans
                .iter()
                .zip(&offsets)
                .zip(&shapes)
                .zip(need)
                .map(|(((&c, &off), shape), &needed)| {
                    needed.then(|| {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let base = (i * c_total + off) * hw;
                            d.extend_from_slice(&gd[base..base + c * hw]);
                        }
                        new_tensor(shape, d)
                    })
                })
                .collect()
        })
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(self) -> Var<'g, F> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); n * c * h2 * w2];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.unary(new_tensor(&[n, c, h2, w2], out), move |g| {
            let mut dx = vec![F::zero(); n * c * h * w];
            for (src, dst) in g.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
            new_tensor(&[n, c, h, w], dx)
        })
    }

    /// Multi-head dot-product self-attention over spatial positions.
    ///
    /// `self` holds fused projections `[N, 3·C, H, W]`; head `h` reads
    /// channels `[3·d·h, 3·d·(h+1))` split into query, key and value blocks of
    /// `d = C / heads` channels. Returns `[N, C, H, W]`.
    pub fn attention(self, heads: usize) -> Var<'g, F> {
        let qkv = self.value();
        let (n, c3, h, w) = qkv.dims4();
        assert!(c3 % (3 * heads) == 0, "attention: {c3} channels for {heads} heads");
        let d = c3 / (3 * heads);
        let l = h * w;
        let scale = F::one() / F::of(d as f64).sqrt();
        let blocks = n * heads;
        let mut out = vec![F::zero(); n * heads * d * l];
        let mut probs = vec![F::zero(); blocks * l * l];
        let mut scores = vec![F::zero(); l * l];
        for b in 0..blocks {
            let base = b * 3 * d * l;
            let q = &qkv.data()[base..base + d * l];
            let k = &qkv.data()[base + d * l..base + 2 * d * l];
            let v = &qkv.data()[base + 2 * d * l..base + 3 * d * l];
            // scores[t, s] = scale · Σ_c q[c, t] k[c, s]
            gemm(true, false, l, l, d, scale, q, k, F::zero(), &mut scores);
            let p = &mut probs[b * l * l..(b + 1) * l * l];
            for (prow, srow) in p.chunks_mut(l).zip(scores.chunks(l)) {
                let mx = srow.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for (pv, &sv) in prow.iter_mut().zip(srow) {
                    *pv = (sv - mx).exp();
                    z += *pv;
                }
                prow.iter_mut().for_each(|pv| *pv = *pv / z);
            }
            // out[c, t] = Σ_s v[c, s] p[t, s]
            gemm(false, true, d, l, l, F::one(), v, p, F::zero(), &mut out[b * d * l..(b + 1) * d * l]);
        }
        self.unary(new_tensor(&[n, heads * d, h, w], out), move |g| {
            let mut dqkv = vec![F::zero(); qkv.numel()];
            let mut dp = vec![F::zero(); l * l];
            for b in 0..blocks {
                let base = b * 3 * d * l;
                let q = &qkv.data()[base..base + d * l];
                let k = &qkv.data()[base + d * l..base + 2 * d * l];
                let v = &qkv.data()[base + 2 * d * l..base + 3 * d * l];
                let p = &probs[b * l * l..(b + 1) * l * l];
                let go = &g.data()[b * d * l..(b + 1) * d * l];
                let (dq, rest) = dqkv[base..base + 3 * d * l].split_at_mut(d * l);
                let (dk, dv) = rest.split_at_mut(d * l);
                // dv = go · p
                gemm(false, false, d, l, l, F::one(), go, p, F::zero(), dv);
                // dp[t, s] = Σ_c go[c, t] v[c, s]
                gemm(true, false, l, l, d, F::one(), go, v, F::zero(), &mut dp);
                for (dprow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
                    let dot: F = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dprow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                // dq[c, t] = scale · Σ_s ds[t, s] k[c, s]
                gemm(false, true, d, l, l, scale, k, &dp, F::zero(), dq);
                // dk[c, s] = scale · Σ_t ds[t, s] q[c, t]
                gemm(false, false, d, l, l, scale, q, &dp, F::zero(), dk);
            }
            new_tensor(qkv.shape(), dqkv)
        })
    }
}
