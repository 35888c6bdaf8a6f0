//! Forward rules. Each method records one node on the tape.

use super::kernels::{self, ConvGeom};
use super::{Bcast, Graph, Op, Var};
use crate::error::{Error, Result};

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    let is_suffix =
        |small: &[usize], big: &[usize]| small.len() <= big.len() && big[big.len() - small.len()..] == *small;
    if nb == 1 || (nb < na && is_suffix(b, a)) {
        return Ok((a.to_vec(), Bcast::Rhs(nb)));
    }
    if na == 1 || (na < nb && is_suffix(a, b)) {
        return Ok((b.to_vec(), Bcast::Lhs(na)));
    }
    Err(Error::dim(op, a, b))
}

impl Graph {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (shape, bc) = broadcast(name, self.shape(a), self.shape(b))?;
        let n: usize = shape.iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let value = (0..n).map(|i| f(va[bc.lhs(i)], vb[bc.rhs(i)])).collect();
        Ok(self.push(value, shape, make(a, b, bc)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op)
    }

    /// Elementwise sum; the smaller operand may be a scalar or a trailing
    /// sub-shape of the larger one.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], vec![], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![s], vec![], Op::Mean(a))
    }

    /// Sums `[B, C, ...]` over every axis except the channel axis.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() < 2 {
            return Err(Error::shape("channel_sum", format!("rank {} < 2", shape.len())));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for bi in 0..b {
            for (ci, o) in out.iter_mut().enumerate() {
                let s = &v[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                *o += s.iter().sum::<f64>();
            }
        }
        Ok(self.push(out, vec![c], Op::ChannelSum(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b)))
    }

    /// Batched matmul `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            kernels::gemm_nn(
                &va[i * m * k..],
                &vb[i * k * n..],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(out, vec![bs, m, n], Op::Bmm(a, b)))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(a), r, c);
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Ok(self.push(out, shape, Op::TransposeLast2(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a)))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (v[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(out, shape, Op::Softmax { x, outer, n, inner }))
    }

    /// 2-D cross-correlation. `x: [B, C, H, W]`, `w: [O, C, kh, kw]`,
    /// optional `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let (bs, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("conv2d bias", self.shape(b), &[o]));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![0.0; pl * ol];
        let mut out = vec![0.0; bs * o * ol];
        let (vx, vw) = (self.value(x), self.value(w));
        for bi in 0..bs {
            kernels::im2col(&vx[bi * c * h * wd..(bi + 1) * c * h * wd], &geom, &mut cols);
            let ob = &mut out[bi * o * ol..(bi + 1) * o * ol];
            if let Some(b) = b {
                for (oc, row) in ob.chunks_mut(ol).enumerate() {
                    row.fill(self.nodes[b.0].value[oc]);
                }
            }
            kernels::gemm_nn(vw, &cols, ob, o, pl, ol);
        }
        Ok(self.push(
            out,
            vec![bs, o, geom.out_h, geom.out_w],
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: bs,
                out_ch: o,
            },
        ))
    }

    /// 2×2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("avg_pool2x", format!("needs even [B,C,H,W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(x);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &v[p * h * w..];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    out[(p * oh + i) * ow + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r0 + w] + src[r0 + w + 1]);
                }
            }
        }
        Ok(self.push(out, vec![s[0], s[1], oh, ow], Op::AvgPool2(x)))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(
                "upsample_nearest2x",
                format!("needs [B,C,H,W], got {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let v = self.value(x);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = v[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(out, vec![s[0], s[1], oh, ow], Op::Upsample2(x)))
    }

    /// Single-group normalization: each sample is standardized over all of
    /// its `C·H·W` values, then scaled and shifted per channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("group_norm", format!("rank {} < 2", s.len())));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("group_norm", self.shape(gamma), &[c]));
        }
        let bs = s[0];
        let inner: usize = s[2..].iter().product();
        let per = c * inner;
        let v = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; v.len()];
        let mut means = Vec::with_capacity(bs);
        let mut rstds = Vec::with_capacity(bs);
        for bi in 0..bs {
            let xs = &v[bi * per..(bi + 1) * per];
            let mean = xs.iter().sum::<f64>() / per as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / per as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in 0..c {
                for k in 0..inner {
                    let i = ci * inner + k;
                    out[bi * per + i] = (xs[i] - mean) * rstd * gv[ci] + bv[ci];
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(
            out,
            s,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Row lookup into a `[K, D]` table; the result has shape `out_shape`
    /// whose last extent is `D` and whose row count equals `idx.len()`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be 2-D, got {ts:?}")));
        }
        let (k, d) = (ts[0], ts[1]);
        if out_shape.last() != Some(&d) || out_shape.iter().product::<usize>() != idx.len() * d {
            return Err(Error::dim("gather_rows", &ts, out_shape));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::shape("gather_rows", format!("index {bad} >= {k}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            out,
            out_shape.to_vec(),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Per-batch token gather: `src: [B, T, D]`, `idx` holds `B·Tq` token
    /// ids in `[0, T)`; the result is `[B, Tq, D]`.
    pub fn gather_tokens(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != 3 || !idx.len().is_multiple_of(s[0]) {
            return Err(Error::shape("gather_tokens", format!("src {s:?}, {} ids", idx.len())));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let tq = idx.len() / b;
        if let Some(bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::shape("gather_tokens", format!("token {bad} >= {t}")));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(b * tq * d);
        for bi in 0..b {
            for q in 0..tq {
                let j = idx[bi * tq + q];
                out.extend_from_slice(&v[(bi * t + j) * d..(bi * t + j + 1) * d]);
            }
        }
        Ok(self.push(out, vec![b, tq, d], Op::GatherTokens { src, idx: idx.to_vec() }))
    }

    /// Forward value is exactly `quantized`; the backward pass copies the
    /// upstream gradient to `con` unchanged and sends nothing to `quantized`.
    pub fn straight_through(&mut self, con: Var, quantized: Var) -> Result<Var> {
        if self.shape(con) != self.shape(quantized) {
            return Err(Error::dim("straight_through", self.shape(con), self.shape(quantized)));
        }
        let value = self.value(quantized).to_vec();
        let shape = self.shape(con).to_vec();
        Ok(self.push(value, shape, Op::StraightThrough { con }))
    }

    /// `[B, C, H, W] -> [B, H·W, C]`
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("to_tokens", format!("needs [B,C,H,W], got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..hw {
                    out[(bi * hw + t) * c + ci] = v[(bi * c + ci) * hw + t];
                }
            }
        }
        Ok(self.push(out, vec![b, hw, c], Op::NchwToTokens(x)))
    }

    /// `[B, H·W, C] -> [B, C, H, W]`
    pub fn from_tokens(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != height * width {
            return Err(Error::dim("from_tokens", &s, &[height, width]));
        }
        let (b, hw, c) = (s[0], s[1], s[2]);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for bi in 0..b {
            for t in 0..hw {
                for ci in 0..c {
                    out[(bi * c + ci) * hw + t] = v[(bi * hw + t) * c + ci];
                }
            }
        }
        Ok(self.push(out, vec![b, c, height, width], Op::TokensToNchw(x)))
    }
}

pub(crate) fn transpose_blocks(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (blk, src) in v.chunks(r * c).enumerate() {
        let dst = &mut out[blk * r * c..(blk + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
