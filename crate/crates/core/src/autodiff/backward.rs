//! Vector-Jacobian products, one arm per [`Op`].

use super::kernels;
use super::ops::{sigmoid, transpose_blocks};
use super::{Bcast, Node, Op, Var};

type Grads = [Option<Vec<f64>>];

/// Runs `f` on the gradient buffer of `v`, allocating zeros on first touch.
/// Inputs that do not need a gradient are skipped entirely.
fn with_grad(nodes: &[Node], grads: &mut Grads, v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(buf);
}

fn binary(
    nodes: &[Node],
    grads: &mut Grads,
    a: Var,
    b: Var,
    bc: Bcast,
    g: &[f64],
    da: impl Fn(usize, usize, usize) -> f64,
    db: impl Fn(usize, usize, usize) -> f64,
) {
    with_grad(nodes, grads, a, |ga| {
        for (i, gi) in g.iter().enumerate() {
            let (ia, ib) = (bc.lhs(i), bc.rhs(i));
            ga[ia] += gi * da(i, ia, ib);
        }
    });
    with_grad(nodes, grads, b, |gb| {
        for (i, gi) in g.iter().enumerate() {
            let (ia, ib) = (bc.lhs(i), bc.rhs(i));
            gb[ib] += gi * db(i, ia, ib);
        }
    });
}

fn unary(nodes: &[Node], grads: &mut Grads, a: Var, g: &[f64], d: impl Fn(usize) -> f64) {
    with_grad(nodes, grads, a, |ga| {
        for (i, gi) in g.iter().enumerate() {
            ga[i] += gi * d(i);
        }
    });
}

pub(super) fn vjp(nodes: &[Node], i: usize, g: &[f64], grads: &mut Grads) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        &Op::Add(a, b, bc) => binary(nodes, grads, a, b, bc, g, |_, _, _| 1.0, |_, _, _| 1.0),
        &Op::Sub(a, b, bc) => binary(nodes, grads, a, b, bc, g, |_, _, _| 1.0, |_, _, _| -1.0),
        &Op::Mul(a, b, bc) => {
            let (va, vb) = (val(a), val(b));
            binary(nodes, grads, a, b, bc, g, |_, _, ib| vb[ib], |_, ia, _| va[ia]);
        }
        &Op::Div(a, b, bc) => {
            let (va, vb) = (val(a), val(b));
            binary(
                nodes,
                grads,
                a,
                b,
                bc,
                g,
                |_, _, ib| 1.0 / vb[ib],
                |_, ia, ib| -va[ia] / (vb[ib] * vb[ib]),
            );
        }
        &Op::Scale(a, s) => unary(nodes, grads, a, g, |_| s),
        &Op::AddScalar(a) => unary(nodes, grads, a, g, |_| 1.0),
        &Op::Relu(a) => {
            let x = val(a);
            unary(nodes, grads, a, g, |k| if x[k] > 0.0 { 1.0 } else { 0.0 });
        }
        &Op::Sigmoid(a) => unary(nodes, grads, a, g, |k| y[k] * (1.0 - y[k])),
        &Op::Softplus(a) => {
            let x = val(a);
            unary(nodes, grads, a, g, |k| sigmoid(x[k]));
        }
        &Op::Ln(a) => {
            let x = val(a);
            unary(nodes, grads, a, g, |k| 1.0 / x[k]);
        }
        &Op::Exp(a) => unary(nodes, grads, a, g, |k| y[k]),
        &Op::Square(a) => {
            let x = val(a);
            unary(nodes, grads, a, g, |k| 2.0 * x[k]);
        }
        &Op::Sqrt(a) => unary(nodes, grads, a, g, |k| 0.5 / y[k]),
        &Op::Sum(a) => with_grad(nodes, grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        &Op::Mean(a) => {
            let s = g[0] / val(a).len() as f64;
            with_grad(nodes, grads, a, |ga| ga.iter_mut().for_each(|x| *x += s));
        }
        &Op::ChannelSum(a) => {
            let c = g.len();
            let inner: usize = nodes[a.0].shape[2..].iter().product();
            with_grad(nodes, grads, a, |ga| {
                for (blk, chunk) in ga.chunks_mut(inner).enumerate() {
                    let gc = g[blk % c];
                    chunk.iter_mut().for_each(|x| *x += gc);
                }
            });
        }
        &Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(a), val(b));
            with_grad(nodes, grads, a, |ga| kernels::gemm_nt(g, vb, ga, m, n, k));
            with_grad(nodes, grads, b, |gb| kernels::gemm_tn(va, g, gb, k, m, n));
        }
        &Op::Bmm(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (va, vb) = (val(a), val(b));
            with_grad(nodes, grads, a, |ga| {
                for t in 0..bs {
                    kernels::gemm_nt(
                        &g[t * m * n..],
                        &vb[t * k * n..],
                        &mut ga[t * m * k..(t + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            with_grad(nodes, grads, b, |gb| {
                for t in 0..bs {
                    kernels::gemm_tn(
                        &va[t * m * k..],
                        &g[t * m * n..],
                        &mut gb[t * k * n..(t + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
            });
        }
        &Op::TransposeLast2(a) => {
            // output is [.., c, r]; transposing it back gives the input layout
            let s = &node.shape;
            let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
            let back = transpose_blocks(g, c, r);
            with_grad(nodes, grads, a, |ga| {
                ga.iter_mut().zip(&back).for_each(|(x, d)| *x += d)
            });
        }
        &Op::Reshape(a) | &Op::StraightThrough { con: a } => {
            with_grad(nodes, grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
        }
        &Op::Softmax { x, outer, n, inner } => {
            with_grad(nodes, grads, x, |gx| {
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        &Op::Conv2d {
            x,
            w,
            b,
            geom,
            batch,
            out_ch,
        } => {
            let (pl, ol) = (geom.patch_len(), geom.out_len());
            let in_len = geom.channels * geom.height * geom.width;
            let (vx, vw) = (val(x), val(w));
            if let Some(b) = b {
                with_grad(nodes, grads, b, |gb| {
                    for bi in 0..batch {
                        for (oc, gbo) in gb.iter_mut().enumerate() {
                            let s = &g[(bi * out_ch + oc) * ol..(bi * out_ch + oc + 1) * ol];
                            *gbo += s.iter().sum::<f64>();
                        }
                    }
                });
            }
            let need_w = nodes[w.0].needs_grad;
            let need_x = nodes[x.0].needs_grad;
            let mut cols = vec![0.0; pl * ol];
            if need_w {
                with_grad(nodes, grads, w, |gw| {
                    for bi in 0..batch {
                        kernels::im2col(&vx[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
                        let gb = &g[bi * out_ch * ol..(bi + 1) * out_ch * ol];
                        kernels::gemm_nt(gb, &cols, gw, out_ch, ol, pl);
                    }
                });
            }
            if need_x {
                with_grad(nodes, grads, x, |gx| {
                    for bi in 0..batch {
                        cols.fill(0.0);
                        let gb = &g[bi * out_ch * ol..(bi + 1) * out_ch * ol];
                        kernels::gemm_tn(vw, gb, &mut cols, pl, out_ch, ol);
                        kernels::col2im(&cols, &geom, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                });
            }
        }
        &Op::AvgPool2(a) => {
            let s = &nodes[a.0].shape;
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            with_grad(nodes, grads, a, |ga| {
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = 0.25 * g[(p * oh + i) * ow + j];
                            let r0 = p * h * w + 2 * i * w + 2 * j;
                            ga[r0] += d;
                            ga[r0 + 1] += d;
                            ga[r0 + w] += d;
                            ga[r0 + w + 1] += d;
                        }
                    }
                }
            });
        }
        &Op::Upsample2(a) => {
            let s = &nodes[a.0].shape;
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (2 * h, 2 * w);
            with_grad(nodes, grads, a, |ga| {
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            ga[(p * h + i / 2) * w + j / 2] += g[(p * oh + i) * ow + j];
                        }
                    }
                }
            });
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let s = &nodes[x.0].shape;
            let (bs, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let per = c * inner;
            let (vx, vg) = (val(x), val(gamma));
            let xhat = |bi: usize, k: usize| (vx[bi * per + k] - mean[bi]) * rstd[bi];
            with_grad(nodes, grads, beta, |gbeta| {
                for bi in 0..bs {
                    for (ci, gb) in gbeta.iter_mut().enumerate() {
                        let o = bi * per + ci * inner;
                        *gb += g[o..o + inner].iter().sum::<f64>();
                    }
                }
            });
            with_grad(nodes, grads, gamma, |ggam| {
                for bi in 0..bs {
                    for (ci, gg) in ggam.iter_mut().enumerate() {
                        for k in 0..inner {
                            let at = ci * inner + k;
                            *gg += g[bi * per + at] * xhat(bi, at);
                        }
                    }
                }
            });
            with_grad(nodes, grads, x, |gx| {
                for bi in 0..bs {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for ci in 0..c {
                        for k in 0..inner {
                            let at = ci * inner + k;
                            let dxh = g[bi * per + at] * vg[ci];
                            m1 += dxh;
                            m2 += dxh * xhat(bi, at);
                        }
                    }
                    m1 /= per as f64;
                    m2 /= per as f64;
                    for ci in 0..c {
                        for k in 0..inner {
                            let at = ci * inner + k;
                            let dxh = g[bi * per + at] * vg[ci];
                            gx[bi * per + at] += rstd[bi] * (dxh - m1 - xhat(bi, at) * m2);
                        }
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].shape[*axis] * inner;
                with_grad(nodes, grads, p, |gp| {
                    for o in 0..outer {
                        let src = &g[o * row + off..o * row + off + len];
                        gp[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, d)| *x += d);
                    }
                });
                off += len;
            }
        }
        Op::GatherRows { table, idx } => {
            let d = nodes[table.0].shape[1];
            with_grad(nodes, grads, *table, |gt| {
                for (r, &k) in idx.iter().enumerate() {
                    gt[k * d..(k + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(x, dv)| *x += dv);
                }
            });
        }
        Op::GatherTokens { src, idx } => {
            let s = &nodes[src.0].shape;
            let (b, t, d) = (s[0], s[1], s[2]);
            let tq = idx.len() / b;
            with_grad(nodes, grads, *src, |gs| {
                for bi in 0..b {
                    for q in 0..tq {
                        let j = idx[bi * tq + q];
                        let o = (bi * tq + q) * d;
                        gs[(bi * t + j) * d..(bi * t + j + 1) * d]
                            .iter_mut()
                            .zip(&g[o..o + d])
                            .for_each(|(x, dv)| *x += dv);
                    }
                }
            });
        }
        &Op::NchwToTokens(a) => {
            let s = &nodes[a.0].shape;
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            with_grad(nodes, grads, a, |ga| {
                for bi in 0..b {
                    for ci in 0..c {
                        for t in 0..hw {
                            ga[(bi * c + ci) * hw + t] += g[(bi * hw + t) * c + ci];
                        }
                    }
                }
            });
        }
        &Op::TokensToNchw(a) => {
            let s = &nodes[a.0].shape;
            let (b, hw, c) = (s[0], s[1], s[2]);
            with_grad(nodes, grads, a, |ga| {
                for bi in 0..b {
                    for t in 0..hw {
                        for ci in 0..c {
                            ga[(bi * hw + t) * c + ci] += g[(bi * c + ci) * hw + t];
                        }
                    }
                }
            });
        }
    }
}
