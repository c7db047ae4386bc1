//! Adjoints of every operation and the reverse sweep.

use super::ops::{sigmoid, GELU_A, GELU_C};
use super::shape::permute_offsets;
use super::{BinaryKind, Graph, Op, UnaryKind, Var};
use crate::error::{contract, Result};
use crate::kernels::{gemm, MatRef};
use crate::par;
use crate::tensor::Tensor;

type Grads = Vec<Option<Vec<f64>>>;

fn accumulate(grads: &mut Grads, g: &Graph, v: Var, delta: Vec<f64>) {
    if !g.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl Graph {
    /// Back-propagates from a scalar `loss`, adding into the `grad` of every
    /// differentiable leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Grads = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, gout));
            } else {
                self.propagate(i, &gout, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            let t = Tensor::from_vec(node.value.shape(), g);
            match &mut node.grad {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut Grads) {
        let y = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    if *shared_rhs {
                        gemm(
                            MatRef::row_major(gout, batch * m, n),
                            MatRef::row_major(bd, k, n).t(),
                            &mut da,
                            false,
                        );
                    } else {
                        let parallel = batch > 1 && batch * m * k * n >= par::MIN_PARALLEL_WORK;
                        par::for_each_chunk_mut(&mut da, m * k, parallel, |bi, c| {
                            gemm(
                                MatRef::row_major(&gout[bi * m * n..(bi + 1) * m * n], m, n),
                                MatRef::row_major(&bd[bi * k * n..(bi + 1) * k * n], k, n).t(),
                                c,
                                false,
                            )
                        });
                    }
                    accumulate(grads, self, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = if *shared_rhs {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            MatRef::row_major(ad, batch * m, k).t(),
                            MatRef::row_major(gout, batch * m, n),
                            &mut db,
                            false,
                        );
                        db
                    } else {
                        let mut db = vec![0.0; batch * k * n];
                        let parallel = batch > 1 && batch * m * k * n >= par::MIN_PARALLEL_WORK;
                        par::for_each_chunk_mut(&mut db, k * n, parallel, |bi, c| {
                            gemm(
                                MatRef::row_major(&ad[bi * m * k..(bi + 1) * m * k], m, k).t(),
                                MatRef::row_major(&gout[bi * m * n..(bi + 1) * m * n], m, n),
                                c,
                                false,
                            )
                        });
                        db
                    };
                    accumulate(grads, self, *b, db);
                }
            }
            Op::Binary { a, b, kind, plan } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let ia = |j: usize| plan.a_idx.as_ref().map_or(j, |v| v[j]);
                let ib = |j: usize| plan.b_idx.as_ref().map_or(j, |v| v[j]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for (j, &g) in gout.iter().enumerate() {
                        let (pa, pb) = (ia(j), ib(j));
                        da[pa] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g,
                            BinaryKind::Mul => g * bd[pb],
                            BinaryKind::Div => g / bd[pb],
                        };
                    }
                    accumulate(grads, self, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for (j, &g) in gout.iter().enumerate() {
                        let (pa, pb) = (ia(j), ib(j));
                        db[pb] += match kind {
                            BinaryKind::Add => g,
                            BinaryKind::Sub => -g,
                            BinaryKind::Mul => g * ad[pa],
                            BinaryKind::Div => -g * ad[pa] / (bd[pb] * bd[pb]),
                        };
                    }
                    accumulate(grads, self, *b, db);
                }
            }
            Op::Unary { x, kind } => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = gout
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(&g, (&xv, &yv))| g * unary_derivative(*kind, xv, yv))
                    .collect();
                accumulate(grads, self, *x, dx);
            }
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        dx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gout[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::MaxAxis {
                x,
                outer,
                len,
                inner,
                argmax,
            } => {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let l = argmax[o * inner + i];
                        dx[(o * len + l) * inner + i] += gout[o * inner + i];
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..*len).map(|l| gout[at(l)] * y[at(l)]).sum();
                        for l in 0..*len {
                            dx[at(l)] = y[at(l)] * (gout[at(l)] - dot);
                        }
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: f64 = (0..*len).map(|l| gout[at(l)]).sum();
                        for l in 0..*len {
                            dx[at(l)] = gout[at(l)] - y[at(l)].exp() * gs;
                        }
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::LayerNorm { x, cols, rstd } => {
                let c = *cols;
                let mut dx = vec![0.0; y.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let g = &gout[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let mg = g.iter().sum::<f64>() / c as f64;
                    let mgy = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rs * (g[j] - mg - yr[j] * mgy);
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::L2Norm { x, cols } => {
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; xd.len()];
                for (r, (&g, &nrm)) in gout.iter().zip(y).enumerate() {
                    for j in 0..*cols {
                        dx[r * cols + j] = g * xd[r * cols + j] / nrm;
                    }
                }
                accumulate(grads, self, *x, dx);
            }
            Op::PairwiseSqDist { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, d) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[0];
                let (ad, bd) = (av.data(), bv.data());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let g = gout[i * m + j];
                        if g == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = 2.0 * g * (ad[i * d + t] - bd[j * d + t]);
                            da[i * d + t] += diff;
                            db[j * d + t] -= diff;
                        }
                    }
                }
                accumulate(grads, self, *a, da);
                accumulate(grads, self, *b, db);
            }
            Op::Reshape { x } => accumulate(grads, self, *x, gout.to_vec()),
            Op::Permute { x, axes } => {
                // scatter back through the forward offsets
                let (_, offsets) = permute_offsets(self.shape(*x), axes);
                let mut dx = vec![0.0; gout.len()];
                for (&o, &g) in offsets.iter().zip(gout) {
                    dx[o] = g;
                }
                accumulate(grads, self, *x, dx);
            }
            Op::BroadcastTo { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&o, &g) in idx.iter().zip(gout) {
                    dx[o] += g;
                }
                accumulate(grads, self, *x, dx);
            }
            Op::Concat {
                inputs,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut off = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if self.requires_grad(v) {
                        let mut dx = Vec::with_capacity(outer * sz * inner);
                        for o in 0..*outer {
                            let base = (o * total + off) * inner;
                            dx.extend_from_slice(&gout[base..base + sz * inner]);
                        }
                        accumulate(grads, self, v, dx);
                    }
                    off += sz;
                }
            }
            Op::Narrow {
                x,
                outer,
                len,
                start,
                width,
                inner,
            } => {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let base = (o * len + start) * inner;
                    dx[base..base + width * inner]
                        .copy_from_slice(&gout[o * width * inner..(o + 1) * width * inner]);
                }
                accumulate(grads, self, *x, dx);
            }
            Op::Unfold {
                x,
                spec,
                in_shape,
                out_hw,
            } => {
                let [b, h, w, c] = *in_shape;
                let (oh, ow) = *out_hw;
                let (kh, kw) = spec.kernel;
                let patch = kh * kw * c;
                let mut dx = vec![0.0; b * h * w * c];
                let parallel = gout.len() >= par::MIN_PARALLEL_WORK;
                par::for_each_chunk_mut(&mut dx, h * w * c, parallel, |bi, xb| {
                    let gb = &gout[bi * oh * ow * patch..(bi + 1) * oh * ow * patch];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src = &gb[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                            for ky in 0..kh {
                                let iy =
                                    (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * spec.stride.1 + kx) as isize
                                        - spec.padding.1 as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let dst = (iy as usize * w + ix as usize) * c;
                                    let s0 = (ky * kw + kx) * c;
                                    for t in 0..c {
                                        xb[dst + t] += src[s0 + t];
                                    }
                                }
                            }
                        }
                    }
                });
                accumulate(grads, self, *x, dx);
            }
            Op::Take { x, indices } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&i, &g) in indices.iter().zip(gout) {
                    dx[i] += g;
                }
                accumulate(grads, self, *x, dx);
            }
        }
    }
}

fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Sqrt => 0.5 / y,
        UnaryKind::Recip => -y * y,
        UnaryKind::Neg => -1.0,
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Scale(c) => c,
        UnaryKind::AddScalar(_) => 1.0,
        UnaryKind::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}
