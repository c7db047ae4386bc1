//! Forward semantics of every differentiable operation.

use super::shape::{broadcast_index, broadcast_shape, norm_axis, permute_offsets, split_at_axis};
use super::{BinaryKind, Broadcast, Graph, Op, UnaryKind, Var};
use crate::error::{contract, shape_err, ReidError, Result};
use crate::kernels::{gemm, MatRef};
use crate::par;
use crate::tensor::{numel, Tensor};

/// Geometry of a strided sliding-window gather over an NHWC map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnfoldSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl UnfoldSpec {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Output grid extents, `floor((ext + 2·pad − kernel)/stride) + 1`.
    pub fn output_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ext = |e: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            if s == 0 || e + 2 * p < k {
                None
            } else {
                Some((e + 2 * p - k) / s + 1)
            }
        };
        match (
            ext(h, self.kernel.0, self.stride.0, self.padding.0),
            ext(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(ReidError::Config(format!(
                "sliding window {:?} yields a non-positive grid on {h}x{w}",
                self
            ))),
        }
    }
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

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Recip => "reciprocal",
            _ => "unary",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Recip => 1.0 / x,
            UnaryKind::Neg => -x,
            UnaryKind::Square => x * x,
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Gelu => gelu(x),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Scale(c) => c * x,
            UnaryKind::AddScalar(c) => x + c,
            UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }
}

impl Graph {
    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- linear algebra -------------------------------------------------

    /// `(..., m, k) · (..., k, n)`. A rank-2 right operand is shared across
    /// all leading batch dimensions of the left one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            if shared_rhs {
                gemm(
                    MatRef::row_major(ad, batch * m, k),
                    MatRef::row_major(bd, k, n),
                    &mut out,
                    false,
                );
            } else {
                let parallel = batch > 1 && batch * m * k * n >= par::MIN_PARALLEL_WORK;
                par::for_each_chunk_mut(&mut out, m * n, parallel, |i, c| {
                    gemm(
                        MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k),
                        MatRef::row_major(&bd[i * k * n..(i + 1) * k * n], k, n),
                        c,
                        false,
                    )
                });
            }
        }
        let rg = self.req(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, op: &'static str) -> Result<Var> {
        let out_shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let plan = Broadcast {
            a_idx: broadcast_index(self.shape(a), &out_shape),
            b_idx: broadcast_index(self.shape(b), &out_shape),
        };
        let n = numel(&out_shape);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = match (&plan.a_idx, &plan.b_idx) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(bi)) => (0..n).map(|i| f(ad[i], bd[bi[i]])).collect(),
            (Some(ai), None) => (0..n).map(|i| f(ad[ai[i]], bd[i])).collect(),
            (Some(ai), Some(bi)) => (0..n).map(|i| f(ad[ai[i]], bd[bi[i]])).collect(),
        };
        if kind == BinaryKind::Div && bd.contains(&0.0) {
            return Err(ReidError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let rg = self.req(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Binary { a, b, kind, plan },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, "div")
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let xv = self.value(x);
        let domain_ok = match kind {
            UnaryKind::Log => xv.data().iter().all(|&v| v > 0.0),
            UnaryKind::Recip => xv.data().iter().all(|&v| v != 0.0),
            UnaryKind::Sqrt => xv.data().iter().all(|&v| v >= 0.0),
            _ => true,
        };
        if !domain_ok {
            return Err(ReidError::Domain {
                op: kind.name(),
                msg: "argument outside the domain".into(),
            });
        }
        let out = xv.map(|v| kind.apply(v));
        let rg = self.req(&[x]);
        Ok(self.push(out, Op::Unary { x, kind }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Recip)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Neg)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Square)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Gelu)
    }
    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Softplus)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(c))
    }
    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Clamp(lo, hi))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ax = norm_axis("sum", &shape, axis)?;
        let (outer, len, inner) = split_at_axis(&shape, ax);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[ax] = 1;
        } else {
            out_shape.remove(ax);
        }
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let ax = norm_axis("mean", self.shape(x), axis)?;
        let len = self.shape(x)[ax];
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum along `axis`; the gradient routes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ax = norm_axis("max", &shape, axis)?;
        let (outer, len, inner) = split_at_axis(&shape, ax);
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = xd[(o * len + l) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = l;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[ax] = 1;
        } else {
            out_shape.remove(ax);
        }
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::MaxAxis {
                x,
                outer,
                len,
                inner,
                argmax,
            },
            rg,
        ))
    }

    fn softmax_like(&mut self, x: Var, axis: isize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ax = norm_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_at_axis(&shape, ax);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len)
                    .map(|l| xd[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (xd[at(l)] - mx).exp()).sum();
                let lz = z.ln();
                for l in 0..len {
                    out[at(l)] = if log {
                        xd[at(l)] - mx - lz
                    } else {
                        (xd[at(l)] - mx).exp() / z
                    };
                }
            }
        }
        let rg = self.req(&[x]);
        let op = if log {
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            }
        } else {
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            }
        };
        Ok(self.push(Tensor::from_vec(&shape, out), op, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        self.softmax_like(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        self.softmax_like(x, axis, true)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (biased variance, `eps` added inside the square root). No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| contract("layer_norm of a scalar"))?;
        let xd = self.value(x).data();
        let rows = xd.len() / cols;
        let mut out = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm { x, cols, rstd },
            rg,
        ))
    }

    /// Euclidean norm along the last axis (kept as an extent-1 axis), with
    /// `1e-12` added under the root so the zero vector stays differentiable.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| contract("l2_norm of a scalar"))?;
        let xd = self.value(x).data();
        let out: Vec<f64> = xd
            .chunks(cols)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt())
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::L2Norm { x, cols },
            rg,
        ))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let n = self.l2_norm(x)?;
        self.div(x, n)
    }

    /// All-pairs squared Euclidean distances between rows of `(n,d)` and `(m,d)`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("pairwise_sq_dist", &sa, &sb));
        }
        let out = sq_dist_matrix(self.value(a), self.value(b));
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::PairwiseSqDist { a, b }, rg))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.req(&[x]);
        Ok(self.push(v, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..shape.len()).collect::<Vec<_>>() {
            return Err(shape_err("permute", &shape, axes));
        }
        let (out_shape, offsets) = permute_offsets(&shape, axes);
        let xd = self.value(x).data();
        let out: Vec<f64> = offsets.iter().map(|&o| xd[o]).collect();
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = broadcast_shape("broadcast_to", &xs, shape)?;
        if bs != shape {
            return Err(shape_err("broadcast_to", &xs, shape));
        }
        let idx = broadcast_index(&xs, shape).unwrap_or_else(|| (0..numel(shape)).collect());
        let xd = self.value(x).data();
        let out: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let rg = self.req(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::BroadcastTo { x, idx }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: isize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        let ax = norm_axis("concat", &s0, axis)?;
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(d, (a, b))| d != ax && a != b)
            {
                return Err(shape_err("concat", &s0, s));
            }
            sizes.push(s[ax]);
        }
        let (outer, _, inner) = split_at_axis(&s0, ax);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = s0.clone();
        out_shape[ax] = total;
        let rg = self.req(inputs);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                sizes,
                inner,
            },
            rg,
        ))
    }

    /// The slice `start..start+width` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: isize, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ax = norm_axis("narrow", &shape, axis)?;
        if width == 0 || start + width > shape[ax] {
            return Err(shape_err("narrow", &shape, &[start, width]));
        }
        let (outer, len, inner) = split_at_axis(&shape, ax);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xd[base..base + width * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[ax] = width;
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out),
            Op::Narrow {
                x,
                outer,
                len,
                start,
                width,
                inner,
            },
            rg,
        ))
    }

    /// Strided sliding-window patch gather on `(B,H,W,C)`, producing
    /// `(B,OH,OW,kh·kw·C)` with patch entries ordered `(ky, kx, c)` and zero
    /// padding outside the map.
    pub fn unfold(&mut self, x: Var, spec: UnfoldSpec) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("unfold", &s, &[4]));
        }
        let [b, h, w, c] = [s[0], s[1], s[2], s[3]];
        let (oh, ow) = spec.output_extents(h, w)?;
        let (kh, kw) = spec.kernel;
        let patch = kh * kw * c;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * oh * ow * patch];
        let parallel = out.len() >= par::MIN_PARALLEL_WORK;
        par::for_each_chunk_mut(&mut out, oh * ow * patch, parallel, |bi, ob| {
            let xb = &xd[bi * h * w * c..(bi + 1) * h * w * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut ob[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                    for ky in 0..kh {
                        let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = (iy as usize * w + ix as usize) * c;
                            let d0 = (ky * kw + kx) * c;
                            dst[d0..d0 + c].copy_from_slice(&xb[src..src + c]);
                        }
                    }
                }
            }
        });
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[b, oh, ow, patch], out),
            Op::Unfold {
                x,
                spec,
                in_shape: [b, h, w, c],
                out_hw: (oh, ow),
            },
            rg,
        ))
    }

    /// Gathers elements by flat index into a rank-1 tensor.
    pub fn take(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if indices.is_empty() {
            return Err(contract("take with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xd.len()) {
            return Err(shape_err("take", self.shape(x), &[bad]));
        }
        let out: Vec<f64> = indices.iter().map(|&i| xd[i]).collect();
        let rg = self.req(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[indices.len()], out),
            Op::Take {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }
}

/// Exact squared Euclidean distance matrix between the rows of two rank-2
/// tensors (difference-then-square, so `d(x,x) == 0` exactly).
pub fn sq_dist_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[0];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; n * m];
    let parallel = n * m * d >= par::MIN_PARALLEL_WORK;
    par::for_each_chunk_mut(&mut out, m, parallel, |i, row| {
        let ai = &ad[i * d..(i + 1) * d];
        for (j, o) in row.iter_mut().enumerate() {
            let bj = &bd[j * d..(j + 1) * d];
            *o = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    });
    Tensor::from_vec(&[n, m], out)
}
