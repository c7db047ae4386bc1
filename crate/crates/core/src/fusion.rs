//! Per-scale spatial attention, batch-instance normalization, and the
//! shared channel gate that fuses the pyramid into one embedding.

use rand::Rng;

use crate::autodiff::{UnfoldSpec, Var};
use crate::backbone::{FeatureMapPyramid, NUM_STAGES};
use crate::error::{contract, shape_err, Result};
use crate::nn::{Linear, Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::Tensor;

pub const SPATIAL_KERNEL: usize = 7;

/// Channel max- and mean-pooling, a learned 7×7 window projection over the
/// edge-padded pooled map, and a sigmoid map that rescales every channel at
/// each position.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub proj: Linear,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(
                store,
                name,
                SPATIAL_KERNEL * SPATIAL_KERNEL * 2,
                1,
                true,
                rng,
            ),
        }
    }

    pub fn forward(&self, s: &mut Session, fmap: Var) -> Result<Var> {
        Ok(self.forward_with_map(s, fmap)?.0)
    }

    /// Returns the reweighted map and the `(B,H,W,1)` attention map.
    pub fn forward_with_map(&self, s: &mut Session, fmap: Var) -> Result<(Var, Var)> {
        let sh = s.g.shape(fmap).to_vec();
        if sh.len() != 4 || sh[1..].contains(&0) {
            return Err(shape_err("spatial_attention", &sh, &[4]));
        }
        let mx = s.g.max_axis(fmap, -1, true)?;
        let avg = s.g.mean_axis(fmap, -1, true)?;
        let pooled = s.g.concat(&[mx, avg], -1)?;
        let padded = edge_pad(s, pooled, SPATIAL_KERNEL / 2)?;
        let windows =
            s.g.unfold(padded, UnfoldSpec::square(SPATIAL_KERNEL, 1, 0))?;
        let logits = self.proj.forward(s, windows)?;
        let map = s.g.sigmoid(logits)?;
        Ok((s.g.mul(fmap, map)?, map))
    }
}

/// Pads `(B,H,W,C)` by `p` on each side, repeating the border values, so a
/// spatially constant map stays constant under the window projection.
fn edge_pad(s: &mut Session, x: Var, p: usize) -> Result<Var> {
    let sh = s.g.shape(x).to_vec();
    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut idx = Vec::with_capacity(b * ph * pw * c);
    for n in 0..b {
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            for x in 0..pw {
                let sx = x.saturating_sub(p).min(w - 1);
                let base = ((n * h + sy) * w + sx) * c;
                idx.extend(base..base + c);
            }
        }
    }
    let flat = s.g.take(x, &idx)?;
    s.g.reshape(flat, &[b, ph, pw, c])
}

/// `y = γ·(ρ·BN(x) + (1−ρ)·IN(x)) + β` over channels-last input
/// `(B, spatial…, C)`. BN pools over batch and space, IN over space only.
#[derive(Clone, Debug)]
pub struct BatchInstanceNorm {
    /// `None` pins ρ to 1, i.e. plain batch normalization.
    pub rho: Option<ParamId>,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub const BIN_EPS: f64 = 1e-5;
pub const BIN_MOMENTUM: f64 = 0.1;
pub const RHO_INIT: f64 = 0.5;

impl BatchInstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let mut bin = Self::batch_only(store, name, channels);
        let rho = store.add(
            format!("{name}.rho"),
            Tensor::full(&[channels], RHO_INIT),
            ParamKind::NoDecay,
        );
        store.set_clamp(rho, 0.0, 1.0);
        bin.rho = Some(rho);
        bin
    }

    pub fn batch_only(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            rho: None,
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::ones(&[channels]),
                ParamKind::NoDecay,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::NoDecay,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
            channels,
            eps: BIN_EPS,
            momentum: BIN_MOMENTUM,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.g.shape(x).to_vec();
        if sh.len() < 2 || *sh.last().unwrap() != self.channels {
            return Err(shape_err("batch_instance_norm", &sh, &[self.channels]));
        }
        let (b, c) = (sh[0], self.channels);
        let spatial = sh[1..sh.len() - 1].iter().product::<usize>();
        let x3 = s.g.reshape(x, &[b, spatial, c])?;

        let bn = match s.mode() {
            Mode::Train => {
                if b < 2 {
                    return Err(contract(
                        "batch_instance_norm needs a batch of at least 2 in train mode",
                    ));
                }
                let flat = s.g.reshape(x3, &[b * spatial, c])?;
                let (norm, mean, var) = normalize_rows(s, flat, self.eps)?;
                let count = (b * spatial) as f64;
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                let m = self.momentum;
                let rm = s.store().value(self.running_mean).clone();
                let rv = s.store().value(self.running_var).clone();
                let mean_v = s.g.value(mean).data().to_vec();
                let var_v = s.g.value(var).data().to_vec();
                let new_rm = Tensor::from_fn(&[c], |i| (1.0 - m) * rm.data()[i] + m * mean_v[i]);
                let new_rv =
                    Tensor::from_fn(&[c], |i| (1.0 - m) * rv.data()[i] + m * var_v[i] * unbias);
                s.record_update(self.running_mean, new_rm);
                s.record_update(self.running_var, new_rv);
                s.g.reshape(norm, &[b, spatial, c])?
            }
            Mode::Eval => {
                let rm = s.param(self.running_mean);
                let rv = s.param(self.running_var);
                let centered = s.g.sub(x3, rm)?;
                let denom = s.g.add_scalar(rv, self.eps)?;
                let denom = s.g.sqrt(denom)?;
                s.g.div(centered, denom)?
            }
        };

        let mixed = match self.rho {
            Some(rho) => {
                let inorm = instance_norm(s, x3, self.eps)?;
                let rho = s.param(rho);
                let diff = s.g.sub(bn, inorm)?;
                let w = s.g.mul(diff, rho)?;
                s.g.add(inorm, w)?
            }
            None => bn,
        };
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let y = s.g.mul(mixed, gamma)?;
        let y = s.g.add(y, beta)?;
        s.g.reshape(y, &sh)
    }
}

/// Normalizes `(N, C)` over rows; returns (normalized, mean, biased var).
fn normalize_rows(s: &mut Session, x: Var, eps: f64) -> Result<(Var, Var, Var)> {
    let mean = s.g.mean_axis(x, 0, true)?;
    let centered = s.g.sub(x, mean)?;
    let sq = s.g.square(centered)?;
    let var = s.g.mean_axis(sq, 0, true)?;
    let denom = s.g.add_scalar(var, eps)?;
    let denom = s.g.sqrt(denom)?;
    Ok((s.g.div(centered, denom)?, mean, var))
}

/// Per-sample, per-channel normalization over the spatial axis of `(B,S,C)`.
fn instance_norm(s: &mut Session, x3: Var, eps: f64) -> Result<Var> {
    let mean = s.g.mean_axis(x3, 1, true)?;
    let centered = s.g.sub(x3, mean)?;
    let sq = s.g.square(centered)?;
    let var = s.g.mean_axis(sq, 1, true)?;
    let denom = s.g.add_scalar(var, eps)?;
    let denom = s.g.sqrt(denom)?;
    s.g.div(centered, denom)
}

/// Shared two-layer gate `sigmoid(W2·ReLU(W1·v))` over `D`-dim descriptors.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

pub const GATE_REDUCTION: usize = 16;

impl ChannelGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (dim / GATE_REDUCTION).max(1);
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
            dim,
        }
    }

    pub fn forward(&self, s: &mut Session, v: Var) -> Result<Var> {
        let sh = s.g.shape(v).to_vec();
        if sh.len() != 2 || sh[1] != self.dim {
            return Err(shape_err("channel_gate", &sh, &[self.dim]));
        }
        let h = self.fc1.forward(s, v)?;
        let h = s.g.relu(h)?;
        let h = self.fc2.forward(s, h)?;
        s.g.sigmoid(h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `Σ_s gate_s ⊙ v_s`, shape `(B, D)`.
    pub fused: Var,
    /// L2-normalized copy of `fused` for retrieval.
    pub retrieval: Var,
    pub descriptors: [Var; NUM_STAGES],
    pub gates: [Var; NUM_STAGES],
}

#[derive(Clone, Debug)]
pub struct PyramidFusion {
    pub spatial: Vec<SpatialAttention>,
    pub norms: Vec<BatchInstanceNorm>,
    pub projections: Vec<Linear>,
    pub gate: ChannelGate,
    pub dim: usize,
}

impl PyramidFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        stage_dims: &[usize; NUM_STAGES],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut spatial = Vec::new();
        let mut norms = Vec::new();
        let mut projections = Vec::new();
        for (i, &c) in stage_dims.iter().enumerate() {
            spatial.push(SpatialAttention::new(
                store,
                &format!("fusion.sa{}", i + 1),
                rng,
            ));
            norms.push(BatchInstanceNorm::new(
                store,
                &format!("fusion.bin{}", i + 1),
                c,
            ));
            projections.push(Linear::new(
                store,
                &format!("fusion.proj{}", i + 1),
                c,
                dim,
                true,
                rng,
            ));
        }
        Self {
            spatial,
            norms,
            projections,
            gate: ChannelGate::new(store, "fusion.gate", dim, rng),
            dim,
        }
    }

    pub fn forward(&self, s: &mut Session, pyr: &FeatureMapPyramid) -> Result<FusionOutput> {
        self.forward_maps(s, &pyr.stages)
    }

    /// Fuses an explicit list of stage maps; all four must be present.
    pub fn forward_maps(&self, s: &mut Session, maps: &[Var]) -> Result<FusionOutput> {
        if maps.len() != NUM_STAGES {
            return Err(contract(format!(
                "fusion needs {NUM_STAGES} stage maps, got {}",
                maps.len()
            )));
        }
        let mut descriptors = Vec::with_capacity(NUM_STAGES);
        let mut gates = Vec::with_capacity(NUM_STAGES);
        for (i, &m) in maps.iter().enumerate() {
            let v = self.describe(s, i, m)?;
            gates.push(self.gate.forward(s, v)?);
            descriptors.push(v);
        }
        let fused = combine(s, &descriptors, &gates)?;
        let retrieval = s.g.l2_normalize(fused)?;
        Ok(FusionOutput {
            fused,
            retrieval,
            descriptors: [
                descriptors[0],
                descriptors[1],
                descriptors[2],
                descriptors[3],
            ],
            gates: [gates[0], gates[1], gates[2], gates[3]],
        })
    }

    /// Spatial attention, BIN, global average pooling and projection to `D`.
    pub fn describe(&self, s: &mut Session, stage: usize, fmap: Var) -> Result<Var> {
        let x = self.spatial[stage].forward(s, fmap)?;
        let x = self.norms[stage].forward(s, x)?;
        let sh = s.g.shape(x).to_vec();
        let x = s.g.reshape(x, &[sh[0], sh[1] * sh[2], sh[3]])?;
        let pooled = s.g.mean_axis(x, 1, false)?;
        self.projections[stage].forward(s, pooled)
    }
}

/// `Σ_s gate_s ⊙ v_s`.
pub fn combine(s: &mut Session, descriptors: &[Var], gates: &[Var]) -> Result<Var> {
    if descriptors.is_empty() || descriptors.len() != gates.len() {
        return Err(contract("combine needs one gate per descriptor"));
    }
    let mut acc = s.g.mul(gates[0], descriptors[0])?;
    for (&v, &g) in descriptors.iter().zip(gates).skip(1) {
        let t = s.g.mul(g, v)?;
        acc = s.g.add(acc, t)?;
    }
    Ok(acc)
}
