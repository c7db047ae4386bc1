//! Named central-difference gradient checks over ops, losses and modules.
//!
//! Non-scalar outputs are reduced with a fixed random readout `Σ w⊙y`, so
//! symmetric reductions (such as a plain sum of a softmax) cannot hide
//! errors. Module checks use small layers with parameters widened to
//! `PARAM_STD` so gradients are far from the noise floor.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_at, GradCheckReport, Graph, UnfoldSpec, Var};
use crate::backbone::{BackboneConfig, PyramidBackbone, SpatialReductionAttention};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::fusion::{BatchInstanceNorm, ChannelGate, PyramidFusion, SpatialAttention};
use crate::heads::{HeadOutputs, LogVarClamp};
use crate::losses::{
    multitask_loss, ua_camid_loss, ua_center_loss, ua_soft_triplet, ua_softmax_ce, ua_triplet_loss,
    LossConfig,
};
use crate::model::ReidModel;
use crate::nn::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const PARAM_STD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Op,
    Loss,
    Module,
}

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub group: Group,
    pub tol: f64,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

impl GradCase {
    pub fn check(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ w⊙y` with `w` drawn from `seed`.
pub fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut rng(seed ^ 0x5EED));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Runs `f` in a session whose graph is `g`; parameters enter as constants.
fn in_session<T>(
    store: &ParamStore,
    mode: Mode,
    g: &mut Graph,
    f: impl FnOnce(&mut Session) -> Result<T>,
) -> Result<T> {
    let mut s = Session::with(store, mode, false);
    s.swap_graph(g);
    let r = f(&mut s);
    s.swap_graph(g);
    r
}

fn widen(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed ^ 0xA11);
    for e in store.entries_mut() {
        if e.trainable() {
            let noise = Tensor::randn(e.value.shape(), PARAM_STD, &mut r);
            e.value.add_assign(&noise);
            if let Some((lo, hi)) = e.clamp {
                e.value = e.value.map(|v| v.clamp(lo, hi));
            }
        }
    }
}

fn subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v = sample(&mut rng(seed ^ 0xC0), n, k).into_vec();
    v.sort_unstable();
    v
}

fn unary(
    seed: u64,
    lo: f64,
    hi: f64,
    f: fn(&mut Graph, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let x = Tensor::uniform(&[3, 4], lo, hi, &mut rng(seed));
    grad_check(
        move |g, x| {
            let y = f(g, x)?;
            readout(g, y, seed)
        },
        &x,
        STEP,
    )
}

macro_rules! unary_case {
    ($name:literal, $lo:expr, $hi:expr, $m:ident) => {
        GradCase {
            name: $name,
            group: Group::Op,
            tol: OP_TOL,
            run: |seed| unary(seed, $lo, $hi, |g, x| g.$m(x)),
        }
    };
}

fn op_binary(seed: u64, which: usize) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut r);
    let c = Tensor::uniform(&[4], 0.5, 2.0, &mut r);
    grad_check(
        move |g, x| {
            let c = g.constant(c.clone());
            let y = match which {
                0 => g.add(c, x)?,
                1 => g.sub(c, x)?,
                2 => g.mul(x, c)?,
                _ => {
                    let a = g.div(c, x)?;
                    let b = g.div(x, c)?;
                    g.add(a, b)?
                }
            };
            readout(g, y, seed)
        },
        &x,
        STEP,
    )
}

fn op_matmul(seed: u64, batched: bool) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    if batched {
        let x = Tensor::randn(&[2, 4, 3], 1.0, &mut r);
        let c = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        grad_check(
            move |g, x| {
                let c = g.constant(c.clone());
                let a = g.matmul(c, x)?;
                let b = g.matmul(x, c)?;
                let (ra, rb) = (readout(g, a, seed)?, readout(g, b, seed + 1)?);
                g.add(ra, rb)
            },
            &x,
            STEP,
        )
    } else {
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let c = Tensor::randn(&[4, 5], 1.0, &mut r);
        grad_check(
            move |g, x| {
                let c = g.constant(c.clone());
                let y = g.matmul(x, c)?;
                let xt = g.transpose_last(x)?;
                let z = g.matmul(x, xt)?;
                let (ry, rz) = (readout(g, y, seed)?, readout(g, z, seed + 1)?);
                g.add(ry, rz)
            },
            &x,
            STEP,
        )
    }
}

fn op_shaped(seed: u64, f: fn(&mut Graph, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(seed));
    grad_check(
        move |g, x| {
            let y = f(g, x)?;
            readout(g, y, seed)
        },
        &x,
        STEP,
    )
}

macro_rules! shaped_case {
    ($name:literal, |$g:ident, $x:ident| $body:expr) => {
        GradCase {
            name: $name,
            group: Group::Op,
            tol: OP_TOL,
            run: |seed| op_shaped(seed, |$g, $x| $body),
        }
    };
}

fn op_unfold(seed: u64) -> Result<GradCheckReport> {
    let x = Tensor::randn(&[2, 5, 6, 2], 1.0, &mut rng(seed));
    grad_check(
        move |g, x| {
            let y = g.unfold(x, UnfoldSpec::square(3, 2, 1))?;
            readout(g, y, seed)
        },
        &x,
        STEP,
    )
}

fn op_pairwise(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[4, 3], 1.0, &mut r);
    let c = Tensor::randn(&[5, 3], 1.0, &mut r);
    grad_check(
        move |g, x| {
            let c = g.constant(c.clone());
            let a = g.pairwise_sq_dist(x, c)?;
            let b = g.pairwise_sq_dist(x, x)?;
            let (ra, rb) = (readout(g, a, seed)?, readout(g, b, seed + 1)?);
            g.add(ra, rb)
        },
        &x,
        STEP,
    )
}

// ---- losses ------------------------------------------------------------

fn clamp() -> LogVarClamp {
    LogVarClamp::default()
}

/// Columns `[0, k)` are logits, column `k` the log-variance.
fn loss_softmax_ce(seed: u64) -> Result<GradCheckReport> {
    let (b, k) = (4, 5);
    let x = Tensor::randn(&[b, k + 1], 1.0, &mut rng(seed));
    let labels = [0, 3, 4, 3];
    grad_check(
        move |g, x| {
            let logits = g.narrow(x, 1, 0, k)?;
            let lv = g.narrow(x, 1, k, 1)?;
            let lv = g.reshape(lv, &[b])?;
            ua_softmax_ce(g, logits, &labels, lv, clamp())
        },
        &x,
        STEP,
    )
}

/// Rows are `d_ap`, `d_an`, `log_var`.
fn loss_soft_triplet(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut x = Tensor::uniform(&[3, 6], 0.2, 3.0, &mut r);
    for j in 0..6 {
        x.set(&[2, j], r_normal(&mut r));
    }
    grad_check(
        |g, x| {
            let ap = g.narrow(x, 0, 0, 1)?;
            let an = g.narrow(x, 0, 1, 1)?;
            let lv = g.narrow(x, 0, 2, 1)?;
            let (ap, an, lv) = (
                g.reshape(ap, &[6])?,
                g.reshape(an, &[6])?,
                g.reshape(lv, &[6])?,
            );
            ua_soft_triplet(g, ap, an, lv, clamp())
        },
        &x,
        STEP,
    )
}

fn r_normal(r: &mut ChaCha8Rng) -> f64 {
    Tensor::randn(&[1], 1.0, r).item()
}

const BATCH_LABELS: [usize; 8] = [0, 0, 1, 1, 2, 2, 3, 3];

/// Columns `[0, d)` are embeddings, column `d` the log-variance.
fn embed_and_lv(g: &mut Graph, x: Var, d: usize) -> Result<(Var, Var)> {
    let b = g.shape(x)[0];
    let e = g.narrow(x, 1, 0, d)?;
    let lv = g.narrow(x, 1, d, 1)?;
    Ok((e, g.reshape(lv, &[b])?))
}

fn loss_triplet(seed: u64) -> Result<GradCheckReport> {
    let x = Tensor::randn(&[8, 5], 1.0, &mut rng(seed));
    grad_check(
        |g, x| {
            let (e, lv) = embed_and_lv(g, x, 4)?;
            Ok(ua_triplet_loss(g, e, &BATCH_LABELS, lv, clamp())?.0)
        },
        &x,
        STEP,
    )
}

fn loss_camid(seed: u64) -> Result<GradCheckReport> {
    let x = Tensor::randn(&[8, 5], 1.0, &mut rng(seed));
    grad_check(
        |g, x| {
            let (e, lv) = embed_and_lv(g, x, 4)?;
            ua_camid_loss(g, e, &BATCH_LABELS, lv, clamp())
        },
        &x,
        STEP,
    )
}

/// Rows `[0, 6)` are features, rows `[6, 9)` the center table.
fn loss_center(seed: u64) -> Result<GradCheckReport> {
    let x = Tensor::randn(&[9, 4], 1.0, &mut rng(seed));
    let labels = [0, 1, 2, 2, 1, 0];
    grad_check(
        move |g, x| {
            let f = g.narrow(x, 0, 0, 6)?;
            let c = g.narrow(x, 0, 6, 3)?;
            let sigma = g.constant(Tensor::scalar(1.7));
            ua_center_loss(g, f, &labels, c, sigma)
        },
        &x,
        STEP,
    )
}

/// Columns: 3 logits, 4 id-embedding, 4 id-feature, 4 cam-embedding,
/// 2 log-variances.
fn loss_total(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = Tensor::randn(&[6, 17], 1.0, &mut r);
    let centers = Tensor::randn(&[3, 4], 1.0, &mut r);
    let obj = [0, 0, 1, 1, 2, 2];
    let cam = [0, 1, 0, 1, 1, 0];
    grad_check(
        move |g, x| {
            let col = |g: &mut Graph, s: usize, w: usize| g.narrow(x, 1, s, w);
            let id_logits = col(g, 0, 3)?;
            let id_embedding = col(g, 3, 4)?;
            let id_feature = col(g, 7, 4)?;
            let cam_embedding = col(g, 11, 4)?;
            let lvi = col(g, 15, 1)?;
            let lvc = col(g, 16, 1)?;
            let heads = HeadOutputs {
                id_logits,
                id_embedding,
                id_feature,
                cam_embedding,
                log_var_id: g.reshape(lvi, &[6])?,
                log_var_cam: g.reshape(lvc, &[6])?,
            };
            let c = g.constant(centers.clone());
            Ok(multitask_loss(g, &heads, &obj, &cam, c, None, &LossConfig::default(), 0)?.total)
        },
        &x,
        STEP,
    )
}

// ---- modules -------------------------------------------------------------

fn mod_spatial_attention(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let sa = SpatialAttention::new(&mut store, "sa", &mut r);
    widen(&mut store, seed);
    let x = Tensor::randn(&[2, 5, 5, 3], 1.0, &mut r);
    grad_check(
        |g, x| {
            let y = in_session(&store, Mode::Train, g, |s| sa.forward(s, x))?;
            readout(g, y, seed)
        },
        &x,
        STEP,
    )
}

fn mod_bin(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let bin = BatchInstanceNorm::new(&mut store, "bin", 4);
    widen(&mut store, seed);
    let x = Tensor::randn(&[3, 2, 3, 4], 1.0, &mut r);
    let rho = bin.rho.expect("rho");
    let rho_v = store.value(rho).clone();
    let mut rep = grad_check(
        |g, x| {
            let y = in_session(&store, Mode::Train, g, |s| bin.forward(s, x))?;
            readout(g, y, seed)
        },
        &x,
        STEP,
    )?;
    // also through the mixing gate itself
    let xc = x.clone();
    let rr = grad_check(
        move |g, rv| {
            let xv = g.constant(xc.clone());
            let y = in_session(&store, Mode::Train, g, |s| {
                s.bind_param(rho, rv);
                bin.forward(s, xv)
            })?;
            readout(g, y, seed)
        },
        &rho_v,
        STEP,
    )?;
    if rr.max_rel_error > rep.max_rel_error {
        rep = rr;
    }
    Ok(rep)
}

fn mod_channel_gate(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gate = ChannelGate::new(&mut store, "gate", 32, &mut r);
    widen(&mut store, seed);
    let x = Tensor::randn(&[3, 32], 1.0, &mut r);
    grad_check(
        |g, x| {
            let y = in_session(&store, Mode::Train, g, |s| gate.forward(s, x))?;
            readout(g, y, seed)
        },
        &x,
        STEP,
    )
}

fn mod_sra(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let sra = SpatialReductionAttention::new(&mut store, "sra", 8, 2, 2, &mut r);
    widen(&mut store, seed);
    let x = Tensor::randn(&[2, 16, 8], 1.0, &mut r);
    grad_check_at(
        |g, x| {
            let y = in_session(&store, Mode::Train, g, |s| sra.forward(s, x, (4, 4)))?;
            readout(g, y, seed)
        },
        &x,
        STEP,
        &subset(x.numel(), 96, seed),
    )
}

/// 32×32 input with narrow stages; enough to exercise every layer type.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: (32, 32),
        embed_dims: [8, 16, 24, 32],
        depths: [1, 1, 1, 1],
        heads: [1, 2, 2, 4],
        sr_ratios: [4, 2, 1, 1],
        mlp_ratio: 2,
        ..BackboneConfig::desk()
    }
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        backbone: tiny_backbone(),
        embed_dim: 16,
        cam_dim: 8,
        p: 3,
        k: 2,
        ..TrainConfig::desk()
    }
}

fn mod_pyramid(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let bb = PyramidBackbone::new(&mut store, &tiny_backbone(), &mut r)?;
    widen(&mut store, seed);
    let x = Tensor::randn(&[2, 32, 32, 3], 1.0, &mut r);
    grad_check_at(
        |g, x| {
            let p = in_session(&store, Mode::Train, g, |s| bb.forward(s, x))?;
            readout(g, p.stages[3], seed)
        },
        &x,
        STEP,
        &subset(x.numel(), 32, seed),
    )
}

fn mod_fusion(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let dims = [4, 6, 8, 10];
    let fusion = PyramidFusion::new(&mut store, &dims, 16, &mut r);
    widen(&mut store, seed);
    let maps: Vec<Tensor> = dims
        .iter()
        .enumerate()
        .map(|(i, &c)| Tensor::randn(&[3, 8 >> i, 8 >> i, c], 1.0, &mut r))
        .collect();
    let mut worst: Option<GradCheckReport> = None;
    for stage in 0..4 {
        let maps = maps.clone();
        let rep = grad_check_at(
            |g, x| {
                let vars: Vec<Var> = (0..4)
                    .map(|i| {
                        if i == stage {
                            x
                        } else {
                            g.constant(maps[i].clone())
                        }
                    })
                    .collect();
                let out = in_session(&store, Mode::Train, g, |s| fusion.forward_maps(s, &vars))?;
                let a = readout(g, out.fused, seed)?;
                let b = readout(g, out.retrieval, seed + 1)?;
                g.add(a, b)
            },
            &maps[stage],
            STEP,
            &subset(maps[stage].numel(), 24, seed + stage as u64),
        )?;
        if worst
            .as_ref()
            .is_none_or(|w| rep.max_rel_error > w.max_rel_error)
        {
            worst = Some(rep);
        }
    }
    Ok(worst.expect("four stages"))
}

fn tiny_model(seed: u64) -> Result<(ParamStore, ReidModel, TrainConfig, Tensor)> {
    let mut r = rng(seed);
    let cfg = tiny_train_config();
    let mut store = ParamStore::new();
    let model = ReidModel::new(&mut store, &cfg, 3, &mut r)?;
    widen(&mut store, seed);
    let x = Tensor::randn(&[6, 32, 32, 3], 1.0, &mut r);
    Ok((store, model, cfg, x))
}

const MODEL_OBJ: [usize; 6] = [0, 0, 1, 1, 2, 2];
const MODEL_CAM: [usize; 6] = [0, 1, 0, 1, 1, 0];

fn model_loss(s: &mut Session, model: &ReidModel, cfg: &TrainConfig, x: Var) -> Result<Var> {
    let out = model.forward(s, x)?;
    Ok(model.loss(s, &out, &MODEL_OBJ, &MODEL_CAM, cfg, 0)?.total)
}

/// Total loss of the full network with respect to input pixels.
fn mod_full_model(seed: u64) -> Result<GradCheckReport> {
    let (store, model, cfg, x) = tiny_model(seed)?;
    grad_check_at(
        |g, x| in_session(&store, Mode::Train, g, |s| model_loss(s, &model, &cfg, x)),
        &x,
        STEP,
        &subset(x.numel(), 24, seed),
    )
}

/// Total loss with respect to a parameter from each part of the network.
fn mod_full_model_params(seed: u64) -> Result<GradCheckReport> {
    let (store, model, cfg, x) = tiny_model(seed)?;
    let names = [
        "backbone.stage1.embed.proj.weight",
        "backbone.stage2.layer0.attn.sr.weight",
        "backbone.stage4.layer0.attn.q.weight",
        "fusion.sa3.weight",
        "fusion.bin2.rho",
        "fusion.gate.fc1.weight",
        "id_head.classifier.weight",
        "id_head.log_var.weight",
        "cam_head.proj.weight",
        "center_loss.centers",
    ];
    let mut worst: Option<GradCheckReport> = None;
    for (i, name) in names.iter().enumerate() {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let p0 = store.value(id).clone();
        let rep = grad_check_at(
            |g, pv| {
                let xv = g.constant(x.clone());
                in_session(&store, Mode::Train, g, |s| {
                    s.bind_param(id, pv);
                    model_loss(s, &model, &cfg, xv)
                })
            },
            &p0,
            STEP,
            &subset(p0.numel(), 4, seed + i as u64),
        )?;
        if worst
            .as_ref()
            .is_none_or(|w| rep.max_rel_error > w.max_rel_error)
        {
            worst = Some(rep);
        }
    }
    Ok(worst.expect("non-empty"))
}

pub fn cases() -> Vec<GradCase> {
    let op = |name, run| GradCase {
        name,
        group: Group::Op,
        tol: OP_TOL,
        run,
    };
    let loss = |name, run| GradCase {
        name,
        group: Group::Loss,
        tol: TOL,
        run,
    };
    let module = |name, run| GradCase {
        name,
        group: Group::Module,
        tol: TOL,
        run,
    };
    vec![
        op("add", |s| op_binary(s, 0)),
        op("sub", |s| op_binary(s, 1)),
        op("mul", |s| op_binary(s, 2)),
        op("div", |s| op_binary(s, 3)),
        op("matmul", |s| op_matmul(s, false)),
        op("matmul_batched", |s| op_matmul(s, true)),
        unary_case!("exp", -2.0, 2.0, exp),
        unary_case!("log", 0.3, 3.0, log),
        unary_case!("sqrt", 0.3, 3.0, sqrt),
        unary_case!("reciprocal", 0.3, 3.0, reciprocal),
        unary_case!("neg", -2.0, 2.0, neg),
        unary_case!("square", -2.0, 2.0, square),
        unary_case!("relu", -2.0, 2.0, relu),
        unary_case!("sigmoid", -3.0, 3.0, sigmoid),
        unary_case!("tanh", -3.0, 3.0, tanh),
        unary_case!("gelu", -3.0, 3.0, gelu),
        unary_case!("softplus", -3.0, 3.0, softplus),
        GradCase {
            name: "clamp",
            group: Group::Op,
            tol: OP_TOL,
            run: |seed| unary(seed, -2.0, 2.0, |g, x| g.clamp(x, -1.0, 1.0)),
        },
        shaped_case!("sum_axis", |g, x| g.sum_axis(x, 1, false)),
        shaped_case!("mean_axis", |g, x| g.mean_axis(x, -1, true)),
        shaped_case!("max_axis", |g, x| g.max_axis(x, 1, false)),
        shaped_case!("softmax", |g, x| g.softmax(x, -1)),
        shaped_case!("log_softmax", |g, x| g.log_softmax(x, 1)),
        shaped_case!("layer_norm", |g, x| g.layer_norm(x, 1e-6)),
        shaped_case!("l2_normalize", |g, x| g.l2_normalize(x)),
        shaped_case!("permute", |g, x| g.permute(x, &[2, 0, 1])),
        shaped_case!("broadcast_to", |g, x| g.broadcast_to(x, &[2, 2, 3, 4])),
        shaped_case!("narrow", |g, x| g.narrow(x, 1, 1, 2)),
        shaped_case!("concat", |g, x| {
            let t = g.tanh(x)?;
            g.concat(&[x, t], 1)
        }),
        shaped_case!("take", |g, x| g.take(x, &[0, 5, 5, 23, 7])),
        op("unfold", op_unfold),
        op("pairwise_sq_dist", op_pairwise),
        loss("softmax_ce", loss_softmax_ce),
        loss("soft_triplet", loss_soft_triplet),
        loss("triplet", loss_triplet),
        loss("camid", loss_camid),
        loss("center", loss_center),
        loss("total", loss_total),
        module("spatial_attention", mod_spatial_attention),
        module("bin", mod_bin),
        module("channel_gate", mod_channel_gate),
        module("sra", mod_sra),
        module("pyramid", mod_pyramid),
        module("fusion", mod_fusion),
        module("full_model", mod_full_model),
        module("full_model_params", mod_full_model_params),
    ]
}

pub fn find(name: &str) -> Option<GradCase> {
    cases().into_iter().find(|c| c.name == name)
}
