//! Uncertainty-weighted losses, batch-hard mining and class centroids.
//!
//! Every per-sample term has the aleatoric form `ℓ / σ² + ½·log σ²` (the
//! cross-entropy uses `ℓ / 2σ²`) with `σ² = exp(s)` and `s` a clamped
//! predicted log-variance. Distances are squared Euclidean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config, contract, shape_err, ReidError, Result};
use crate::heads::{variance_of, HeadOutputs, LogVarClamp};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.5,
            alpha3: 5e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let a = [self.alpha1, self.alpha2, self.alpha3];
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) || a.iter().all(|&v| v == 0.0) {
            return Err(config(format!(
                "loss weights must be finite, non-negative and not all zero: {a:?}"
            )));
        }
        Ok(())
    }
}

/// Which labels group camera-head embeddings into centroids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidGrouping {
    Object,
    Camera,
}

/// The `σ` dividing the center loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterSigma {
    /// Batch mean of the per-sample ID variances.
    BatchMean,
    /// A single learned log-variance.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub clamp: LogVarClamp,
    pub grouping: CentroidGrouping,
    pub center_sigma: CenterSigma,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            clamp: LogVarClamp::default(),
            grouping: CentroidGrouping::Object,
            center_sigma: CenterSigma::BatchMean,
        }
    }
}

// ---- mining -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
}

fn check_groups(labels: &[usize], what: &str) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if let Some((l, _)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(contract(format!(
            "{what}: identity {l} has a single sample in the batch"
        )));
    }
    if groups.len() < 2 {
        return Err(contract(format!("{what}: batch holds a single identity")));
    }
    Ok(groups)
}

/// Per anchor: the farthest same-label sample and the nearest other-label
/// sample. Ties go to the lowest index.
pub fn batch_hard_mine(dist: &Tensor, labels: &[usize]) -> Result<TripletSet> {
    let b = labels.len();
    if dist.shape() != [b, b] {
        return Err(shape_err("batch_hard_mine", dist.shape(), &[b, b]));
    }
    check_groups(labels, "batch_hard_mine")?;
    let triplets = (0..b)
        .map(|a| {
            let row = dist.row(a);
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if labels[j] == labels[a] {
                    if j != a && pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| row[j] < row[n]) {
                    neg = Some(j);
                }
            }
            let (p, n) = (pos.unwrap(), neg.unwrap());
            Triplet {
                anchor: a,
                positive: p,
                negative: n,
                d_ap: row[p],
                d_an: row[n],
            }
        })
        .collect();
    Ok(TripletSet { triplets })
}

// ---- centroids ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    /// Sorted distinct labels; row `k` of `centroids` belongs to `classes[k]`.
    pub classes: Vec<usize>,
    pub centroids: Tensor,
    /// Per anchor, its own-class centroid (anchor excluded when requested).
    pub positive: Tensor,
    /// Per anchor, index into `classes` of the nearest other-class centroid.
    pub negative_class: Vec<usize>,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
    pub exclude_anchor: bool,
}

/// Averaging matrices: `(K, B)` class means and `(B, B)` positive means.
fn centroid_weights(labels: &[usize], classes: &[usize], exclude_anchor: bool) -> (Tensor, Tensor) {
    let b = labels.len();
    let k = classes.len();
    let count = |l: usize| labels.iter().filter(|&&x| x == l).count() as f64;
    let class_w = Tensor::from_fn(&[k, b], |i| {
        let (c, j) = (i / b, i % b);
        if labels[j] == classes[c] {
            1.0 / count(classes[c])
        } else {
            0.0
        }
    });
    let pos_w = Tensor::from_fn(&[b, b], |i| {
        let (a, j) = (i / b, i % b);
        if labels[j] != labels[a] || (exclude_anchor && j == a) {
            0.0
        } else if exclude_anchor {
            1.0 / (count(labels[a]) - 1.0)
        } else {
            1.0 / count(labels[a])
        }
    });
    (class_w, pos_w)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Class means of `embeddings` and, per anchor, the positive centroid and
/// the nearest other-class centroid (lowest class index on ties).
pub fn compute_centroids(
    embeddings: &Tensor,
    labels: &[usize],
    exclude_anchor: bool,
) -> Result<CentroidSet> {
    let sh = embeddings.shape();
    if sh.len() != 2 || sh[0] != labels.len() || labels.is_empty() {
        return Err(shape_err("compute_centroids", sh, &[labels.len()]));
    }
    let (b, d) = (sh[0], sh[1]);
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if exclude_anchor {
        check_groups(labels, "compute_centroids")?;
    } else if classes.len() < 2 {
        return Err(contract("compute_centroids: batch holds a single class"));
    }
    let (class_w, pos_w) = centroid_weights(labels, &classes, exclude_anchor);
    let matmul = |w: &Tensor, rows: usize| {
        Tensor::from_fn(&[rows, d], |i| {
            let (r, t) = (i / d, i % d);
            (0..b).map(|j| w.at(&[r, j]) * embeddings.at(&[j, t])).sum()
        })
    };
    let centroids = matmul(&class_w, classes.len());
    let positive = matmul(&pos_w, b);
    let mut negative_class = Vec::with_capacity(b);
    let mut d_pos = Vec::with_capacity(b);
    let mut d_neg = Vec::with_capacity(b);
    for a in 0..b {
        let e = embeddings.row(a);
        d_pos.push(sq(e, positive.row(a)));
        let mut best: Option<(usize, f64)> = None;
        for (k, &c) in classes.iter().enumerate() {
            if c == labels[a] {
                continue;
            }
            let dk = sq(e, centroids.row(k));
            if best.is_none_or(|(_, bd)| dk < bd) {
                best = Some((k, dk));
            }
        }
        let (k, dk) = best.unwrap();
        negative_class.push(k);
        d_neg.push(dk);
    }
    Ok(CentroidSet {
        classes,
        centroids,
        positive,
        negative_class,
        d_pos,
        d_neg,
        exclude_anchor,
    })
}

// ---- loss terms ---------------------------------------------------------

fn check_vec(g: &Graph, v: Var, n: usize, op: &'static str) -> Result<()> {
    if g.shape(v) != [n] {
        return Err(shape_err(op, g.shape(v), &[n]));
    }
    Ok(())
}

/// `mean_i [ w·ℓ_i·exp(−s_i) + ½·s_i ]` with `s` the clamped log-variance.
fn uncertainty_weighted(
    g: &mut Graph,
    per_sample: Var,
    log_var: Var,
    w: f64,
    clamp: LogVarClamp,
) -> Result<Var> {
    let s = g.clamp(log_var, clamp.lo, clamp.hi)?;
    let neg = g.neg(s)?;
    let inv = g.exp(neg)?;
    let t = g.mul(per_sample, inv)?;
    let t = g.scale(t, w)?;
    let r = g.scale(s, 0.5)?;
    let t = g.add(t, r)?;
    g.mean_all(t)
}

/// Uncertainty-aware softmax cross-entropy:
/// `(1/N)·Σ_i [ NLL_i / (2σ_i²) + ½·log σ_i² ]`.
pub fn ua_softmax_ce(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    log_var: Var,
    clamp: LogVarClamp,
) -> Result<Var> {
    let sh = g.shape(logits).to_vec();
    if labels.is_empty() {
        return Err(contract("ua_softmax_ce on an empty batch"));
    }
    if sh.len() != 2 || sh[0] != labels.len() {
        return Err(shape_err("ua_softmax_ce", &sh, &[labels.len()]));
    }
    let k = sh[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(contract(format!("label {bad} outside {k} classes")));
    }
    check_vec(g, log_var, labels.len(), "ua_softmax_ce")?;
    let lsm = g.log_softmax(logits, -1)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = g.take(lsm, &idx)?;
    let nll = g.neg(picked)?;
    uncertainty_weighted(g, nll, log_var, 0.5, clamp)
}

/// Uncertainty-aware soft-margin triplet:
/// `mean_a [ log(1 + exp(d_ap − d_an)) / σ_a² + ½·log σ_a² ]`.
pub fn ua_soft_triplet(
    g: &mut Graph,
    d_ap: Var,
    d_an: Var,
    log_var_anchor: Var,
    clamp: LogVarClamp,
) -> Result<Var> {
    let n = g.shape(d_ap).first().copied().unwrap_or(0);
    check_vec(g, d_ap, n, "ua_soft_triplet")?;
    check_vec(g, d_an, n, "ua_soft_triplet")?;
    check_vec(g, log_var_anchor, n, "ua_soft_triplet")?;
    if g.value(d_ap)
        .data()
        .iter()
        .chain(g.value(d_an).data())
        .any(|&d| d < 0.0)
    {
        return Err(contract("ua_soft_triplet: negative distance"));
    }
    let margin = g.sub(d_ap, d_an)?;
    let sp = g.softplus(margin)?;
    uncertainty_weighted(g, sp, log_var_anchor, 1.0, clamp)
}

/// Batch-hard triplet term on `(B, D)` embeddings, with per-anchor variances.
pub fn ua_triplet_loss(
    g: &mut Graph,
    embeddings: Var,
    labels: &[usize],
    log_var: Var,
    clamp: LogVarClamp,
) -> Result<(Var, TripletSet)> {
    let b = labels.len();
    let dist = g.pairwise_sq_dist(embeddings, embeddings)?;
    let mined = batch_hard_mine(g.value(dist), labels)?;
    let ap: Vec<usize> = mined
        .triplets
        .iter()
        .map(|t| t.anchor * b + t.positive)
        .collect();
    let an: Vec<usize> = mined
        .triplets
        .iter()
        .map(|t| t.anchor * b + t.negative)
        .collect();
    let d_ap = g.take(dist, &ap)?;
    let d_an = g.take(dist, &an)?;
    Ok((ua_soft_triplet(g, d_ap, d_an, log_var, clamp)?, mined))
}

/// Uncertainty-aware centroid triplet on camera-head embeddings:
/// `mean_a [ log(1 + exp(d(a,c_p) − d(a,c_n))) / σ_a² + ½·log σ_a² ]`.
pub fn ua_camid_loss(
    g: &mut Graph,
    cam_embeddings: Var,
    labels: &[usize],
    log_var: Var,
    clamp: LogVarClamp,
) -> Result<Var> {
    let sh = g.shape(cam_embeddings).to_vec();
    if sh.len() != 2 || sh[0] != labels.len() {
        return Err(shape_err("ua_camid_loss", &sh, &[labels.len()]));
    }
    let b = sh[0];
    let set = compute_centroids(g.value(cam_embeddings), labels, true)?;
    let (class_w, pos_w) = centroid_weights(labels, &set.classes, true);
    let cw = g.constant(class_w);
    let pw = g.constant(pos_w);
    let centroids = g.matmul(cw, cam_embeddings)?;
    let positives = g.matmul(pw, cam_embeddings)?;
    let diff = g.sub(cam_embeddings, positives)?;
    let sq = g.square(diff)?;
    let d_pos = g.sum_axis(sq, -1, false)?;
    let dc = g.pairwise_sq_dist(cam_embeddings, centroids)?;
    let k = set.classes.len();
    let idx: Vec<usize> = (0..b).map(|a| a * k + set.negative_class[a]).collect();
    let d_neg = g.take(dc, &idx)?;
    let margin = g.sub(d_pos, d_neg)?;
    let sp = g.softplus(margin)?;
    uncertainty_weighted(g, sp, log_var, 1.0, clamp)
}

/// Uncertainty-aware center loss `(1/(2σ))·Σ_i ||f_i − c_{y_i}||²` with a
/// scalar `sigma` and a learnable `(num_ids, D)` center table.
pub fn ua_center_loss(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    centers: Var,
    sigma: Var,
) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let cs = g.shape(centers).to_vec();
    if fs.len() != 2 || cs.len() != 2 || fs[1] != cs[1] || fs[0] != labels.len() {
        return Err(shape_err("ua_center_loss", &fs, &cs));
    }
    if g.value(sigma).numel() != 1 {
        return Err(shape_err("ua_center_loss", g.shape(sigma), &[]));
    }
    let (b, n) = (fs[0], cs[0]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(contract(format!(
            "ua_center_loss: label {bad} has no center (table holds {n})"
        )));
    }
    let onehot = Tensor::from_fn(&[b, n], |i| if labels[i / n] == i % n { 1.0 } else { 0.0 });
    let onehot = g.constant(onehot);
    let picked = g.matmul(onehot, centers)?;
    let diff = g.sub(features, picked)?;
    let sq = g.square(diff)?;
    let total = g.sum_all(sq)?;
    let two_sigma = g.scale(sigma, 2.0)?;
    let two_sigma = g.reshape(two_sigma, &[])?;
    g.div(total, two_sigma)
}

// ---- combination ----------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub softmax: Var,
    pub triplet: Var,
    pub camid: Var,
    pub center: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub softmax: f64,
    pub triplet: f64,
    pub camid: f64,
    pub center: f64,
    pub mean_sigma_id: f64,
    pub mean_sigma_cam: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "step,total,softmax,triplet,camid,center,mean_sigma_id,mean_sigma_cam";

impl LossReport {
    /// `α1·(softmax + triplet) + α2·camid + α3·center`.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.alpha1 * (self.softmax + self.triplet) + w.alpha2 * self.camid + w.alpha3 * self.center
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.total,
            self.softmax,
            self.triplet,
            self.camid,
            self.center,
            self.mean_sigma_id,
            self.mean_sigma_cam
        )
    }
}

/// Weighted total; fails on the first non-finite component.
pub fn total_loss(
    g: &mut Graph,
    c: &LossComponents,
    weights: &LossWeights,
    batch_index: usize,
) -> Result<Var> {
    for (name, v) in [
        ("softmax", c.softmax),
        ("triplet", c.triplet),
        ("camid", c.camid),
        ("center", c.center),
    ] {
        if !g.value(v).data().iter().all(|x| x.is_finite()) {
            return Err(ReidError::NonFinite {
                component: name.into(),
                batch: batch_index,
            });
        }
    }
    let id = g.add(c.softmax, c.triplet)?;
    let id = g.scale(id, weights.alpha1)?;
    let cam = g.scale(c.camid, weights.alpha2)?;
    let cen = g.scale(c.center, weights.alpha3)?;
    let t = g.add(id, cam)?;
    g.add(t, cen)
}

/// Loss terms for a batch, wired from the head outputs.
pub struct MultiTaskLoss {
    pub total: Var,
    pub components: LossComponents,
    pub report: LossReport,
    pub triplets: TripletSet,
}

pub fn multitask_loss(
    g: &mut Graph,
    heads: &HeadOutputs,
    object_labels: &[usize],
    camera_labels: &[usize],
    centers: Var,
    learned_center_log_sigma: Option<Var>,
    cfg: &LossConfig,
    batch_index: usize,
) -> Result<MultiTaskLoss> {
    let clamp = cfg.clamp;
    let softmax = ua_softmax_ce(g, heads.id_logits, object_labels, heads.log_var_id, clamp)?;
    let (triplet, triplets) =
        ua_triplet_loss(g, heads.id_feature, object_labels, heads.log_var_id, clamp)?;
    let groups = match cfg.grouping {
        CentroidGrouping::Object => object_labels,
        CentroidGrouping::Camera => camera_labels,
    };
    let camid = ua_camid_loss(g, heads.cam_embedding, groups, heads.log_var_cam, clamp)?;
    let sigma_id = variance_of(g, heads.log_var_id, clamp)?;
    let sigma_cam = variance_of(g, heads.log_var_cam, clamp)?;
    let sigma = match (cfg.center_sigma, learned_center_log_sigma) {
        (CenterSigma::Learned, Some(ls)) => variance_of(g, ls, clamp)?,
        (CenterSigma::Learned, None) => {
            return Err(config(
                "learned center sigma requested without its parameter",
            ))
        }
        (CenterSigma::BatchMean, _) => g.mean_all(sigma_id)?,
    };
    let center = ua_center_loss(g, heads.id_feature, object_labels, centers, sigma)?;
    let components = LossComponents {
        softmax,
        triplet,
        camid,
        center,
    };
    let total = total_loss(g, &components, &cfg.weights, batch_index)?;
    let mean = |g: &Graph, v: Var| {
        let t = g.value(v);
        t.sum() / t.numel() as f64
    };
    let report = LossReport {
        total: g.value(total).item(),
        softmax: g.value(softmax).item(),
        triplet: g.value(triplet).item(),
        camid: g.value(camid).item(),
        center: g.value(center).item(),
        mean_sigma_id: mean(g, sigma_id),
        mean_sigma_cam: mean(g, sigma_cam),
    };
    if !report.total.is_finite() {
        return Err(ReidError::NonFinite {
            component: "total".into(),
            batch: batch_index,
        });
    }
    Ok(MultiTaskLoss {
        total,
        components,
        report,
        triplets,
    })
}
