//! Brute-force retrieval metrics used to cross-check [`crate::metrics`].
//!
//! Ranks are obtained by counting, not sorting: a gallery item's position is
//! the number of admissible items strictly closer, or equally close with a
//! lower index.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::metrics::{evaluate, EvalReport, EvalSet, Label};
use crate::tensor::Tensor;

fn admissible(q: Label, g: Label) -> bool {
    !(q.object_id == g.object_id && q.camera_id == g.camera_id)
}

pub fn brute_force(set: &EvalSet, max_rank: usize) -> EvalReport {
    let max_rank = max_rank.max(1);
    let d = set.query.shape()[1];
    let dist = |i: usize, j: usize| -> f64 {
        let (q, g) = (set.query.row(i), set.gallery.row(j));
        (0..d).map(|t| (q[t] - g[t]) * (q[t] - g[t])).sum()
    };
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for (i, &ql) in set.query_labels.iter().enumerate() {
        let ok: Vec<usize> = (0..set.gallery_labels.len())
            .filter(|&j| admissible(ql, set.gallery_labels[j]))
            .collect();
        let pos = |j: usize| {
            ok.iter()
                .filter(|&&k| dist(i, k) < dist(i, j) || (dist(i, k) == dist(i, j) && k < j))
                .count()
        };
        let mut rel: Vec<usize> = ok
            .iter()
            .filter(|&&j| set.gallery_labels[j].object_id == ql.object_id)
            .map(|&j| pos(j))
            .collect();
        if rel.is_empty() {
            continue;
        }
        valid += 1;
        rel.sort_unstable();
        for (k, h) in hits.iter_mut().enumerate() {
            if rel[0] <= k {
                *h += 1;
            }
        }
        let mut acc = 0.0;
        for (n, &p) in rel.iter().enumerate() {
            acc += (n + 1) as f64 / (p + 1) as f64;
        }
        ap_sum += acc / rel.len() as f64;
    }
    let denom = valid.max(1) as f64;
    let nq = set.query_labels.len();
    EvalReport {
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        map: ap_sum / denom,
        num_queries: nq,
        num_valid: valid,
        skipped: nq - valid,
    }
}

/// `nq ≤ 8`, `ng ≤ 32`, two cameras, few identities and small integer
/// coordinates so that exclusions, skips and distance ties all occur.
pub fn random_instance<R: Rng>(rng: &mut R) -> EvalSet {
    let nq = rng.gen_range(1..=8);
    let ng = rng.gen_range(1..=32);
    let dim = rng.gen_range(1..=4);
    let ids = rng.gen_range(1..=5);
    let lab = |r: &mut R| Label {
        object_id: r.gen_range(0..ids),
        camera_id: r.gen_range(0..2),
    };
    let query_labels = (0..nq).map(|_| lab(rng)).collect();
    let gallery_labels = (0..ng).map(|_| lab(rng)).collect();
    let coords =
        |n: usize, r: &mut R| Tensor::from_fn(&[n, dim], |_| r.gen_range(-2i32..=2) as f64);
    EvalSet {
        query: coords(nq, rng),
        query_labels,
        gallery: coords(ng, rng),
        gallery_labels,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleSummary {
    pub trials: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<usize>,
}

/// Compares [`evaluate`] against [`brute_force`] on `trials` random instances.
pub fn run_trials<R: Rng>(trials: usize, max_rank: usize, rng: &mut R) -> Result<OracleSummary> {
    let mut mismatches = 0;
    let mut first = None;
    for t in 0..trials {
        let set = random_instance(rng);
        if evaluate(&set, max_rank)?.report != brute_force(&set, max_rank) {
            mismatches += 1;
            first.get_or_insert(t);
        }
    }
    Ok(OracleSummary {
        trials,
        mismatches,
        first_mismatch: first,
    })
}
