//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use reid_core::metrics::{EvalSet, Label};
use reid_core::Tensor;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(cmc, mAP, valid queries)` by sorting each query's admissible gallery
/// and enumerating precision at every relevant rank.
pub fn reference_eval(set: &EvalSet, max_rank: usize) -> (Vec<f64>, f64, usize) {
    let mut firsts = Vec::new();
    let mut aps = Vec::new();
    for (i, q) in set.query_labels.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = Vec::new();
        for (j, g) in set.gallery_labels.iter().enumerate() {
            if g.object_id == q.object_id && g.camera_id == q.camera_id {
                continue;
            }
            order.push((sq_dist(set.query.row(i), set.gallery.row(j)), j));
        }
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = order
            .iter()
            .map(|&(_, j)| set.gallery_labels[j].object_id == q.object_id)
            .collect();
        let n_rel = rel.iter().filter(|&&r| r).count();
        if n_rel == 0 {
            continue;
        }
        let mut seen = 0;
        let mut sum = 0.0;
        for (r, &is_rel) in rel.iter().enumerate() {
            if is_rel {
                seen += 1;
                sum += seen as f64 / (r + 1) as f64;
            }
        }
        aps.push(sum / n_rel as f64);
        firsts.push(rel.iter().position(|&r| r).unwrap() + 1);
    }
    let valid = aps.len();
    let denom = valid.max(1) as f64;
    let cmc = (1..=max_rank)
        .map(|k| firsts.iter().filter(|&&f| f <= k).count() as f64 / denom)
        .collect();
    let mut map = 0.0;
    for ap in &aps {
        map += ap;
    }
    (cmc, map / denom, valid)
}

/// Small integer coordinates so that distance ties are common.
pub fn random_eval_set<R: Rng>(rng: &mut R, max_q: usize, max_g: usize, cams: usize) -> EvalSet {
    let nq = rng.gen_range(1..=max_q);
    let ng = rng.gen_range(1..=max_g);
    let d = rng.gen_range(1..=3);
    let ids = rng.gen_range(1..=6);
    let labels = |n: usize, r: &mut R| -> Vec<Label> {
        (0..n)
            .map(|_| Label {
                object_id: r.gen_range(0..ids),
                camera_id: r.gen_range(0..cams),
            })
            .collect()
    };
    let query_labels = labels(nq, rng);
    let gallery_labels = labels(ng, rng);
    let query = Tensor::from_fn(&[nq, d], |_| rng.gen_range(-3i32..=3) as f64);
    let gallery = Tensor::from_fn(&[ng, d], |_| rng.gen_range(-3i32..=3) as f64);
    EvalSet {
        query,
        query_labels,
        gallery,
        gallery_labels,
    }
}

/// Per anchor `(positive, negative)` from the full candidate lists: the
/// first index attaining the maximum same-label distance and the minimum
/// other-label distance.
pub fn exhaustive_mine(dist: &Tensor, labels: &[usize]) -> Vec<(usize, usize)> {
    let b = labels.len();
    (0..b)
        .map(|a| {
            let pos: Vec<usize> = (0..b)
                .filter(|&j| j != a && labels[j] == labels[a])
                .collect();
            let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[a]).collect();
            let dmax = pos
                .iter()
                .map(|&j| dist.at(&[a, j]))
                .fold(f64::NEG_INFINITY, f64::max);
            let dmin = neg
                .iter()
                .map(|&j| dist.at(&[a, j]))
                .fold(f64::INFINITY, f64::min);
            let p = *pos.iter().find(|&&j| dist.at(&[a, j]) == dmax).unwrap();
            let n = *neg.iter().find(|&&j| dist.at(&[a, j]) == dmin).unwrap();
            (p, n)
        })
        .collect()
}

/// Golden-section search for the minimizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-10 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Random orthogonal `d × d` matrix by Gram-Schmidt.
pub fn random_rotation<R: Rng>(d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &basis {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `x·Rᵀ + t` row by row.
pub fn rigid(x: &Tensor, rot: &[Vec<f64>], shift: &[f64]) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(&[n, d], |i| {
        let (r, c) = (i / d, i % d);
        let row = x.row(r);
        (0..d).map(|k| rot[c][k] * row[k]).sum::<f64>() + shift[c]
    })
}

use std::path::Path;

use reid_core::config::TrainConfig;
use reid_core::data::{generate, DatasetManifest, SyntheticSpec};
use reid_core::gradsuite;

/// 4 ids × 2 cameras × 4 images at 32×32, all in train.
pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_ids: 4,
        images_per_id_per_cam: 4,
        holdout_per_id_per_cam: 0,
        image_size: 32,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_data(dir: &Path) -> DatasetManifest {
    generate(&tiny_spec(), dir).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 2,
        eval_chunk: 8,
        ..gradsuite::tiny_train_config()
    }
}
