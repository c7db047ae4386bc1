mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{exhaustive_mine, golden_min, random_rotation, rigid};
use reid_core::autodiff::sq_dist_matrix;
use reid_core::error::ReidError;
use reid_core::gradsuite::{self, Group, TOL};
use reid_core::heads::{HeadOutputs, LogVarClamp};
use reid_core::losses::{
    batch_hard_mine, compute_centroids, multitask_loss, total_loss, ua_camid_loss, ua_center_loss,
    ua_soft_triplet, ua_softmax_ce, LossComponents, LossConfig, LossWeights,
};
use reid_core::{Graph, Tensor};

const CLAMP: LogVarClamp = LogVarClamp {
    lo: -10.0,
    hi: 10.0,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vecv(g: &mut Graph, v: &[f64]) -> reid_core::Var {
    g.constant(Tensor::from_vec(&[v.len()], v.to_vec()))
}

/// Two-class logits whose first class has probability `exp(-nll)`.
fn softmax_ce_at(nll: f64, log_var: f64) -> f64 {
    let mut g = Graph::new();
    let b = if nll == 0.0 {
        -1e3
    } else {
        (nll.exp() - 1.0).ln()
    };
    let logits = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, b]));
    let lv = vecv(&mut g, &[log_var]);
    let l = ua_softmax_ce(&mut g, logits, &[0], lv, CLAMP).unwrap();
    g.value(l).item()
}

fn triplet_at(d_ap: f64, d_an: f64, log_var: f64) -> f64 {
    let mut g = Graph::new();
    let (ap, an, lv) = (
        vecv(&mut g, &[d_ap]),
        vecv(&mut g, &[d_an]),
        vecv(&mut g, &[log_var]),
    );
    let l = ua_soft_triplet(&mut g, ap, an, lv, CLAMP).unwrap();
    g.value(l).item()
}

#[test]
fn softmax_ce_hand_values() {
    assert_eq!(softmax_ce_at(0.0, 0.0), 0.0);
    assert!((softmax_ce_at(2.0, 0.0) - 1.0).abs() < 1e-6);
    let e = std::f64::consts::E;
    assert!((softmax_ce_at(1.0, 1.0) - (1.0 / (2.0 * e) + 0.5)).abs() < 1e-6);
    assert!((softmax_ce_at(1.0, 1.0) - 0.68394).abs() < 1e-5);
}

#[test]
fn softmax_ce_rejects_bad_input() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[0, 3]));
    let lv = g.constant(Tensor::zeros(&[0]));
    assert!(matches!(
        ua_softmax_ce(&mut g, logits, &[], lv, CLAMP),
        Err(ReidError::Contract(_))
    ));
    let logits = g.constant(Tensor::zeros(&[1, 3]));
    let lv = vecv(&mut g, &[0.0]);
    assert!(ua_softmax_ce(&mut g, logits, &[3], lv, CLAMP).is_err());
}

#[test]
fn triplet_hand_values() {
    assert!((triplet_at(1.3, 1.3, 0.0) - 2f64.ln()).abs() < 1e-12);
    assert!((triplet_at(0.0, 10.0, 0.0) - (1.0 + (-10f64).exp()).ln()).abs() < 1e-12);
    assert!((triplet_at(0.0, 10.0, 0.0) - 4.54e-5).abs() < 1e-7);
}

#[test]
fn uncertainty_optimum_for_cross_entropy() {
    for nll in [0.5, 1.0, 2.0, 5.0] {
        let s = golden_min(|s| softmax_ce_at(nll, s), -5.0, 5.0);
        assert!((s.exp() - nll).abs() < 1e-3, "nll {nll}: {}", s.exp());
    }
}

#[test]
fn uncertainty_optimum_for_symmetric_triplet() {
    let s = golden_min(|s| triplet_at(0.0, 0.0, s), -5.0, 5.0);
    assert!((s.exp() - 2.0 * 2f64.ln()).abs() < 1e-3);
}

// ---- mining ----------------------------------------------------------------

#[test]
fn mining_on_a_hand_specified_matrix() {
    #[rustfmt::skip]
    let dist = Tensor::from_vec(&[4, 4], vec![
        0.0, 2.0, 5.0, 1.0,
        2.0, 0.0, 3.0, 3.0,
        5.0, 3.0, 0.0, 4.0,
        1.0, 3.0, 4.0, 0.0,
    ]);
    let labels = [0, 0, 1, 1];
    let m = batch_hard_mine(&dist, &labels).unwrap();
    let got: Vec<(usize, usize)> = m
        .triplets
        .iter()
        .map(|t| (t.positive, t.negative))
        .collect();
    assert_eq!(got, vec![(1, 3), (0, 2), (3, 1), (2, 0)]);
    assert_eq!(got, exhaustive_mine(&dist, &labels));
}

#[test]
fn mining_identical_pairs() {
    let e = Tensor::from_vec(&[4, 1], vec![0.0, 0.0, 1.0, 1.0]);
    let m = batch_hard_mine(&sq_dist_matrix(&e, &e), &[0, 0, 1, 1]).unwrap();
    assert!(m.triplets.iter().all(|t| t.d_ap == 0.0 && t.d_an == 1.0));
}

#[test]
fn mining_singleton_names_the_identity() {
    let e = Tensor::zeros(&[3, 2]);
    let err = batch_hard_mine(&sq_dist_matrix(&e, &e), &[4, 4, 9]).unwrap_err();
    assert!(err.to_string().contains("identity 9"), "{err}");
}

fn random_batch(r: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let ids = r.gen_range(2..=4);
    let per = r.gen_range(2..=4);
    let mut labels: Vec<usize> = (0..ids).flat_map(|l| std::iter::repeat_n(l, per)).collect();
    labels.truncate(16);
    let e = Tensor::from_fn(&[labels.len(), 2], |_| r.gen_range(-2i32..=2) as f64);
    (sq_dist_matrix(&e, &e), labels)
}

#[test]
fn mining_matches_exhaustive_search() {
    let mut r = rng(11);
    for _ in 0..200 {
        let (dist, labels) = random_batch(&mut r);
        let m = batch_hard_mine(&dist, &labels).unwrap();
        let got: Vec<_> = m
            .triplets
            .iter()
            .map(|t| (t.positive, t.negative))
            .collect();
        assert_eq!(got, exhaustive_mine(&dist, &labels));
    }
}

#[test]
fn mining_is_permutation_equivariant() {
    let mut r = rng(12);
    for _ in 0..20 {
        let b = 8;
        let labels: Vec<usize> = (0..b).map(|i| i / 2).collect();
        let e = Tensor::randn(&[b, 3], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        // row k of the permuted batch is original row perm[k]
        let pe = Tensor::from_fn(&[b, 3], |i| e.at(&[perm[i / 3], i % 3]));
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = batch_hard_mine(&sq_dist_matrix(&e, &e), &labels).unwrap();
        let p = batch_hard_mine(&sq_dist_matrix(&pe, &pe), &pl).unwrap();
        for (k, t) in p.triplets.iter().enumerate() {
            let orig = &a.triplets[perm[k]];
            assert_eq!(perm[t.positive], orig.positive);
            assert_eq!(perm[t.negative], orig.negative);
        }
    }
}

// ---- centroids -------------------------------------------------------------

#[test]
fn centroid_means() {
    let e = Tensor::from_vec(&[4, 2], vec![0.0, 0.0, 2.0, 2.0, 5.0, 5.0, 5.0, 5.0]);
    let c = compute_centroids(&e, &[0, 0, 1, 1], false).unwrap();
    assert_eq!(c.centroids.row(0), &[1.0, 1.0]);
    assert_eq!(c.centroids.row(1), &[5.0, 5.0]);
    let c = compute_centroids(&e, &[0, 0, 1, 1], true).unwrap();
    assert_eq!(c.positive.row(0), &[2.0, 2.0]);
    assert!(compute_centroids(&e, &[0, 0, 1, 2], true).is_err());
}

#[test]
fn nearest_centroid_matches_brute_force() {
    let mut r = rng(13);
    for _ in 0..50 {
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let e = Tensor::randn(&[9, 3], 1.0, &mut r);
        let c = compute_centroids(&e, &labels, true).unwrap();
        for a in 0..9 {
            let mut best = (usize::MAX, f64::INFINITY);
            for k in 0..3 {
                if k == labels[a] {
                    continue;
                }
                let members: Vec<usize> = (0..9).filter(|&j| labels[j] == k).collect();
                let mean: Vec<f64> = (0..3)
                    .map(|t| members.iter().map(|&j| e.at(&[j, t])).sum::<f64>() / 3.0)
                    .collect();
                let d = common::sq_dist(e.row(a), &mean);
                if d < best.1 {
                    best = (k, d);
                }
            }
            assert_eq!(c.classes[c.negative_class[a]], best.0);
            assert!((c.d_neg[a] - best.1).abs() < 1e-12);
        }
    }
}

// ---- camera-centroid loss ------------------------------------------------------

fn camid(e: &Tensor, labels: &[usize], log_var: f64) -> f64 {
    let mut g = Graph::new();
    let ev = g.constant(e.clone());
    let lv = g.constant(Tensor::full(&[labels.len()], log_var));
    let l = ua_camid_loss(&mut g, ev, labels, lv, CLAMP).unwrap();
    g.value(l).item()
}

#[test]
fn camid_hand_values() {
    let h = 3f64.sqrt();
    // each anchor sits at squared distance 4 from both its positive and negative centroid
    let e = Tensor::from_vec(&[4, 2], vec![-1.0, 0.0, 1.0, 0.0, -1.0, h, 1.0, h]);
    assert!((camid(&e, &[0, 0, 1, 1], 0.0) - 2f64.ln()).abs() < 1e-12);
    let e = Tensor::from_vec(
        &[6, 2],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0],
    );
    let want = (1.0 + (-8f64).exp()).ln();
    assert!((camid(&e, &[0, 0, 0, 1, 1, 1], 0.0) - want).abs() < 1e-12);
    assert!((want - 3.35e-4).abs() < 1e-6);
}

#[test]
fn camid_is_rotation_and_relabeling_invariant() {
    let mut r = rng(14);
    let labels = [0, 0, 1, 1, 1, 2, 2, 3, 3];
    for _ in 0..20 {
        let e = Tensor::randn(&[9, 4], 1.0, &mut r);
        let lv = r.gen_range(-1.0..1.0);
        let base = camid(&e, &labels, lv);
        let rot = random_rotation(4, &mut r);
        let shift: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        assert!((camid(&rigid(&e, &rot, &shift), &labels, lv) - base).abs() < 1e-6);
        let relabeled: Vec<usize> = labels.iter().map(|&l| [7, 2, 40, 5][l]).collect();
        assert!((camid(&e, &relabeled, lv) - base).abs() < 1e-12);
    }
}

// ---- center loss -------------------------------------------------------------

fn center(f: &Tensor, labels: &[usize], centers: &Tensor, sigma: f64) -> f64 {
    let mut g = Graph::new();
    let (fv, cv) = (g.constant(f.clone()), g.constant(centers.clone()));
    let s = g.constant(Tensor::scalar(sigma));
    let l = ua_center_loss(&mut g, fv, labels, cv, s).unwrap();
    g.value(l).item()
}

#[test]
fn center_loss_hand_values() {
    let centers = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, -1.0, 0.0]);
    assert_eq!(center(&centers, &[0, 1], &centers, 1.0), 0.0);
    let f = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]);
    assert!((center(&f, &[0], &centers, 1.0) - 2.0).abs() < 1e-12);
    let f = Tensor::randn(&[3, 2], 1.0, &mut rng(15));
    let a = center(&f, &[0, 1, 1], &centers, 0.7);
    assert!((center(&f, &[0, 1, 1], &centers, 1.4) - a / 2.0).abs() < 1e-12);

    let mut g = Graph::new();
    let (fv, cv) = (g.constant(f), g.constant(centers));
    let s = g.constant(Tensor::scalar(1.0));
    assert!(ua_center_loss(&mut g, fv, &[0, 1, 2], cv, s).is_err());
}

// ---- total ---------------------------------------------------------------------

fn components(g: &mut Graph, v: [f64; 4]) -> LossComponents {
    LossComponents {
        softmax: g.constant(Tensor::scalar(v[0])),
        triplet: g.constant(Tensor::scalar(v[1])),
        camid: g.constant(Tensor::scalar(v[2])),
        center: g.constant(Tensor::scalar(v[3])),
    }
}

fn total(v: [f64; 4], w: &LossWeights) -> reid_core::Result<f64> {
    let mut g = Graph::new();
    let c = components(&mut g, v);
    let t = total_loss(&mut g, &c, w, 3)?;
    Ok(g.value(t).item())
}

#[test]
fn total_hand_values() {
    let w = LossWeights::default();
    assert_eq!(total([0.0; 4], &w).unwrap(), 0.0);
    // the ID term is softmax + triplet = 1
    assert!((total([0.25, 0.75, 1.0, 1.0], &w).unwrap() - 1.5005).abs() < 1e-12);
    let k = 3.5;
    let wk = LossWeights {
        alpha1: k * w.alpha1,
        alpha2: k * w.alpha2,
        alpha3: k * w.alpha3,
    };
    let v = [0.3, 1.2, 0.8, 40.0];
    assert!((total(v, &wk).unwrap() - k * total(v, &w).unwrap()).abs() < 1e-12);
}

#[test]
fn non_finite_component_aborts_with_its_name() {
    let err = total([0.1, f64::NAN, 0.0, 0.0], &LossWeights::default()).unwrap_err();
    match err {
        ReidError::NonFinite { component, batch } => {
            assert_eq!(component, "triplet");
            assert_eq!(batch, 3);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn every_loss_form_passes_gradient_check() {
    let cases: Vec<_> = gradsuite::cases()
        .into_iter()
        .filter(|c| c.group == Group::Loss)
        .collect();
    assert_eq!(cases.len(), 6);
    for c in cases {
        let r = c.check(5).unwrap();
        assert!(r.max_rel_error < TOL, "{}: {}", c.name, r.max_rel_error);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn report_recomposes_total(seed in 0u64..1_000_000, a2 in 0.0f64..2.0, a3 in 0.0f64..0.01) {
        let mut r = rng(seed);
        let b = 8;
        let labels: Vec<usize> = (0..b).map(|i| i / 2).collect();
        let cams: Vec<usize> = (0..b).map(|i| i % 2).collect();
        let mut g = Graph::new();
        let heads = HeadOutputs {
            id_logits: g.constant(Tensor::randn(&[b, 4], 1.0, &mut r)),
            id_embedding: g.constant(Tensor::randn(&[b, 5], 1.0, &mut r)),
            id_feature: g.constant(Tensor::randn(&[b, 5], 1.0, &mut r)),
            cam_embedding: g.constant(Tensor::randn(&[b, 3], 1.0, &mut r)),
            log_var_id: g.constant(Tensor::randn(&[b], 1.0, &mut r)),
            log_var_cam: g.constant(Tensor::randn(&[b], 1.0, &mut r)),
        };
        let centers = g.constant(Tensor::randn(&[4, 5], 1.0, &mut r));
        let mut cfg = LossConfig::default();
        cfg.weights.alpha2 = a2;
        cfg.weights.alpha3 = a3;
        let m = multitask_loss(&mut g, &heads, &labels, &cams, centers, None, &cfg, 0).unwrap();
        prop_assert!((m.report.recompose(&cfg.weights) - m.report.total).abs() < 1e-9);
    }

    #[test]
    fn loss_terms_are_bounded_below(d_ap in 0.0f64..50.0, d_an in 0.0f64..50.0, s in -10.0f64..10.0) {
        // softplus(m)·e^{-s} + s/2 ≥ s/2
        prop_assert!(triplet_at(d_ap, d_an, s) >= 0.5 * s - 1e-12);
    }
}
