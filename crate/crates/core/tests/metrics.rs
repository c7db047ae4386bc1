mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_eval_set, random_rotation, reference_eval, rigid};
use reid_core::metrics::{
    average_precision, evaluate, export_curves, pairwise_distances, rank_query, read_curves,
    EvalReport, EvalSet, Label,
};
use reid_core::Tensor;

fn lab(object_id: usize, camera_id: usize) -> Label {
    Label {
        object_id,
        camera_id,
    }
}

#[test]
fn distance_examples() {
    let x = Tensor::from_vec(&[1, 3], vec![0.3, -1.0, 2.0]);
    assert_eq!(pairwise_distances(&x, &x).unwrap().data(), &[0.0]);
    let e1 = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]);
    let e2 = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]);
    assert_eq!(pairwise_distances(&e1, &e2).unwrap().data(), &[2.0]);
    assert!(pairwise_distances(&e1, &x).is_err());
}

#[test]
fn distances_match_double_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn(&[5, 3], 1.0, &mut r);
    let g = Tensor::randn(&[7, 3], 1.0, &mut r);
    let d = pairwise_distances(&q, &g).unwrap();
    assert_eq!(d.shape(), &[5, 7]);
    for i in 0..5 {
        for j in 0..7 {
            let mut acc = 0.0;
            for t in 0..3 {
                acc += (q.at(&[i, t]) - g.at(&[j, t])).powi(2);
            }
            assert!((d.at(&[i, j]) - acc).abs() < 1e-9);
        }
    }
}

#[test]
fn perfect_and_hand_enumerated_precision() {
    let set = EvalSet {
        query: Tensor::from_vec(&[1, 1], vec![0.0]),
        query_labels: vec![lab(0, 0)],
        gallery: Tensor::from_vec(&[2, 1], vec![0.1, 5.0]),
        gallery_labels: vec![lab(0, 1), lab(1, 1)],
    };
    let r = evaluate(&set, 2).unwrap().report;
    assert_eq!(r.cmc, vec![1.0, 1.0]);
    assert_eq!(r.map, 1.0);
    assert!((average_precision(&[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((average_precision(&[true, false, true]) - 0.8333).abs() < 1e-4);
}

#[test]
fn same_camera_matches_are_excluded_and_empty_queries_skipped() {
    let set = EvalSet {
        query: Tensor::from_vec(&[2, 1], vec![0.0, 0.0]),
        query_labels: vec![lab(0, 0), lab(3, 0)],
        gallery: Tensor::from_vec(&[3, 1], vec![0.0, 1.0, 2.0]),
        gallery_labels: vec![lab(0, 0), lab(1, 1), lab(0, 1)],
    };
    let ev = evaluate(&set, 3).unwrap();
    assert_eq!(ev.rankings[0].ranked, vec![1, 2]);
    assert_eq!(ev.report.cmc, vec![0.0, 1.0, 1.0]);
    assert_eq!(ev.report.map, 0.5);
    assert_eq!((ev.report.num_valid, ev.report.skipped), (1, 1));
}

#[test]
fn distance_ties_go_to_the_lower_gallery_index() {
    let gallery = [lab(1, 1), lab(0, 1), lab(2, 1), lab(0, 1)];
    let r = rank_query(&[1.0, 1.0, 0.5, 1.0], lab(0, 0), &gallery);
    assert_eq!(r.ranked, vec![2, 0, 1, 3]);
    assert_eq!(r.first_match(), Some(3));
}

#[test]
fn evaluation_matches_reference_on_random_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let set = random_eval_set(&mut r, 8, 32, 2);
        let rep = evaluate(&set, 10).unwrap().report;
        let (cmc, map, valid) = reference_eval(&set, 10);
        assert_eq!(rep.cmc, cmc);
        assert_eq!(rep.map, map);
        assert_eq!(rep.num_valid, valid);
    }
}

#[test]
fn curves_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.csv");
    let report = EvalReport {
        cmc: vec![0.1 + 0.2, 2.0 / 3.0, 1.0],
        map: std::f64::consts::PI / 7.0,
        num_queries: 3,
        num_valid: 3,
        skipped: 0,
    };
    export_curves(&report, &path, true).unwrap();
    let (cmc, map) = read_curves(&path).unwrap();
    assert!(cmc
        .iter()
        .zip(&report.cmc)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(map.to_bits(), report.map.to_bits());
    let text = std::fs::read_to_string(&path).unwrap();
    let ranks: Vec<usize> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("mAP"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ranks, vec![1, 2, 3]);
    assert!(text.trim_end().ends_with(&format!("mAP,{}", report.map)));
    assert!(dir.path().join("curves.svg").exists());
}

#[test]
fn perfect_retrieval_curve_is_all_ones() {
    let set = EvalSet {
        query: Tensor::from_vec(&[2, 1], vec![0.0, 10.0]),
        query_labels: vec![lab(0, 0), lab(1, 0)],
        gallery: Tensor::from_vec(&[4, 1], vec![0.0, 10.0, 0.5, 10.5]),
        gallery_labels: vec![lab(0, 1), lab(1, 1), lab(0, 1), lab(1, 1)],
    };
    let r = evaluate(&set, 4).unwrap().report;
    assert!(r.cmc.iter().all(|&c| c == 1.0));
    assert_eq!(r.map, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmc_is_monotone_and_bounded(seed in 0u64..1_000_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let set = random_eval_set(&mut r, 8, 32, 3);
        let ev = evaluate(&set, 12).unwrap();
        prop_assert!(ev.report.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(ev.report.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!((0.0..=1.0).contains(&ev.report.map));
        for rk in &ev.rankings {
            prop_assert!((0.0..=1.0).contains(&rk.average_precision()));
        }
    }

    #[test]
    fn metrics_are_invariant_under_rigid_motion(seed in 0u64..1_000_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let nq = r.gen_range(1..=8);
        let ng = r.gen_range(2..=32);
        let labels = |n: usize, r: &mut ChaCha8Rng| -> Vec<Label> {
            (0..n).map(|_| lab(r.gen_range(0..4), r.gen_range(0..2))).collect()
        };
        let set = EvalSet {
            query: Tensor::randn(&[nq, d], 1.0, &mut r),
            query_labels: labels(nq, &mut r),
            gallery: Tensor::randn(&[ng, d], 1.0, &mut r),
            gallery_labels: labels(ng, &mut r),
        };
        let rot = random_rotation(d, &mut r);
        let shift: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
        let moved = EvalSet {
            query: rigid(&set.query, &rot, &shift),
            gallery: rigid(&set.gallery, &rot, &shift),
            ..set.clone()
        };
        let (a, b) = (evaluate(&set, 10).unwrap().report, evaluate(&moved, 10).unwrap().report);
        prop_assert!((a.map - b.map).abs() < 1e-9);
        for (x, y) in a.cmc.iter().zip(&b.cmc) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
