mod common;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{tiny_config, tiny_data, tiny_spec};
use reid_core::config::{EvalSplit, TrainConfig};
use reid_core::data::{generate, render, DatasetManifest, PkSampler, Split, SyntheticSpec};
use reid_core::losses::batch_hard_mine;
use reid_core::nn::Session;
use reid_core::optim::cosine_lr;
use reid_core::train::{
    load_model, run_eval, run_training, EvalData, Trainer, CHECKPOINT_FILE, LOG_FILE, REPORT_FILE,
};
use reid_core::Tensor;

#[test]
fn generation_is_deterministic_and_counts_images() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SyntheticSpec::default();
    let ma = generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    assert_eq!(ma.records.len(), 128);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(
        read(a.path(), "manifest.csv"),
        read(b.path(), "manifest.csv")
    );
    for r in ma.records.iter().step_by(17) {
        assert_eq!(read(a.path(), &r.path), read(b.path(), &r.path));
    }
    let text = String::from_utf8(read(a.path(), "manifest.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("path,object_id,camera_id,split"));

    // 6 train, 1 query, 1 gallery per (id, camera)
    assert_eq!(ma.split(Split::Train).len(), 96);
    assert_eq!(ma.split(Split::Query).len(), 16);
    assert_eq!(ma.split(Split::Gallery).len(), 16);
    let reloaded = DatasetManifest::load(&a.path().join("manifest.csv")).unwrap();
    assert_eq!(reloaded.records, ma.records);
    reloaded.validate(true).unwrap();
}

#[test]
fn noiseless_renders_repeat_exactly() {
    let spec = SyntheticSpec {
        noise_std: 0.0,
        ..SyntheticSpec::default()
    };
    for id in [0, 5] {
        let a = render(&spec, id, 1, 0.7, 1);
        let b = render(&spec, id, 1, 0.7, 99);
        assert_eq!(a, b);
    }
    assert_ne!(render(&spec, 0, 0, 0.7, 1), render(&spec, 1, 0, 0.7, 1));
    assert_ne!(render(&spec, 0, 0, 0.7, 1), render(&spec, 0, 1, 0.7, 1));
}

#[test]
fn impossible_splits_are_config_errors() {
    let bad = SyntheticSpec {
        images_per_id_per_cam: 2,
        holdout_per_id_per_cam: 2,
        ..SyntheticSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        generate(&bad, dir.path()),
        Err(reid_core::ReidError::Config(_))
    ));
}

#[test]
fn pk_batches() {
    let labels: Vec<usize> = (0..8).flat_map(|l| std::iter::repeat_n(l, 12)).collect();
    let s = PkSampler::new(&labels, 4, 4).unwrap();
    assert_eq!(s.batch_size(), 16);
    let a = s.epoch(&mut ChaCha8Rng::seed_from_u64(3));
    let b = s.epoch(&mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(a, b);
    let mut seen = std::collections::BTreeSet::new();
    for batch in &a {
        assert_eq!(batch.len(), 16);
        let mut counts = BTreeMap::new();
        for &i in batch {
            *counts.entry(labels[i]).or_insert(0) += 1;
            seen.insert(labels[i]);
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 4));
        let bl: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        batch_hard_mine(&Tensor::zeros(&[16, 16]), &bl).unwrap();
    }
    assert_eq!(seen.len(), 8);
    assert!(PkSampler::new(&labels[..24], 4, 4).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 100, 3e-4, 3e-6), 3e-4);
    assert!((cosine_lr(100, 100, 3e-4, 3e-6) - 3e-6).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 3e-4, 3e-6) - 0.5 * (3e-4 + 3e-6)).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_data(dir.path());
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg, &m).unwrap();
    let before: Vec<Tensor> = t.store.entries().iter().map(|e| e.value.clone()).collect();
    t.train_step(&[0, 1, 8, 9, 16, 17]).unwrap();
    for (e, b) in t.store.entries().iter().zip(&before) {
        if e.trainable() {
            assert_eq!(&e.value, b, "{}", e.name);
        }
    }
    assert!(t
        .store
        .entries()
        .iter()
        .zip(&before)
        .any(|(e, b)| !e.trainable() && &e.value != b));
}

fn batch_loss(t: &Trainer, batch: &[usize]) -> f64 {
    let obj: Vec<usize> = batch.iter().map(|&i| t.labels[i]).collect();
    let cam: Vec<usize> = batch.iter().map(|&i| t.cameras[i]).collect();
    let mut s = Session::train(&t.store);
    let x = s.g.constant(t.images.batch(batch));
    let out = t.model.forward(&mut s, x).unwrap();
    t.model
        .loss(&mut s, &out, &obj, &cam, &t.cfg, 0)
        .unwrap()
        .report
        .total
}

#[test]
fn small_step_descends_on_average() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_data(dir.path());
    let batch = [0, 1, 8, 9, 16, 17];
    let mut deltas = Vec::new();
    for seed in 0..10 {
        let cfg = TrainConfig {
            lr: 1e-5,
            seed,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg, &m).unwrap();
        let before = batch_loss(&t, &batch);
        t.train_step(&batch).unwrap();
        deltas.push(batch_loss(&t, &batch) - before);
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(mean < 0.0, "{deltas:?}");
}

#[test]
fn epoch_mean_loss_decreases_over_five_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&SyntheticSpec::default(), dir.path()).unwrap();
    let mut t = Trainer::new(TrainConfig::desk(), &m).unwrap();
    let means: Vec<f64> = (0..5)
        .map(|_| t.train_epoch(&mut |_, _| Ok(())).unwrap())
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let data = tempfile::tempdir().unwrap();
    tiny_data(data.path());
    let manifest = data.path().join("manifest.csv");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_training(tiny_config(), &manifest, a.path()).unwrap();
    let rb = run_training(tiny_config(), &manifest, b.path()).unwrap();
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), LOG_FILE), read(b.path(), LOG_FILE));
    assert_eq!(read(a.path(), REPORT_FILE), read(b.path(), REPORT_FILE));
    assert_eq!(ra.report, rb.report);
    let log = String::from_utf8(read(a.path(), LOG_FILE)).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("step,total,softmax,triplet,camid,center,mean_sigma_id,mean_sigma_cam")
    );
    assert_eq!(log.lines().count(), 1 + ra.steps);

    let ckpt = a.path().join(CHECKPOINT_FILE);
    let e1 = tempfile::tempdir().unwrap();
    let first = run_eval(&ckpt, &manifest, e1.path(), None, false).unwrap();
    let second = run_eval(&ckpt, &manifest, e1.path(), None, false).unwrap();
    assert_eq!(first, second);
    assert_eq!(first, ra.report);

    let (meta, model, store) = load_model(&ckpt).unwrap();
    assert_eq!(meta.epoch, 2);
    let m = DatasetManifest::load(&manifest).unwrap();
    let data = EvalData::load(&m, EvalSplit::Train, 32).unwrap();
    assert_eq!(
        data.evaluate(&model, &store, &meta.config).unwrap(),
        ra.report
    );
}

#[test]
fn different_seeds_give_different_logs() {
    let data = tempfile::tempdir().unwrap();
    tiny_data(data.path());
    let manifest = data.path().join("manifest.csv");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    run_training(one.clone(), &manifest, a.path()).unwrap();
    run_training(TrainConfig { seed: 1, ..one }, &manifest, b.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join(LOG_FILE)).unwrap(),
        std::fs::read(b.path().join(LOG_FILE)).unwrap()
    );
}

#[test]
fn evaluation_needs_a_matching_image_size() {
    let data = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        image_size: 64,
        ..tiny_spec()
    };
    generate(&spec, data.path()).unwrap();
    assert!(run_training(
        tiny_config(),
        &data.path().join("manifest.csv"),
        data.path().join("out").as_path()
    )
    .is_err());
}
