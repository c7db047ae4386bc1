use std::path::Path;
use std::process::{Command, Output};

fn reid(args: &[&str], seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reid"));
    c.args(args).env("RUST_LOG", "warn").env_remove("REID_SEED");
    if let Some(s) = seed {
        c.env("REID_SEED", s);
    }
    c.output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const GEN: &str =
    "num_ids = 4\nimages_per_id_per_cam = 4\nholdout_per_id_per_cam = 2\nimage_size = 32\n";
const TRAIN: &str =
    "preset = desk\nimage_size = 32\np = 2\nk = 2\nepochs = 1\nlr = 1e-3\nseed = 3\n";

fn setup(dir: &Path) -> std::path::PathBuf {
    std::fs::write(dir.join("gen.txt"), GEN).unwrap();
    std::fs::write(dir.join("train.txt"), TRAIN).unwrap();
    let data = dir.join("data");
    let out = stdout(&reid(
        &["gen", "--spec", p(&dir.join("gen.txt")), "--out", p(&data)],
        None,
    ));
    assert!(out.contains("wrote 32 images"), "{out}");
    data.join("manifest.csv")
}

fn train(dir: &Path, manifest: &Path, run: &str, seed: Option<&str>) -> Vec<u8> {
    let out = dir.join(run);
    stdout(&reid(
        &[
            "train",
            "--config",
            p(&dir.join("train.txt")),
            "--data",
            p(manifest),
            "--out",
            p(&out),
        ],
        seed,
    ));
    std::fs::read(out.join("train_log.csv")).unwrap()
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let rows = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(rows.lines().count(), 33);

    train(dir.path(), &manifest, "a", None);
    let ckpt = dir.path().join("a/checkpoint.bin");
    let ev = dir.path().join("ev");
    let out = stdout(&reid(
        &[
            "eval",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&manifest),
            "--out",
            p(&ev),
            "--svg",
        ],
        None,
    ));
    assert!(out.starts_with("rank-1 "), "{out}");
    for f in ["eval_report.json", "curves.csv", "curves.svg"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let a = std::fs::read(dir.path().join("a/eval_report.json")).unwrap();
    assert_eq!(a, std::fs::read(ev.join("eval_report.json")).unwrap());
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let base = train(dir.path(), &manifest, "base", None);
    assert_eq!(train(dir.path(), &manifest, "same", Some("3")), base);
    assert_ne!(train(dir.path(), &manifest, "other", Some("4")), base);

    let o = reid(
        &[
            "train",
            "--config",
            p(&dir.path().join("train.txt")),
            "--data",
            p(&manifest),
            "--out",
            p(&dir.path().join("x")),
        ],
        Some("abc"),
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("REID_SEED"));
}

#[test]
fn gradcheck_single_op_and_unknown_op() {
    let out = stdout(&reid(&["gradcheck", "--op", "softmax"], None));
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("PASS softmax"), "{out}");
    let o = reid(&["gradcheck", "--op", "nope"], None);
    assert!(!o.status.success());
    let list = stdout(&reid(&["gradcheck", "--list"], None));
    assert!(list.lines().any(|l| l.ends_with("\tfull_model")));
}

#[test]
fn oracle_metrics_reports_no_mismatches() {
    let out = stdout(&reid(&["oracle-metrics", "--trials", "200"], None));
    assert_eq!(out.trim(), "200 trials, 0 mismatches");
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "num_idz = 4\n").unwrap();
    let o = reid(
        &["gen", "--spec", p(&cfg), "--out", p(&dir.path().join("d"))],
        None,
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_idz"));
}

#[test]
fn shipped_configs_parse() {
    use reid_core::config::{Kv, TrainConfig};
    use reid_core::data::SyntheticSpec;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = TrainConfig::load(&root.join("desk.txt")).unwrap();
    assert_eq!(
        desk,
        TrainConfig {
            eval_every: 10,
            ..TrainConfig::desk()
        }
    );
    assert_eq!(
        TrainConfig::load(&root.join("full.txt")).unwrap(),
        TrainConfig::full()
    );
    let gen = SyntheticSpec::from_kv(Kv::load(&root.join("gen_desk.txt")).unwrap()).unwrap();
    assert_eq!(gen, SyntheticSpec::default());
    let overfit = SyntheticSpec::from_kv(Kv::load(&root.join("gen_overfit.txt")).unwrap()).unwrap();
    assert_eq!(overfit.total_images(), 128);
}
