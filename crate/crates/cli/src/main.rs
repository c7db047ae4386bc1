use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reid_core::config::{EvalSplit, Kv, TrainConfig};
use reid_core::data::{generate, SyntheticSpec};
use reid_core::gradsuite;
use reid_core::oracle;
use reid_core::train::{run_eval, run_training};

/// Aerial object re-identification: data generation, training and evaluation.
#[derive(Parser)]
#[command(name = "reid", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset and its manifest.
    Gen {
        /// Flat key = value dataset description.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; `REID_SEED` overrides the configured seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Manifest CSV (`path,object_id,camera_id,split`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write the report and CMC curves.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// auto, holdout or train; defaults to the checkpoint's setting.
        #[arg(long)]
        split: Option<String>,
        /// Also write curves.svg.
        #[arg(long)]
        svg: bool,
    },
    /// Run central-difference gradient checks.
    Gradcheck {
        /// Only this check; `--list` shows the names.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare evaluation against a brute-force implementation.
    OracleMetrics {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("REID_SEED") {
        Ok(v) => {
            Ok(Some(v.trim().parse().with_context(|| {
                format!("REID_SEED={v:?} is not an integer")
            })?))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { spec, out } => {
            let spec = SyntheticSpec::from_kv(Kv::load(&spec)?)?;
            let m = generate(&spec, &out)?;
            println!(
                "wrote {} images and {}",
                m.records.len(),
                out.join("manifest.csv").display()
            );
        }
        Cmd::Train { config, data, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(seed) = seed_override()? {
                cfg.seed = seed;
            }
            let s = run_training(cfg, &data, &out)?;
            println!(
                "trained {} epochs ({} steps): rank-1 {:.4} mAP {:.4} ({} queries, {} skipped)",
                s.epochs,
                s.steps,
                s.report.rank(1),
                s.report.map,
                s.report.num_queries,
                s.report.skipped
            );
        }
        Cmd::Eval {
            ckpt,
            data,
            out,
            split,
            svg,
        } => {
            let split = match split.as_deref() {
                None => None,
                Some(s) => Some(
                    s.parse::<EvalSplit>()
                        .map_err(|_| anyhow::anyhow!("--split must be auto, holdout or train"))?,
                ),
            };
            let r = run_eval(&ckpt, &data, &out, split, svg)?;
            println!(
                "rank-1 {:.4} rank-5 {:.4} mAP {:.4} ({} queries, {} skipped)",
                r.rank(1),
                r.rank(5),
                r.map,
                r.num_queries,
                r.skipped
            );
        }
        Cmd::Gradcheck { op, list, seed } => {
            let cases = match op {
                Some(name) => vec![gradsuite::find(&name)
                    .with_context(|| format!("unknown check {name:?}; try --list"))?],
                None => gradsuite::cases(),
            };
            if list {
                for c in &cases {
                    println!("{:?}\t{}", c.group, c.name);
                }
                return Ok(());
            }
            let mut failed = 0;
            for c in &cases {
                let r = c.check(seed)?;
                let ok = r.passes(c.tol);
                failed += usize::from(!ok);
                println!(
                    "{} {:<20} max rel {:.3e} (tol {:.0e}) over {} coords",
                    if ok { "PASS" } else { "FAIL" },
                    c.name,
                    r.max_rel_error,
                    c.tol,
                    r.coords.len()
                );
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Cmd::OracleMetrics { trials, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = oracle::run_trials(trials, 10, &mut rng)?;
            println!("{} trials, {} mismatches", s.trials, s.mismatches);
            if let Some(t) = s.first_mismatch {
                bail!("first mismatch at trial {t}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
