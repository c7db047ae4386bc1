//! Training loop, evaluation driver and the output files they write.
//!
//! A training run writes into its output directory:
//!
//! * `train_log.csv`: one loss row per optimizer step.
//! * `checkpoint.bin`: parameters after the latest finished epoch.
//! * `eval_log.csv`: `epoch,rank1,mAP` for periodic evaluations.
//! * `eval_report.json`, `curves.csv`: final evaluation.
//! * `nonfinite_dump.json`: only when a loss went non-finite.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{EvalSplit, TrainConfig};
use crate::data::{DatasetManifest, ImageCache, PkSampler, Split};
use crate::error::{config, ReidError, Result};
use crate::losses::{LossReport, LOSS_CSV_HEADER};
use crate::metrics::{evaluate, export_curves, EvalReport, EvalSet, Label};
use crate::model::ReidModel;
use crate::nn::{ParamStore, Session};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};

pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "eval_report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const DUMP_FILE: &str = "nonfinite_dump.json";

/// Stored in the checkpoint header so `eval` can rebuild the model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub num_ids: usize,
    pub epoch: usize,
    pub step: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: ReidModel,
    pub images: ImageCache,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    pub step: usize,
    pub epoch: usize,
    pub steps_per_epoch: usize,
    opt: AdamW,
    sampler: PkSampler,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        let tv = manifest.train_view()?;
        let images = ImageCache::load(manifest, &tv.records, cfg.backbone.image_size.0)?;
        Self::from_parts(cfg, images, tv.labels, tv.cameras)
    }

    /// `labels` must be contiguous in `0..num_ids`.
    pub fn from_parts(
        cfg: TrainConfig,
        images: ImageCache,
        labels: Vec<usize>,
        cameras: Vec<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.backbone.image_size.0 != cfg.backbone.image_size.1
            || images.size != cfg.backbone.image_size.0
        {
            return Err(config(
                "images must be square and match the configured image_size",
            ));
        }
        if labels.len() != images.len() || cameras.len() != images.len() {
            return Err(config("one label and camera per image required"));
        }
        let num_ids = labels.iter().max().map_or(0, |m| m + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = ReidModel::new(&mut store, &cfg, num_ids, &mut rng)?;
        let sampler = PkSampler::new(&labels, cfg.p, cfg.k)?;
        let steps_per_epoch = sampler.epoch(&mut rng.clone()).len();
        if steps_per_epoch == 0 {
            return Err(config("sampler yields no batches"));
        }
        let opt = AdamW::new(
            &store,
            AdamWConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.adam_eps,
                weight_decay: cfg.weight_decay,
            },
        );
        Ok(Self {
            cfg,
            store,
            model,
            images,
            labels,
            cameras,
            step: 0,
            epoch: 0,
            steps_per_epoch,
            opt,
            sampler,
            rng,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(
            step,
            self.total_steps(),
            self.cfg.lr,
            self.cfg.lr * self.cfg.min_lr_ratio,
        )
    }

    /// Forward, backward and one optimizer update on cached images `batch`.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<LossReport> {
        let obj: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let cam: Vec<usize> = batch.iter().map(|&i| self.cameras[i]).collect();
        let mut s = Session::train(&self.store);
        let x = s.g.constant(self.images.batch(batch));
        let out = self.model.forward(&mut s, x)?;
        let loss = self
            .model
            .loss(&mut s, &out, &obj, &cam, &self.cfg, self.step)?;
        let mut rec = s.finish();
        rec.graph.backward(loss.total)?;
        self.store.zero_grad();
        self.store.accumulate_grads(&rec);
        self.store.apply_updates(&rec);
        let lr = self.lr_at(self.step);
        self.opt.step(&mut self.store, lr);
        self.step += 1;
        Ok(loss.report)
    }

    /// One pass of PK batches; `on_step(step, report)` sees every step.
    pub fn train_epoch(
        &mut self,
        on_step: &mut dyn FnMut(usize, &LossReport) -> Result<()>,
    ) -> Result<f64> {
        let batches = self.sampler.epoch(&mut self.rng);
        let mut sum = 0.0;
        for batch in &batches {
            let step = self.step;
            let r = self.train_step(batch).map_err(|e| match e {
                ReidError::NonFinite { component, .. } => ReidError::NonFinite {
                    component: format!("{component} (epoch {}, images {batch:?})", self.epoch),
                    batch: step,
                },
                e => e,
            })?;
            on_step(step, &r)?;
            sum += r.total;
        }
        self.epoch += 1;
        Ok(sum / batches.len() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            config: self.cfg.clone(),
            num_ids: self.model.num_ids,
            epoch: self.epoch,
            step: self.step,
        };
        let meta = serde_json::to_value(meta).map_err(|e| ReidError::Format(e.to_string()))?;
        Ok(Checkpoint::from_store(&self.store, meta))
    }
}

/// Cached query and gallery images with their labels.
pub struct EvalData {
    pub query: ImageCache,
    pub query_labels: Vec<Label>,
    pub gallery: ImageCache,
    pub gallery_labels: Vec<Label>,
}

impl EvalData {
    pub fn load(manifest: &DatasetManifest, split: EvalSplit, size: usize) -> Result<Self> {
        let has_holdout =
            !manifest.split(Split::Query).is_empty() && !manifest.split(Split::Gallery).is_empty();
        let m = match split {
            EvalSplit::Holdout if !has_holdout => {
                return Err(config("manifest has no query/gallery records"))
            }
            EvalSplit::Holdout => manifest.clone(),
            EvalSplit::Auto if has_holdout => manifest.clone(),
            EvalSplit::Auto | EvalSplit::Train => manifest.sanity_split(),
        };
        let q = m.split(Split::Query);
        let g = m.split(Split::Gallery);
        let labels = |idx: &[usize]| idx.iter().map(|&i| m.records[i].label()).collect();
        Ok(Self {
            query: ImageCache::load(&m, &q, size)?,
            query_labels: labels(&q),
            gallery: ImageCache::load(&m, &g, size)?,
            gallery_labels: labels(&g),
        })
    }

    pub fn embed(&self, model: &ReidModel, store: &ParamStore, chunk: usize) -> Result<EvalSet> {
        Ok(EvalSet {
            query: model.embed(store, &self.query, chunk)?,
            query_labels: self.query_labels.clone(),
            gallery: model.embed(store, &self.gallery, chunk)?,
            gallery_labels: self.gallery_labels.clone(),
        })
    }

    pub fn evaluate(
        &self,
        model: &ReidModel,
        store: &ParamStore,
        cfg: &TrainConfig,
    ) -> Result<EvalReport> {
        let set = self.embed(model, store, cfg.eval_chunk)?;
        Ok(evaluate(&set, cfg.max_rank)?.report)
    }
}

pub fn write_report(report: &EvalReport, out_dir: &Path, svg: bool) -> Result<()> {
    let json =
        serde_json::to_string_pretty(report).map_err(|e| ReidError::Format(e.to_string()))?;
    std::fs::write(out_dir.join(REPORT_FILE), json + "\n")?;
    export_curves(report, &out_dir.join(CURVES_FILE), svg)
}

pub struct TrainSummary {
    pub report: EvalReport,
    pub epochs: usize,
    pub steps: usize,
    pub out_dir: PathBuf,
}

/// Trains for `cfg.epochs`, writing the files listed in the module docs.
pub fn run_training(
    cfg: TrainConfig,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    manifest.validate(true)?;
    let size = cfg.backbone.image_size.0;
    let eval_data = EvalData::load(&manifest, cfg.eval_split, size)?;
    let mut trainer = Trainer::new(cfg.clone(), &manifest)?;
    log::info!(
        "training {} images, {} ids, {} trainable scalars, {} steps/epoch",
        trainer.images.len(),
        trainer.model.num_ids,
        trainer.store.num_trainable(),
        trainer.steps_per_epoch
    );
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(out_dir.join(LOG_FILE))?);
    writeln!(log_file, "{LOSS_CSV_HEADER}")?;
    let mut eval_log = if cfg.eval_every > 0 {
        let mut f = std::fs::File::create(out_dir.join(EVAL_LOG_FILE))?;
        writeln!(f, "epoch,rank1,mAP")?;
        Some(f)
    } else {
        None
    };
    let mut last: Option<LossReport> = None;
    for epoch in 0..cfg.epochs {
        let res = trainer.train_epoch(&mut |step, r| {
            writeln!(log_file, "{}", r.csv_row(step))?;
            last = Some(*r);
            Ok(())
        });
        log_file.flush()?;
        match res {
            Ok(mean) => log::info!("epoch {} mean loss {mean:.6}", epoch + 1),
            Err(e @ ReidError::NonFinite { .. }) => {
                let dump = serde_json::json!({
                    "error": e.to_string(),
                    "epoch": epoch,
                    "step": trainer.step,
                    "lr": trainer.lr_at(trainer.step),
                    "last_finite_report": last,
                });
                std::fs::write(out_dir.join(DUMP_FILE), dump.to_string() + "\n")?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        trainer.checkpoint()?.save(&out_dir.join(CHECKPOINT_FILE))?;
        if let Some(f) = eval_log.as_mut() {
            if (epoch + 1) % cfg.eval_every == 0 {
                let r = eval_data.evaluate(&trainer.model, &trainer.store, &cfg)?;
                writeln!(f, "{},{},{}", epoch + 1, r.rank(1), r.map)?;
                log::info!(
                    "epoch {} rank-1 {:.4} mAP {:.4}",
                    epoch + 1,
                    r.rank(1),
                    r.map
                );
            }
        }
    }
    if cfg.epochs == 0 {
        trainer.checkpoint()?.save(&out_dir.join(CHECKPOINT_FILE))?;
    }
    let report = eval_data.evaluate(&trainer.model, &trainer.store, &cfg)?;
    write_report(&report, out_dir, false)?;
    Ok(TrainSummary {
        report,
        epochs: trainer.epoch,
        steps: trainer.step,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Rebuilds a model and its parameters from a checkpoint.
pub fn load_model(path: &Path) -> Result<(CheckpointMeta, ReidModel, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.header.meta.clone())
        .map_err(|e| ReidError::Format(e.to_string()))?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = ReidModel::new(&mut store, &meta.config, meta.num_ids, &mut rng)?;
    ck.restore(&mut store)?;
    Ok((meta, model, store))
}

/// Evaluates a checkpoint on a manifest and writes the report and curves.
pub fn run_eval(
    ckpt: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    split: Option<EvalSplit>,
    svg: bool,
) -> Result<EvalReport> {
    std::fs::create_dir_all(out_dir)?;
    let (meta, model, store) = load_model(ckpt)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    manifest.validate(true)?;
    let data = EvalData::load(
        &manifest,
        split.unwrap_or(meta.config.eval_split),
        meta.config.backbone.image_size.0,
    )?;
    let report = data.evaluate(&model, &store, &meta.config)?;
    write_report(&report, out_dir, svg)?;
    Ok(report)
}
