//! Flat `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, lists are comma separated.
//! Unknown keys are rejected. `preset` (if present) is applied before every
//! other key regardless of its position.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, NUM_STAGES};
use crate::error::{config, Result};
use crate::heads::{LogVarClamp, CAM_DIM};
use crate::losses::{CenterSigma, CentroidGrouping, LossConfig};

/// Parsed key-value pairs; typed getters consume keys so leftovers can be
/// reported as unknown.
#[derive(Clone, Debug, Default)]
pub struct Kv {
    source: String,
    map: BTreeMap<String, (String, usize)>,
}

impl Kv {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("{source}:{}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(config(format!("{source}:{}: empty key", i + 1)));
            }
            if map
                .insert(k.clone(), (v.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(config(format!("{source}:{}: duplicate key {k}", i + 1)));
            }
        }
        Ok(Self {
            source: source.to_string(),
            map,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    fn bad(&self, key: &str, line: usize, v: &str) -> crate::error::ReidError {
        config(format!(
            "{}:{line}: invalid value {v:?} for {key}",
            self.source
        ))
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| self.bad(key, line, &v)),
        }
    }

    pub fn get_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| self.bad(key, line, &v)),
        }
    }

    fn get_stages(&mut self, key: &str) -> Result<Option<[usize; NUM_STAGES]>> {
        match self.get_list::<usize>(key)? {
            None => Ok(None),
            Some(v) => v
                .try_into()
                .map(Some)
                .map_err(|_| config(format!("{}: {key} needs {NUM_STAGES} values", self.source))),
        }
    }

    /// Fails if any key was never read.
    pub fn finish(self) -> Result<()> {
        match self.map.iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(config(format!("{}:{line}: unknown key {k}", self.source))),
        }
    }
}

impl FromStr for CentroidGrouping {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "object" => Ok(Self::Object),
            "camera" => Ok(Self::Camera),
            _ => Err(()),
        }
    }
}

impl FromStr for CenterSigma {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "batch_mean" => Ok(Self::BatchMean),
            "learned" => Ok(Self::Learned),
            _ => Err(()),
        }
    }
}

/// Which records the end-of-training evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Query/gallery records when the manifest has them, else `Train`.
    Auto,
    Holdout,
    /// Train records as both query and gallery.
    Train,
}

impl FromStr for EvalSplit {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "auto" => Ok(Self::Auto),
            "holdout" => Ok(Self::Holdout),
            "train" => Ok(Self::Train),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    /// Fused descriptor width `D`.
    pub embed_dim: usize,
    pub cam_dim: usize,
    pub loss: LossConfig,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity per batch.
    pub k: usize,
    pub lr: f64,
    /// Final cosine learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate every this many epochs during training; 0 disables.
    pub eval_every: usize,
    pub eval_split: EvalSplit,
    /// Ranks reported in CMC curves.
    pub max_rank: usize,
    /// Images per forward pass when embedding for evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            embed_dim: 256,
            cam_dim: CAM_DIM,
            loss: LossConfig::default(),
            p: 8,
            k: 4,
            lr: 3e-4,
            min_lr_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 200,
            seed: 0,
            eval_every: 0,
            eval_split: EvalSplit::Auto,
            max_rank: 20,
            eval_chunk: 16,
        }
    }

    /// Full-resolution profile: 224×224, batch 128, lr 1.5e-5.
    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig::pvt_small(),
            p: 32,
            k: 4,
            lr: 1.5e-5,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(config(format!("unknown preset {name:?} (desk, full)"))),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(Kv::load(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(Kv::parse(text, "<config>")?)
    }

    pub fn from_kv(mut kv: Kv) -> Result<Self> {
        let mut c = match kv.get::<String>("preset")? {
            Some(p) => Self::preset(&p)?,
            None => Self::desk(),
        };
        let b = &mut c.backbone;
        if let Some(name) = kv.get::<String>("backbone")? {
            let size = b.image_size;
            *b = BackboneConfig::preset(&name)?;
            b.image_size = size;
        }
        if let Some(s) = kv.get::<usize>("image_size")? {
            b.image_size = (s, s);
        }
        if kv.get::<bool>("overlap")? == Some(false) {
            *b = b.clone().non_overlapping();
        }
        macro_rules! stages {
            ($($key:literal => $field:ident),*) => {$(
                if let Some(v) = kv.get_stages($key)? { b.$field = v; }
            )*};
        }
        stages!(
            "embed_dims" => embed_dims,
            "depths" => depths,
            "heads" => heads,
            "sr_ratios" => sr_ratios,
            "patch_sizes" => patch_sizes,
            "strides" => strides,
            "paddings" => paddings
        );
        macro_rules! scalars {
            ($($key:literal => $($field:ident).+),*) => {$(
                if let Some(v) = kv.get($key)? { c.$($field).+ = v; }
            )*};
        }
        scalars!(
            "mlp_ratio" => backbone.mlp_ratio,
            "embed_dim" => embed_dim,
            "cam_dim" => cam_dim,
            "alpha1" => loss.weights.alpha1,
            "alpha2" => loss.weights.alpha2,
            "alpha3" => loss.weights.alpha3,
            "log_var_min" => loss.clamp.lo,
            "log_var_max" => loss.clamp.hi,
            "centroid_grouping" => loss.grouping,
            "center_sigma" => loss.center_sigma,
            "p" => p,
            "k" => k,
            "lr" => lr,
            "min_lr_ratio" => min_lr_ratio,
            "beta1" => beta1,
            "beta2" => beta2,
            "adam_eps" => adam_eps,
            "weight_decay" => weight_decay,
            "epochs" => epochs,
            "seed" => seed,
            "eval_every" => eval_every,
            "eval_split" => eval_split,
            "max_rank" => max_rank,
            "eval_chunk" => eval_chunk
        );
        if let Some(bs) = kv.get::<usize>("batch_size")? {
            if bs != c.batch_size() {
                return Err(config(format!(
                    "batch_size {bs} must equal p*k = {}",
                    c.batch_size()
                )));
            }
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.weights.validate()?;
        let LogVarClamp { lo, hi } = self.loss.clamp;
        if !(lo < hi) {
            return Err(config("log_var_min must be below log_var_max"));
        }
        if self.embed_dim < 16 || !self.embed_dim.is_multiple_of(16) {
            return Err(config("embed_dim must be a positive multiple of 16"));
        }
        if self.cam_dim == 0 {
            return Err(config("cam_dim must be positive"));
        }
        if self.p < 2 || self.k < 2 {
            return Err(config("p and k must both be at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config("lr must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(config("min_lr_ratio must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.eval_chunk == 0 || self.max_rank == 0 {
            return Err(config("eval_chunk and max_rank must be positive"));
        }
        Ok(())
    }
}
