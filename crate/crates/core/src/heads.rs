//! Object-ID and camera heads with per-sample log-variance readouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config, shape_err, Result};
use crate::fusion::BatchInstanceNorm;
use crate::nn::{Linear, ParamStore, Session};

/// Bounds applied to predicted log-variances before exponentiation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogVarClamp {
    pub lo: f64,
    pub hi: f64,
}

impl Default for LogVarClamp {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
        }
    }
}

/// `σ² = exp(clamp(log_var))`.
pub fn variance_of(g: &mut Graph, log_var: Var, clamp: LogVarClamp) -> Result<Var> {
    let s = g.clamp(log_var, clamp.lo, clamp.hi)?;
    g.exp(s)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub id_logits: Var,
    /// Normalized pre-logit feature the classifier reads, `(B, D)`.
    pub id_embedding: Var,
    /// Feature before the normalization neck, `(B, D)`; the triplet and
    /// center terms measure distances here.
    pub id_feature: Var,
    /// L2-normalized camera-head embedding, `(B, Dc)`.
    pub cam_embedding: Var,
    pub log_var_id: Var,
    pub log_var_cam: Var,
}

#[derive(Clone, Debug)]
pub struct IdHead {
    pub fc: Linear,
    pub neck: BatchInstanceNorm,
    pub classifier: Linear,
    pub log_var: Linear,
    pub num_ids: usize,
}

impl IdHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        num_ids: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_ids < 2 {
            return Err(config(format!(
                "id head needs at least 2 classes, got {num_ids}"
            )));
        }
        Ok(Self {
            fc: Linear::new(store, "id_head.fc", dim, dim, true, rng),
            // The instance branch is identically zero on vectors, so the
            // neck keeps the batch branch only.
            neck: BatchInstanceNorm::batch_only(store, "id_head.neck", dim),
            classifier: Linear::new(store, "id_head.classifier", dim, num_ids, false, rng),
            log_var: Linear::new(store, "id_head.log_var", dim, 1, true, rng),
            num_ids,
        })
    }

    /// Returns `(id_logits, id_embedding, id_feature, log_var_id)`.
    pub fn forward(&self, s: &mut Session, embedding: Var) -> Result<(Var, Var, Var, Var)> {
        let sh = s.g.shape(embedding).to_vec();
        if sh.len() != 2 {
            return Err(shape_err("id_head", &sh, &[2]));
        }
        let h = self.fc.forward(s, embedding)?;
        let f = self.neck.forward(s, h)?;
        let logits = self.classifier.forward(s, f)?;
        let lv = self.log_var.forward(s, embedding)?;
        let lv = s.g.reshape(lv, &[sh[0]])?;
        Ok((logits, f, h, lv))
    }
}

pub const CAM_DIM: usize = 128;

#[derive(Clone, Debug)]
pub struct CamHead {
    pub proj: Linear,
    pub log_var: Linear,
}

impl CamHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(store, "cam_head.proj", dim, out, true, rng),
            log_var: Linear::new(store, "cam_head.log_var", dim, 1, true, rng),
        }
    }

    /// Returns `(cam_embedding, log_var_cam)`.
    pub fn forward(&self, s: &mut Session, embedding: Var) -> Result<(Var, Var)> {
        let sh = s.g.shape(embedding).to_vec();
        if sh.len() != 2 {
            return Err(shape_err("cam_head", &sh, &[2]));
        }
        let e = self.proj.forward(s, embedding)?;
        let e = s.g.l2_normalize(e)?;
        let lv = self.log_var.forward(s, embedding)?;
        let lv = s.g.reshape(lv, &[sh[0]])?;
        Ok((e, lv))
    }
}
