//! The full re-identification network: backbone, fusion and both heads.

use rand::Rng;

use crate::autodiff::Var;
use crate::backbone::{FeatureMapPyramid, PyramidBackbone};
use crate::config::TrainConfig;
use crate::data::ImageCache;
use crate::error::{config, Result};
use crate::fusion::{FusionOutput, PyramidFusion};
use crate::heads::{CamHead, HeadOutputs, IdHead};
use crate::losses::{multitask_loss, CenterSigma, MultiTaskLoss};
use crate::nn::{ParamId, ParamKind, ParamStore, Session, INIT_STD};
use crate::par;
use crate::tensor::Tensor;

pub struct ModelOutput {
    pub pyramid: FeatureMapPyramid,
    pub fusion: FusionOutput,
    pub heads: HeadOutputs,
}

#[derive(Clone, Debug)]
pub struct ReidModel {
    pub backbone: PyramidBackbone,
    pub fusion: PyramidFusion,
    pub id_head: IdHead,
    pub cam_head: CamHead,
    /// Per-identity centers for the center loss, `(num_ids, D)`.
    pub centers: ParamId,
    pub center_log_sigma: Option<ParamId>,
    pub num_ids: usize,
}

impl ReidModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &TrainConfig,
        num_ids: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_ids < 2 {
            return Err(config(format!("need at least 2 identities, got {num_ids}")));
        }
        let d = cfg.embed_dim;
        let backbone = PyramidBackbone::new(store, &cfg.backbone, rng)?;
        let fusion = PyramidFusion::new(store, &cfg.backbone.embed_dims, d, rng);
        let id_head = IdHead::new(store, d, num_ids, rng)?;
        let cam_head = CamHead::new(store, d, cfg.cam_dim, rng);
        let centers = store.add(
            "center_loss.centers",
            Tensor::trunc_normal(&[num_ids, d], INIT_STD, rng),
            ParamKind::NoDecay,
        );
        let center_log_sigma = (cfg.loss.center_sigma == CenterSigma::Learned).then(|| {
            store.add(
                "center_loss.log_sigma",
                Tensor::zeros(&[1]),
                ParamKind::NoDecay,
            )
        });
        Ok(Self {
            backbone,
            fusion,
            id_head,
            cam_head,
            centers,
            center_log_sigma,
            num_ids,
        })
    }

    pub fn forward(&self, s: &mut Session, images: Var) -> Result<ModelOutput> {
        let pyramid = self.backbone.forward(s, images)?;
        let fusion = self.fusion.forward(s, &pyramid)?;
        let (id_logits, id_embedding, id_feature, log_var_id) =
            self.id_head.forward(s, fusion.fused)?;
        let (cam_embedding, log_var_cam) = self.cam_head.forward(s, fusion.fused)?;
        Ok(ModelOutput {
            pyramid,
            fusion,
            heads: HeadOutputs {
                id_logits,
                id_embedding,
                id_feature,
                cam_embedding,
                log_var_id,
                log_var_cam,
            },
        })
    }

    pub fn loss(
        &self,
        s: &mut Session,
        out: &ModelOutput,
        object_labels: &[usize],
        camera_labels: &[usize],
        cfg: &TrainConfig,
        batch_index: usize,
    ) -> Result<MultiTaskLoss> {
        let centers = s.param(self.centers);
        let log_sigma = match self.center_log_sigma {
            Some(id) => {
                let v = s.param(id);
                Some(s.g.reshape(v, &[])?)
            }
            None => None,
        };
        multitask_loss(
            &mut s.g,
            &out.heads,
            object_labels,
            camera_labels,
            centers,
            log_sigma,
            &cfg.loss,
            batch_index,
        )
    }

    /// L2-normalized fused retrieval embeddings `(N, D)` in eval mode.
    /// Each image is processed independently, so chunking does not change
    /// the result.
    pub fn embed(&self, store: &ParamStore, images: &ImageCache, chunk: usize) -> Result<Tensor> {
        let n = images.len();
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let parts = par::map_range(starts.len(), true, |i| {
            let idx: Vec<usize> = (starts[i]..(starts[i] + chunk).min(n)).collect();
            let mut s = Session::eval(store);
            let x = s.g.constant(images.batch(&idx));
            let pyr = self.backbone.forward(&mut s, x)?;
            let f = self.fusion.forward(&mut s, &pyr)?;
            Ok::<_, crate::error::ReidError>(s.g.value(f.retrieval).data().to_vec())
        });
        let mut data = Vec::with_capacity(n * self.fusion.dim);
        for p in parts {
            data.extend(p?);
        }
        Ok(Tensor::from_vec(&[n, self.fusion.dim], data))
    }
}
