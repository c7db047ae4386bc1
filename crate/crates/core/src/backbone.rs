//! Four-stage pyramid transformer encoder.
//!
//! Each stage embeds overlapping patches of the previous map, adds a learned
//! position embedding, and runs `depth` pre-norm encoder layers whose
//! attention reads keys and values from a spatially reduced token grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{UnfoldSpec, Var};
use crate::error::{config, shape_err, Result};
use crate::nn::{LayerNorm, Linear, ParamId, ParamKind, ParamStore, Session, INIT_STD};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// (height, width) the position embeddings are laid out for.
    pub image_size: (usize, usize),
    pub in_chans: usize,
    pub patch_sizes: [usize; NUM_STAGES],
    pub strides: [usize; NUM_STAGES],
    pub paddings: [usize; NUM_STAGES],
    pub embed_dims: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub sr_ratios: [usize; NUM_STAGES],
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// CPU-sized pyramid: 64×64 input, dims (32, 64, 128, 256).
    pub fn desk() -> Self {
        Self {
            image_size: (64, 64),
            in_chans: 3,
            patch_sizes: [7, 3, 3, 3],
            strides: [4, 2, 2, 2],
            paddings: [3, 1, 1, 1],
            embed_dims: [32, 64, 128, 256],
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
        }
    }

    fn pvt(embed_dims: [usize; 4], depths: [usize; 4], heads: [usize; 4]) -> Self {
        Self {
            image_size: (224, 224),
            embed_dims,
            depths,
            heads,
            ..Self::desk()
        }
    }

    pub fn pvt_tiny() -> Self {
        Self::pvt([64, 128, 320, 512], [2, 2, 2, 2], [1, 2, 5, 8])
    }

    pub fn pvt_small() -> Self {
        Self::pvt([64, 128, 320, 512], [3, 4, 6, 3], [1, 2, 5, 8])
    }

    pub fn pvt_medium() -> Self {
        Self::pvt([64, 128, 320, 512], [3, 4, 18, 3], [1, 2, 5, 8])
    }

    pub fn pvt_large() -> Self {
        Self::pvt([64, 128, 320, 512], [3, 8, 27, 3], [1, 2, 5, 8])
    }

    /// Non-overlapping 4×4 / 2×2 patches as in the original pyramid design.
    pub fn non_overlapping(mut self) -> Self {
        self.patch_sizes = [4, 2, 2, 2];
        self.strides = [4, 2, 2, 2];
        self.paddings = [0; 4];
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "pvt-tiny" => Ok(Self::pvt_tiny()),
            "pvt-small" => Ok(Self::pvt_small()),
            "pvt-medium" => Ok(Self::pvt_medium()),
            "pvt-large" => Ok(Self::pvt_large()),
            other => Err(config(format!("unknown backbone preset {other:?}"))),
        }
    }

    pub fn patch_spec(&self, stage: usize) -> UnfoldSpec {
        UnfoldSpec::square(
            self.patch_sizes[stage],
            self.strides[stage],
            self.paddings[stage],
        )
    }

    /// Per-stage grid extents for an `h × w` input, checking that each
    /// stage lands exactly on `h/4 … h/32`.
    pub fn stage_grids(&self, h: usize, w: usize) -> Result<[(usize, usize); NUM_STAGES]> {
        if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(config(format!(
                "image extents {h}x{w} must be positive multiples of 32"
            )));
        }
        let mut grids = [(0, 0); NUM_STAGES];
        let (mut ch, mut cw) = (h, w);
        for s in 0..NUM_STAGES {
            let (gh, gw) = self.patch_spec(s).output_extents(ch, cw)?;
            let div = 4 << s;
            if (gh, gw) != (h / div, w / div) {
                return Err(config(format!(
                    "stage {} grid {gh}x{gw} is not {}x{} under patch {} stride {} padding {}",
                    s + 1,
                    h / div,
                    w / div,
                    self.patch_sizes[s],
                    self.strides[s],
                    self.paddings[s]
                )));
            }
            let sr = self.sr_ratios[s];
            if gh % sr != 0 || gw % sr != 0 {
                return Err(config(format!(
                    "stage {} grid {gh}x{gw} is not divisible by sr_ratio {sr}",
                    s + 1
                )));
            }
            grids[s] = (gh, gw);
            (ch, cw) = (gh, gw);
        }
        Ok(grids)
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..NUM_STAGES {
            let (c, h) = (self.embed_dims[s], self.heads[s]);
            if h == 0 || c % h != 0 {
                return Err(config(format!(
                    "stage {}: embed dim {c} not divisible by {h} heads",
                    s + 1
                )));
            }
            if self.sr_ratios[s] == 0 {
                return Err(config(format!("stage {}: sr_ratio must be >= 1", s + 1)));
            }
            if self.strides[s] == 0 || self.strides[s] > self.patch_sizes[s] {
                return Err(config(format!(
                    "stage {}: stride must be in 1..=patch_size",
                    s + 1
                )));
            }
            if s > 0 && self.embed_dims[s] <= self.embed_dims[s - 1] {
                return Err(config("embed dims must strictly increase across stages"));
            }
        }
        if self.mlp_ratio == 0 || self.in_chans == 0 {
            return Err(config("mlp_ratio and in_chans must be positive"));
        }
        self.stage_grids(self.image_size.0, self.image_size.1)?;
        Ok(())
    }
}

/// Bilinear resampling matrix `(oh·ow, ih·iw)` with half-pixel centers.
pub fn bilinear_matrix(ih: usize, iw: usize, oh: usize, ow: usize) -> Tensor {
    let axis = |i_n: usize, o_n: usize| -> Vec<[(usize, f64); 2]> {
        let scale = i_n as f64 / o_n as f64;
        (0..o_n)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (i_n - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(i_n - 1);
                let t = src - lo as f64;
                [(lo, 1.0 - t), (hi, t)]
            })
            .collect()
    };
    let ay = axis(ih, oh);
    let ax = axis(iw, ow);
    let mut m = Tensor::zeros(&[oh * ow, ih * iw]);
    for (oy, wy) in ay.iter().enumerate() {
        for (ox, wx) in ax.iter().enumerate() {
            for &(iy, fy) in wy {
                for &(ix, fx) in wx {
                    let r = oy * ow + ox;
                    let c = iy * iw + ix;
                    let cur = m.at(&[r, c]);
                    m.set(&[r, c], cur + fy * fx);
                }
            }
        }
    }
    m
}

/// Overlapping patch embedding: window gather, linear projection, layer
/// norm, then the stage's position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub spec: UnfoldSpec,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub pos: ParamId,
    pub pos_grid: (usize, usize),
    pub dim: usize,
}

impl PatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: UnfoldSpec,
        in_chans: usize,
        dim: usize,
        pos_grid: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let patch = spec.kernel.0 * spec.kernel.1 * in_chans;
        let proj = Linear::new(store, &format!("{name}.proj"), patch, dim, true, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim);
        let pos = store.add(
            format!("{name}.pos"),
            Tensor::trunc_normal(&[pos_grid.0 * pos_grid.1, dim], INIT_STD, rng),
            ParamKind::NoDecay,
        );
        Self {
            spec,
            proj,
            norm,
            pos,
            pos_grid,
            dim,
        }
    }

    /// `(B,H,W,Cin)` → tokens `(B, gh·gw, dim)` and the grid extents.
    pub fn forward(&self, s: &mut Session, fmap: Var) -> Result<(Var, (usize, usize))> {
        let patches = s.g.unfold(fmap, self.spec)?;
        let sh = s.g.shape(patches).to_vec();
        let (b, gh, gw) = (sh[0], sh[1], sh[2]);
        let tokens = s.g.reshape(patches, &[b, gh * gw, sh[3]])?;
        let tokens = self.proj.forward(s, tokens)?;
        let tokens = self.norm.forward(s, tokens)?;
        let mut pos = s.param(self.pos);
        if (gh, gw) != self.pos_grid {
            let r =
                s.g.constant(bilinear_matrix(self.pos_grid.0, self.pos_grid.1, gh, gw));
            pos = s.g.matmul(r, pos)?;
        }
        Ok((s.g.add(tokens, pos)?, (gh, gw)))
    }
}

/// Multi-head attention with keys/values taken from a token grid reduced by
/// `sr_ratio` in each spatial direction.
#[derive(Clone, Debug)]
pub struct SpatialReductionAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub reduce: Option<(Linear, LayerNorm)>,
    pub heads: usize,
    pub dim: usize,
    pub sr_ratio: usize,
}

impl SpatialReductionAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let q = Linear::new(store, &format!("{name}.q"), dim, dim, true, rng);
        let kv = Linear::new(store, &format!("{name}.kv"), dim, 2 * dim, true, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng);
        let reduce = (sr_ratio > 1).then(|| {
            (
                Linear::new(
                    store,
                    &format!("{name}.sr"),
                    sr_ratio * sr_ratio * dim,
                    dim,
                    true,
                    rng,
                ),
                LayerNorm::new(store, &format!("{name}.sr_norm"), dim),
            )
        });
        Self {
            q,
            kv,
            proj,
            reduce,
            heads,
            dim,
            sr_ratio,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, grid: (usize, usize)) -> Result<Var> {
        Ok(self.forward_with_weights(s, x, grid)?.0)
    }

    /// Returns the output tokens and the attention weights `(B, heads, N, N')`.
    pub fn forward_with_weights(
        &self,
        s: &mut Session,
        x: Var,
        grid: (usize, usize),
    ) -> Result<(Var, Var)> {
        let sh = s.g.shape(x).to_vec();
        if sh.len() != 3 || sh[2] != self.dim {
            return Err(shape_err(
                "sra_attention",
                &sh,
                &[grid.0 * grid.1, self.dim],
            ));
        }
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        if n != grid.0 * grid.1 {
            return Err(shape_err("sra_attention", &sh, &[grid.0, grid.1]));
        }
        let (h, d) = (self.heads, c / self.heads);

        let q = self.q.forward(s, x)?;
        let q = s.g.reshape(q, &[b, n, h, d])?;
        let q = s.g.permute(q, &[0, 2, 1, 3])?;

        let kv_src = match &self.reduce {
            Some((lin, norm)) => {
                let r = self.sr_ratio;
                if !grid.0.is_multiple_of(r) || !grid.1.is_multiple_of(r) {
                    return Err(config(format!(
                        "grid {}x{} not divisible by sr_ratio {r}",
                        grid.0, grid.1
                    )));
                }
                let xg = s.g.reshape(x, &[b, grid.0, grid.1, c])?;
                let merged = s.g.unfold(xg, UnfoldSpec::square(r, r, 0))?;
                let nr = (grid.0 / r) * (grid.1 / r);
                let merged = s.g.reshape(merged, &[b, nr, r * r * c])?;
                let red = lin.forward(s, merged)?;
                norm.forward(s, red)?
            }
            None => x,
        };
        let nk = s.g.shape(kv_src)[1];
        let kv = self.kv.forward(s, kv_src)?;
        let kv = s.g.reshape(kv, &[b, nk, 2, h, d])?;
        let kv = s.g.permute(kv, &[2, 0, 3, 1, 4])?;
        let k = s.g.narrow(kv, 0, 0, 1)?;
        let k = s.g.reshape(k, &[b, h, nk, d])?;
        let v = s.g.narrow(kv, 0, 1, 1)?;
        let v = s.g.reshape(v, &[b, h, nk, d])?;

        let kt = s.g.transpose_last(k)?;
        let scores = s.g.matmul(q, kt)?;
        let scores = s.g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = s.g.softmax(scores, -1)?;
        let out = s.g.matmul(attn, v)?;
        let out = s.g.permute(out, &[0, 2, 1, 3])?;
        let out = s.g.reshape(out, &[b, n, c])?;
        Ok((self.proj.forward(s, out)?, attn))
    }
}

/// Pre-norm encoder layer: attention and GELU feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: SpatialReductionAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: SpatialReductionAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                heads,
                sr_ratio,
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                dim,
                dim * mlp_ratio,
                true,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                dim * mlp_ratio,
                dim,
                true,
                rng,
            ),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, grid: (usize, usize)) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let h = self.attn.forward(s, h, grid)?;
        let x = s.g.add(x, h)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.g.gelu(h)?;
        let h = self.fc2.forward(s, h)?;
        s.g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

/// The four per-stage maps, `(B, H/4·2^-i, W/4·2^-i, C_i)` in NHWC layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMapPyramid {
    pub stages: [Var; NUM_STAGES],
}

#[derive(Clone, Debug)]
pub struct PyramidBackbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<Stage>,
}

impl PyramidBackbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let grids = cfg.stage_grids(cfg.image_size.0, cfg.image_size.1)?;
        let mut in_c = cfg.in_chans;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let name = format!("backbone.stage{}", i + 1);
            let dim = cfg.embed_dims[i];
            let embed = PatchEmbed::new(
                store,
                &format!("{name}.embed"),
                cfg.patch_spec(i),
                in_c,
                dim,
                grids[i],
                rng,
            );
            let layers = (0..cfg.depths[i])
                .map(|l| {
                    EncoderLayer::new(
                        store,
                        &format!("{name}.layer{l}"),
                        dim,
                        cfg.heads[i],
                        cfg.sr_ratios[i],
                        cfg.mlp_ratio,
                        rng,
                    )
                })
                .collect();
            let norm = LayerNorm::new(store, &format!("{name}.norm"), dim);
            stages.push(Stage {
                embed,
                layers,
                norm,
            });
            in_c = dim;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    /// Runs all four stages on `(B,H,W,3)` images.
    pub fn forward(&self, s: &mut Session, images: Var) -> Result<FeatureMapPyramid> {
        let sh = s.g.shape(images).to_vec();
        if sh.len() != 4 || sh[3] != self.cfg.in_chans {
            return Err(shape_err("forward_pyramid", &sh, &[self.cfg.in_chans]));
        }
        let grids = self.cfg.stage_grids(sh[1], sh[2])?;
        let b = sh[0];
        let mut x = images;
        let mut maps = Vec::with_capacity(NUM_STAGES);
        for (stage, &expect) in self.stages.iter().zip(&grids) {
            let (mut tokens, grid) = stage.embed.forward(s, x)?;
            debug_assert_eq!(grid, expect);
            for layer in &stage.layers {
                tokens = layer.forward(s, tokens, grid)?;
            }
            let tokens = stage.norm.forward(s, tokens)?;
            x = s.g.reshape(tokens, &[b, grid.0, grid.1, stage.embed.dim])?;
            maps.push(x);
        }
        Ok(FeatureMapPyramid {
            stages: [maps[0], maps[1], maps[2], maps[3]],
        })
    }
}
