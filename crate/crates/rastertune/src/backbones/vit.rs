//! Mini vision transformer with per-frame multi-band patch embedding, a
//! learned temporal index embedding, no class token, and fixed-length
//! positional embeddings.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::factory::{BuildCtx, FactoryError};
use crate::nn::{Conv2d, Init, LayerNorm, Linear};
use crate::tensor::{init, ParamId, ParamSet, Tape, Tensor};

use super::{Backbone, BackboneError, FeatureMap, FeatureMapSet, ItemMeta, MapForm};

const PROJ_STD: f32 = 0.02;

fn default_patch() -> usize {
    8
}
fn default_embed() -> usize {
    64
}
fn default_depth() -> usize {
    4
}
fn default_heads() -> usize {
    2
}

/// Config-surface arguments (band list and frame count come from the data
/// section, not from here).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyViTArgs {
    pub img_size: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default)]
    pub out_indices: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ToyViTConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_bands: Vec<String>,
    pub num_frames: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub out_indices: Vec<usize>,
}

impl ToyViTConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.img_size == 0 || self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return Err(format!(
                "img_size {} must be a positive multiple of patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_frames == 0 {
            return Err("num_frames must be >= 1".into());
        }
        if self.in_bands.is_empty() {
            return Err("band list is empty".into());
        }
        if self.out_indices.is_empty() {
            return Err("out_indices is empty".into());
        }
        if !self.out_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!("out_indices {:?} must be strictly increasing", self.out_indices));
        }
        if *self.out_indices.last().unwrap() >= self.depth {
            return Err(format!(
                "out_indices {:?} exceed depth {}",
                self.out_indices, self.depth
            ));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.img_size / self.patch_size
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(params: &mut ParamSet, path: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: LayerNorm::new(params, &format!("{path}.norm1"), d),
            qkv: Linear::new(params, &format!("{path}.attn.qkv"), d, 3 * d, Init::TruncNormal(PROJ_STD), rng),
            proj: Linear::new(params, &format!("{path}.attn.proj"), d, d, Init::TruncNormal(PROJ_STD), rng),
            norm2: LayerNorm::new(params, &format!("{path}.norm2"), d),
            fc1: Linear::new(params, &format!("{path}.mlp.fc1"), d, 4 * d, Init::TruncNormal(PROJ_STD), rng),
            fc2: Linear::new(params, &format!("{path}.mlp.fc2"), 4 * d, d, Init::TruncNormal(PROJ_STD), rng),
            heads,
        }
    }

    fn attention(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, BackboneError> {
        let (b, n, d) = {
            let s = tape.shape(x);
            (s[0], s[1], s[2])
        };
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(tape, x)?; // (B,N,3d)
        let qkv = tape.reshape(qkv, &[b, n, 3, h, dh])?;
        let split = |tape: &mut Tape, which: usize| -> Result<Tensor, BackboneError> {
            let t = tape.index_axis(qkv, 2, which)?; // (B,N,h,dh)
            let t = tape.permute(t, &[0, 2, 1, 3])?; // (B,h,N,dh)
            Ok(tape.reshape(t, &[b * h, n, dh])?)
        };
        let q = split(tape, 0)?;
        let k = split(tape, 1)?;
        let v = split(tape, 2)?;
        let kt = tape.permute(k, &[0, 2, 1])?; // (B*h, dh, N)
        let scores = tape.batch_matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let attn = tape.softmax_last(scores);
        let ctx = tape.batch_matmul(attn, v)?; // (B*h, N, dh)
        let ctx = tape.reshape(ctx, &[b, h, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        Ok(self.proj.forward(tape, ctx)?)
    }

    fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, BackboneError> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.attention(tape, h)?;
        let x = tape.add(x, h)?;
        let m = self.norm2.forward(tape, x)?;
        let m = self.fc1.forward(tape, m)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, m)?;
        Ok(tape.add(x, m)?)
    }
}

pub struct ToyViT {
    cfg: ToyViTConfig,
    patch: Conv2d,
    pos_embed: ParamId,
    temporal_embed: ParamId,
    blocks: Vec<Block>,
}

impl ToyViT {
    pub fn new(
        cfg: ToyViTConfig,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FactoryError> {
        cfg.validate().map_err(|detail| FactoryError::BadArgs {
            component: "toyvit".into(),
            detail,
        })?;
        let n = cfg.grid_side();
        let d = cfg.embed_dim;
        let c = cfg.in_bands.len();
        let patch = Conv2d::new(
            params,
            &format!("{prefix}.patch_embed"),
            c,
            d,
            cfg.patch_size,
            cfg.patch_size,
            0,
            Init::TruncNormal(PROJ_STD),
            rng,
        );
        let pos_embed = params.add(
            format!("{prefix}.pos_embed"),
            init::trunc_normal(&[1, n * n, d], PROJ_STD, rng),
        );
        let temporal_embed = params.add(
            format!("{prefix}.temporal_embed"),
            init::trunc_normal(&[cfg.num_frames, d], PROJ_STD, rng),
        );
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(params, &format!("{prefix}.blocks.{i}"), d, cfg.num_heads, rng))
            .collect();
        Ok(Self {
            cfg,
            patch,
            pos_embed,
            temporal_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &ToyViTConfig {
        &self.cfg
    }
}

impl Backbone for ToyViT {
    fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<FeatureMapSet, BackboneError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected (B,T,C,H,W), got {s:?}"
            )));
        }
        let (t, c, h, w) = (s[1], s[2], s[3], s[4]);
        if t != self.cfg.num_frames {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected {} frames, got {t}",
                self.cfg.num_frames
            )));
        }
        if c != self.cfg.in_bands.len() {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected {} bands, got {c}",
                self.cfg.in_bands.len()
            )));
        }
        if h != self.cfg.img_size || w != self.cfg.img_size {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected {0}x{0} input (fixed positional embedding), got {h}x{w}",
                self.cfg.img_size
            )));
        }
        let b = s[0];
        let n = self.cfg.grid_side();
        let d = self.cfg.embed_dim;

        let mut frame_tokens = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = tape.index_axis(x, 1, ti)?;
            let tok = self.patch.forward(tape, xt)?; // (B,d,n,n)
            let tok = tape.reshape(tok, &[b, d, n * n])?;
            let tok = tape.permute(tok, &[0, 2, 1])?; // (B,n^2,d)
            let pos = tape.param(self.pos_embed);
            let tok = tape.add(tok, pos)?;
            let temb = tape.param(self.temporal_embed);
            let temb = tape.index_axis(temb, 0, ti)?;
            let temb = tape.reshape(temb, &[1, 1, d])?;
            frame_tokens.push(tape.add(tok, temb)?);
        }
        let mut tokens = if frame_tokens.len() == 1 {
            frame_tokens[0]
        } else {
            tape.concat(1, &frame_tokens)?
        };

        let mut items = Vec::with_capacity(self.cfg.out_indices.len());
        for (i, block) in self.blocks.iter().enumerate() {
            tokens = block.forward(tape, tokens)?;
            if self.cfg.out_indices.contains(&i) {
                items.push(FeatureMap {
                    tensor: tokens,
                    form: MapForm::Tokens {
                        frames: t,
                        grid: (n, n),
                    },
                });
            }
        }
        Ok(FeatureMapSet { items })
    }

    fn out_meta(&self) -> Vec<ItemMeta> {
        let n = self.cfg.grid_side();
        self.cfg
            .out_indices
            .iter()
            .map(|_| ItemMeta {
                form: MapForm::Tokens {
                    frames: self.cfg.num_frames,
                    grid: (n, n),
                },
                channels: self.cfg.embed_dim,
            })
            .collect()
    }

    fn bands(&self) -> &[String] {
        &self.cfg.in_bands
    }

    fn num_frames(&self) -> usize {
        self.cfg.num_frames
    }

    fn fixed_input_size(&self) -> Option<usize> {
        Some(self.cfg.img_size)
    }

    fn input_divisor(&self) -> usize {
        self.cfg.patch_size
    }
}

/// Registry builder.
pub fn build_toyvit(
    args: &serde_yaml::Value,
    ctx: &BuildCtx,
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Backbone>, FactoryError> {
    let args: ToyViTArgs =
        serde_yaml::from_value(args.clone()).map_err(|e| FactoryError::BadArgs {
            component: "toyvit".into(),
            detail: e.to_string(),
        })?;
    let depth = args.depth;
    let cfg = ToyViTConfig {
        img_size: args.img_size,
        patch_size: args.patch_size,
        in_bands: ctx.bands.clone(),
        num_frames: ctx.num_frames,
        embed_dim: args.embed_dim,
        depth,
        num_heads: args.num_heads,
        out_indices: args.out_indices.unwrap_or_else(|| vec![depth - 1]),
    };
    Ok(Box::new(ToyViT::new(cfg, params, prefix, rng)?))
}

/// Token-count law check used by tests: N = T * (H/p)^2.
pub fn expected_tokens(cfg: &ToyViTConfig) -> usize {
    cfg.num_frames * cfg.grid_side() * cfg.grid_side()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::SeedableRng;

    fn small_cfg(t: usize, out_indices: Vec<usize>) -> ToyViTConfig {
        ToyViTConfig {
            img_size: 16,
            patch_size: 8,
            in_bands: vec!["b1".into(), "b2".into(), "b3".into()],
            num_frames: t,
            embed_dim: 8,
            depth: 3,
            num_heads: 2,
            out_indices,
        }
    }

    fn build(cfg: ToyViTConfig) -> (ParamSet, ToyViT) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vit = ToyViT::new(cfg, &mut params, "backbone", &mut rng).unwrap();
        (params, vit)
    }

    #[test]
    fn token_count_and_order() {
        let (params, vit) = build(small_cfg(1, vec![0, 2]));
        let mut tape = Tape::for_inference(&params);
        let x = tape.input(ArrayD::zeros(IxDyn(&[2, 1, 3, 16, 16])));
        let fms = vit.forward(&mut tape, x).unwrap();
        assert_eq!(fms.len(), 2);
        for fm in &fms.items {
            assert_eq!(tape.shape(fm.tensor), &[2, 4, 8]);
        }
    }

    #[test]
    fn temporal_frames_double_token_count() {
        let (params, vit) = build(small_cfg(2, vec![2]));
        let mut tape = Tape::for_inference(&params);
        let x = tape.input(ArrayD::zeros(IxDyn(&[1, 2, 3, 16, 16])));
        let fms = vit.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(fms.items[0].tensor), &[1, 8, 8]);
    }

    #[test]
    fn wrong_band_count_rejected() {
        let (params, vit) = build(small_cfg(1, vec![2]));
        let mut tape = Tape::for_inference(&params);
        let x = tape.input(ArrayD::zeros(IxDyn(&[1, 1, 4, 16, 16])));
        assert!(matches!(
            vit.forward(&mut tape, x),
            Err(BackboneError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn wrong_frame_count_rejected() {
        let (params, vit) = build(small_cfg(2, vec![2]));
        let mut tape = Tape::for_inference(&params);
        let x = tape.input(ArrayD::zeros(IxDyn(&[1, 1, 3, 16, 16])));
        assert!(vit.forward(&mut tape, x).is_err());
    }

    #[test]
    fn deterministic_construction() {
        let (p1, _) = build(small_cfg(1, vec![2]));
        let (p2, _) = build(small_cfg(1, vec![2]));
        for ((_, path1, v1), (_, path2, v2)) in p1.iter().zip(p2.iter()) {
            assert_eq!(path1, path2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ToyViTConfig {
            img_size: 15,
            ..small_cfg(1, vec![0])
        }
        .validate()
        .is_err());
        assert!(ToyViTConfig {
            embed_dim: 9,
            ..small_cfg(1, vec![0])
        }
        .validate()
        .is_err());
        assert!(small_cfg(1, vec![3]).validate().is_err());
        assert!(small_cfg(1, vec![2, 1]).validate().is_err());
    }
}
