//! 4-stage convolutional pyramid encoder with cumulative strides [4, 2, 2, 2].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::factory::{BuildCtx, FactoryError};
use crate::nn::{Conv2d, Init};
use crate::tensor::{ParamSet, Tape, Tensor};

use super::{Backbone, BackboneError, FeatureMap, FeatureMapSet, ItemMeta, MapForm};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvPyramidArgs {
    pub stage_channels: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct ConvPyramidConfig {
    pub in_bands: Vec<String>,
    pub stage_channels: [usize; 4],
}

struct Stage {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Stage {
    fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, BackboneError> {
        let x = self.conv1.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, x)?;
        Ok(tape.relu(x))
    }
}

pub struct ConvPyramid {
    cfg: ConvPyramidConfig,
    stages: Vec<Stage>,
}

impl ConvPyramid {
    pub fn new(
        cfg: ConvPyramidConfig,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FactoryError> {
        if cfg.in_bands.is_empty() {
            return Err(FactoryError::BadArgs {
                component: "conv_pyramid".into(),
                detail: "band list is empty".into(),
            });
        }
        if cfg.stage_channels.iter().any(|&c| c == 0) {
            return Err(FactoryError::BadArgs {
                component: "conv_pyramid".into(),
                detail: "stage_channels must be positive".into(),
            });
        }
        let mut stages = Vec::with_capacity(4);
        let mut c_in = cfg.in_bands.len();
        for (i, &c_out) in cfg.stage_channels.iter().enumerate() {
            let path = format!("{prefix}.stages.{i}");
            // Stage 0 is the stride-4 stem; later stages halve resolution.
            let conv1 = if i == 0 {
                Conv2d::new(params, &format!("{path}.conv1"), c_in, c_out, 7, 4, 3, Init::He, rng)
            } else {
                Conv2d::new(params, &format!("{path}.conv1"), c_in, c_out, 3, 2, 1, Init::He, rng)
            };
            let conv2 = Conv2d::new(params, &format!("{path}.conv2"), c_out, c_out, 3, 1, 1, Init::He, rng);
            stages.push(Stage { conv1, conv2 });
            c_in = c_out;
        }
        Ok(Self { cfg, stages })
    }
}

impl Backbone for ConvPyramid {
    fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<FeatureMapSet, BackboneError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected (B,T,C,H,W), got {s:?}"
            )));
        }
        if s[1] != 1 {
            return Err(BackboneError::ShapeMismatch(format!(
                "conv_pyramid takes single-frame input, got T={}",
                s[1]
            )));
        }
        if s[2] != self.cfg.in_bands.len() {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected {} bands, got {}",
                self.cfg.in_bands.len(),
                s[2]
            )));
        }
        let (h, w) = (s[3], s[4]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(BackboneError::ShapeMismatch(format!(
                "input {h}x{w} must be divisible by 32"
            )));
        }
        let mut cur = tape.index_axis(x, 1, 0)?; // (B,C,H,W)
        let mut items = Vec::with_capacity(4);
        for stage in &self.stages {
            cur = stage.forward(tape, cur)?;
            items.push(FeatureMap {
                tensor: cur,
                form: MapForm::Grid,
            });
        }
        Ok(FeatureMapSet { items })
    }

    fn out_meta(&self) -> Vec<ItemMeta> {
        self.cfg
            .stage_channels
            .iter()
            .map(|&c| ItemMeta {
                form: MapForm::Grid,
                channels: c,
            })
            .collect()
    }

    fn bands(&self) -> &[String] {
        &self.cfg.in_bands
    }

    fn num_frames(&self) -> usize {
        1
    }

    fn fixed_input_size(&self) -> Option<usize> {
        None
    }

    fn input_divisor(&self) -> usize {
        32
    }
}

pub fn build_conv_pyramid(
    args: &serde_yaml::Value,
    ctx: &BuildCtx,
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Backbone>, FactoryError> {
    let args: ConvPyramidArgs =
        serde_yaml::from_value(args.clone()).map_err(|e| FactoryError::BadArgs {
            component: "conv_pyramid".into(),
            detail: e.to_string(),
        })?;
    if ctx.num_frames != 1 {
        return Err(FactoryError::BadArgs {
            component: "conv_pyramid".into(),
            detail: format!("single-frame backbone, data declares num_frames={}", ctx.num_frames),
        });
    }
    let cfg = ConvPyramidConfig {
        in_bands: ctx.bands.clone(),
        stage_channels: args.stage_channels,
    };
    Ok(Box::new(ConvPyramid::new(cfg, params, prefix, rng)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn build() -> (ParamSet, ConvPyramid) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ConvPyramidConfig {
            in_bands: vec!["b1".into()],
            stage_channels: [8, 16, 32, 64],
        };
        let bb = ConvPyramid::new(cfg, &mut params, "backbone", &mut rng).unwrap();
        (params, bb)
    }

    #[test]
    fn stage_shapes_follow_stride_arithmetic() {
        let (params, bb) = build();
        let mut tape = Tape::for_inference(&params);
        let x = tape.input(ArrayD::zeros(IxDyn(&[1, 1, 1, 64, 64])));
        let fms = bb.forward(&mut tape, x).unwrap();
        let sizes: Vec<usize> = fms.items.iter().map(|fm| tape.shape(fm.tensor)[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        let chans: Vec<usize> = fms.items.iter().map(|fm| tape.shape(fm.tensor)[1]).collect();
        assert_eq!(chans, vec![8, 16, 32, 64]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let (params, bb) = build();
        let mut tape = Tape::for_inference(&params);
        let x = tape.input(ArrayD::zeros(IxDyn(&[1, 1, 1, 48, 48])));
        assert!(bb.forward(&mut tape, x).is_err());
    }

    #[test]
    fn inference_is_bitwise_repeatable() {
        let (params, bb) = build();
        let xv = ArrayD::from_shape_fn(IxDyn(&[1, 1, 1, 64, 64]), |ix| {
            ((ix[3] * 7 + ix[4]) % 13) as f32 * 0.1
        });
        let run = || {
            let mut tape = Tape::for_inference(&params);
            let x = tape.input(xv.clone());
            let fms = bb.forward(&mut tape, x).unwrap();
            tape.value(fms.items[3].tensor).clone()
        };
        assert_eq!(run(), run());
    }
}
