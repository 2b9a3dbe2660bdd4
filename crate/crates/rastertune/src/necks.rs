//! Necks adapt layer-wise backbone outputs to the form a decoder expects.
//! They compose as an ordered pipeline declared in the model config.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{FeatureMap, FeatureMapSet, ItemMeta, MapForm};
use crate::factory::FactoryError;
use crate::nn::ConvTranspose2d;
use crate::tensor::{ParamSet, Tape, TensorError};

#[derive(Debug, Error)]
pub enum NeckError {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("token count mismatch: {0}")]
    TokenCountMismatch(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<TensorError> for NeckError {
    fn from(e: TensorError) -> Self {
        NeckError::Shape(e.to_string())
    }
}

pub trait Neck {
    fn forward(&self, tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMapSet, NeckError>;
}

fn bad_args(component: &str, detail: impl Into<String>) -> FactoryError {
    FactoryError::BadArgs {
        component: component.into(),
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// select_indices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectIndicesArgs {
    pub indices: Vec<usize>,
}

pub struct SelectIndices {
    pub indices: Vec<usize>,
}

impl SelectIndices {
    fn validate(indices: &[usize], len: usize) -> Result<(), NeckError> {
        if indices.is_empty() {
            return Err(NeckError::IndexOutOfRange("empty index list".into()));
        }
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(NeckError::IndexOutOfRange(format!(
                "indices {indices:?} must be strictly increasing"
            )));
        }
        if *indices.last().unwrap() >= len {
            return Err(NeckError::IndexOutOfRange(format!(
                "index {} out of range for {len} items",
                indices.last().unwrap()
            )));
        }
        Ok(())
    }
}

impl Neck for SelectIndices {
    fn forward(&self, _tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMapSet, NeckError> {
        Self::validate(&self.indices, fms.len())?;
        Ok(FeatureMapSet {
            items: self.indices.iter().map(|&i| fms.items[i]).collect(),
        })
    }
}

pub fn build_select_indices(
    args: &serde_yaml::Value,
    in_meta: &[ItemMeta],
    _params: &mut ParamSet,
    _prefix: &str,
    _rng: &mut ChaCha8Rng,
) -> Result<(Box<dyn Neck>, Vec<ItemMeta>), FactoryError> {
    let args: SelectIndicesArgs = serde_yaml::from_value(args.clone())
        .map_err(|e| bad_args("select_indices", e.to_string()))?;
    SelectIndices::validate(&args.indices, in_meta.len())
        .map_err(|e| bad_args("select_indices", e.to_string()))?;
    let out = args.indices.iter().map(|&i| in_meta[i]).collect();
    Ok((
        Box::new(SelectIndices {
            indices: args.indices,
        }),
        out,
    ))
}

// ---------------------------------------------------------------------------
// reshape_tokens_to_image
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalReduce {
    #[default]
    Mean,
    ConcatChannels,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ReshapeTokensArgs {
    /// Defaults to the grid recorded on each token map.
    pub grid_hw: Option<[usize; 2]>,
    /// Defaults to the frame count recorded on each token map.
    pub effective_time_dim: Option<usize>,
    #[serde(default)]
    pub temporal_reduce: TemporalReduce,
}

pub struct ReshapeTokensToImage {
    pub grid_hw: Option<(usize, usize)>,
    pub effective_time_dim: Option<usize>,
    pub temporal_reduce: TemporalReduce,
}

impl ReshapeTokensToImage {
    fn item_plan(&self, form: MapForm) -> Result<(usize, (usize, usize)), NeckError> {
        let MapForm::Tokens { frames, grid } = form else {
            return Err(NeckError::Shape(
                "reshape_tokens_to_image requires token-form inputs".into(),
            ));
        };
        Ok((
            self.effective_time_dim.unwrap_or(frames),
            self.grid_hw.unwrap_or(grid),
        ))
    }
}

impl Neck for ReshapeTokensToImage {
    fn forward(&self, tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMapSet, NeckError> {
        let mut items = Vec::with_capacity(fms.len());
        for fm in fms.items {
            let (t, (h, w)) = self.item_plan(fm.form)?;
            let s = tape.shape(fm.tensor).to_vec(); // (B, N, d)
            let (b, n, d) = (s[0], s[1], s[2]);
            if n != t * h * w {
                return Err(NeckError::TokenCountMismatch(format!(
                    "{n} tokens != {t} frames x {h}x{w} grid"
                )));
            }
            // Tokens are frame-major, row-major within a frame.
            let x = tape.reshape(fm.tensor, &[b, t, h, w, d])?;
            let x = tape.permute(x, &[0, 1, 4, 2, 3])?; // (B,T,d,h,w)
            let tensor = match self.temporal_reduce {
                TemporalReduce::Mean => tape.mean_axes(x, &[1])?,
                TemporalReduce::ConcatChannels => tape.reshape(x, &[b, t * d, h, w])?,
            };
            items.push(FeatureMap {
                tensor,
                form: MapForm::Grid,
            });
        }
        Ok(FeatureMapSet { items })
    }
}

pub fn build_reshape_tokens(
    args: &serde_yaml::Value,
    in_meta: &[ItemMeta],
    _params: &mut ParamSet,
    _prefix: &str,
    _rng: &mut ChaCha8Rng,
) -> Result<(Box<dyn Neck>, Vec<ItemMeta>), FactoryError> {
    let args: ReshapeTokensArgs = if args.is_null() {
        ReshapeTokensArgs::default()
    } else {
        serde_yaml::from_value(args.clone())
            .map_err(|e| bad_args("reshape_tokens_to_image", e.to_string()))?
    };
    let neck = ReshapeTokensToImage {
        grid_hw: args.grid_hw.map(|g| (g[0], g[1])),
        effective_time_dim: args.effective_time_dim,
        temporal_reduce: args.temporal_reduce,
    };
    let mut out = Vec::with_capacity(in_meta.len());
    for m in in_meta {
        let (t, _) = neck
            .item_plan(m.form)
            .map_err(|e| bad_args("reshape_tokens_to_image", e.to_string()))?;
        let channels = match neck.temporal_reduce {
            TemporalReduce::Mean => m.channels,
            TemporalReduce::ConcatChannels => t * m.channels,
        };
        out.push(ItemMeta {
            form: MapForm::Grid,
            channels,
        });
    }
    Ok((Box::new(neck), out))
}

// ---------------------------------------------------------------------------
// interpolate_to_pyramid
// ---------------------------------------------------------------------------

fn default_scales() -> Vec<f64> {
    vec![4.0, 2.0, 1.0, 0.5]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateArgs {
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
}

impl Default for InterpolateArgs {
    fn default() -> Self {
        Self {
            scales: default_scales(),
        }
    }
}

enum ScaleOp {
    /// Learned transposed conv, kernel == integer scale.
    Up(ConvTranspose2d),
    Identity,
    /// Stride-2 average pooling.
    Half,
}

/// Resizes equal-size grid maps into a pyramid. Upscaling is learned
/// (transposed conv); 1.0 is identity; 0.5 is stride-2 pooling.
pub struct InterpolateToPyramid {
    ops: Vec<ScaleOp>,
}

impl Neck for InterpolateToPyramid {
    fn forward(&self, tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMapSet, NeckError> {
        if fms.len() != self.ops.len() {
            return Err(NeckError::LengthMismatch(format!(
                "{} items vs {} scales",
                fms.len(),
                self.ops.len()
            )));
        }
        let mut first_hw: Option<(usize, usize)> = None;
        for fm in &fms.items {
            if !fm.form.is_grid() {
                return Err(NeckError::Shape(
                    "interpolate_to_pyramid requires grid-form inputs".into(),
                ));
            }
            let s = tape.shape(fm.tensor);
            let hw = (s[2], s[3]);
            match first_hw {
                None => first_hw = Some(hw),
                Some(f) if f != hw => {
                    return Err(NeckError::Shape(format!(
                        "items differ in spatial size: {f:?} vs {hw:?}"
                    )))
                }
                _ => {}
            }
        }
        let mut items = Vec::with_capacity(fms.len());
        for (fm, op) in fms.items.into_iter().zip(&self.ops) {
            let tensor = match op {
                ScaleOp::Up(tc) => tc.forward(tape, fm.tensor)?,
                ScaleOp::Identity => fm.tensor,
                ScaleOp::Half => tape.avg_pool2d(fm.tensor, 2, 2)?,
            };
            items.push(FeatureMap {
                tensor,
                form: MapForm::Grid,
            });
        }
        Ok(FeatureMapSet { items })
    }
}

pub fn build_interpolate_to_pyramid(
    args: &serde_yaml::Value,
    in_meta: &[ItemMeta],
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(Box<dyn Neck>, Vec<ItemMeta>), FactoryError> {
    let args: InterpolateArgs = if args.is_null() {
        InterpolateArgs::default()
    } else {
        serde_yaml::from_value(args.clone())
            .map_err(|e| bad_args("interpolate_to_pyramid", e.to_string()))?
    };
    if args.scales.len() != in_meta.len() {
        return Err(bad_args(
            "interpolate_to_pyramid",
            format!(
                "{} scales vs {} input items",
                args.scales.len(),
                in_meta.len()
            ),
        ));
    }
    let mut ops = Vec::with_capacity(args.scales.len());
    for (i, (&scale, m)) in args.scales.iter().zip(in_meta).enumerate() {
        if !m.form.is_grid() {
            return Err(bad_args(
                "interpolate_to_pyramid",
                "requires grid-form inputs (add reshape_tokens_to_image first)",
            ));
        }
        let op = if scale == 1.0 {
            ScaleOp::Identity
        } else if scale == 0.5 {
            ScaleOp::Half
        } else if scale > 1.0 && scale.fract() == 0.0 {
            ScaleOp::Up(ConvTranspose2d::new(
                params,
                &format!("{prefix}.up.{i}"),
                m.channels,
                m.channels,
                scale as usize,
                rng,
            ))
        } else {
            return Err(bad_args(
                "interpolate_to_pyramid",
                format!("unsupported scale {scale}; use integers > 1, 1, or 0.5"),
            ));
        };
        ops.push(op);
    }
    let out = in_meta.to_vec();
    Ok((Box::new(InterpolateToPyramid { ops }), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;

    fn token_set(tape: &mut Tape, b: usize, t: usize, h: usize, w: usize, d: usize) -> FeatureMapSet {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ArrayD::from_shape_fn(IxDyn(&[b, t * h * w, d]), |_| rng.random_range(-1.0..1.0f32));
        let tensor = tape.input(x);
        FeatureMapSet {
            items: vec![FeatureMap {
                tensor,
                form: MapForm::Tokens {
                    frames: t,
                    grid: (h, w),
                },
            }],
        }
    }

    #[test]
    fn select_preserves_order_and_rejects_bad_indices() {
        let params = ParamSet::new();
        let mut tape = Tape::for_inference(&params);
        let items: Vec<FeatureMap> = (0..12)
            .map(|i| FeatureMap {
                tensor: tape.input(ArrayD::from_elem(IxDyn(&[1, 2, 2]), i as f32)),
                form: MapForm::Grid,
            })
            .collect();
        let fms = FeatureMapSet { items };
        let neck = SelectIndices {
            indices: vec![2, 5, 8, 11],
        };
        let out = neck.forward(&mut tape, fms.clone()).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(tape.value(out.items[0].tensor)[[0, 0, 0]], 2.0);
        assert_eq!(tape.value(out.items[3].tensor)[[0, 0, 0]], 11.0);

        let bad = SelectIndices {
            indices: vec![5, 2],
        };
        assert!(matches!(
            bad.forward(&mut tape, fms.clone()),
            Err(NeckError::IndexOutOfRange(_))
        ));
        let oob = SelectIndices { indices: vec![12] };
        assert!(oob.forward(&mut tape, fms).is_err());
    }

    #[test]
    fn select_single_identity() {
        let params = ParamSet::new();
        let mut tape = Tape::for_inference(&params);
        let fms = FeatureMapSet {
            items: vec![FeatureMap {
                tensor: tape.input(ArrayD::from_elem(IxDyn(&[1, 2, 2]), 3.0f32)),
                form: MapForm::Grid,
            }],
        };
        let neck = SelectIndices { indices: vec![0] };
        let out = neck.forward(&mut tape, fms).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.value(out.items[0].tensor)[[0, 0, 0]], 3.0);
    }

    #[test]
    fn reshape_tokens_shapes() {
        let params = ParamSet::new();
        let mut tape = Tape::for_inference(&params);
        let fms = token_set(&mut tape, 2, 1, 14, 14, 64);
        let neck = ReshapeTokensToImage {
            grid_hw: None,
            effective_time_dim: None,
            temporal_reduce: TemporalReduce::Mean,
        };
        let out = neck.forward(&mut tape, fms).unwrap();
        assert_eq!(tape.shape(out.items[0].tensor), &[2, 64, 14, 14]);
    }

    #[test]
    fn reshape_temporal_mean_and_concat() {
        let params = ParamSet::new();
        let mut tape = Tape::for_inference(&params);
        let fms = token_set(&mut tape, 1, 2, 3, 3, 4);
        let mean = ReshapeTokensToImage {
            grid_hw: None,
            effective_time_dim: None,
            temporal_reduce: TemporalReduce::Mean,
        };
        let out = mean.forward(&mut tape, fms.clone()).unwrap();
        assert_eq!(tape.shape(out.items[0].tensor), &[1, 4, 3, 3]);

        let cat = ReshapeTokensToImage {
            grid_hw: None,
            effective_time_dim: None,
            temporal_reduce: TemporalReduce::ConcatChannels,
        };
        let out = cat.forward(&mut tape, fms).unwrap();
        assert_eq!(tape.shape(out.items[0].tensor), &[1, 8, 3, 3]);
    }

    #[test]
    fn reshape_roundtrip_is_exact_for_single_frame() {
        let params = ParamSet::new();
        let mut tape = Tape::for_inference(&params);
        let fms = token_set(&mut tape, 2, 1, 4, 4, 3);
        let original = tape.value(fms.items[0].tensor).clone();
        let neck = ReshapeTokensToImage {
            grid_hw: None,
            effective_time_dim: None,
            temporal_reduce: TemporalReduce::Mean,
        };
        let out = neck.forward(&mut tape, fms).unwrap();
        // Flatten back: (B,d,h,w) -> (B,h*w,d).
        let g = out.items[0].tensor;
        let r = tape.reshape(g, &[2, 3, 16]).unwrap();
        let back = tape.permute(r, &[0, 2, 1]).unwrap();
        assert_eq!(tape.value(back), &original);
    }

    #[test]
    fn token_count_mismatch_detected() {
        let params = ParamSet::new();
        let mut tape = Tape::for_inference(&params);
        let mut fms = token_set(&mut tape, 1, 1, 4, 4, 3);
        fms.items[0].form = MapForm::Tokens {
            frames: 2,
            grid: (4, 4),
        };
        let neck = ReshapeTokensToImage {
            grid_hw: None,
            effective_time_dim: None,
            temporal_reduce: TemporalReduce::Mean,
        };
        assert!(matches!(
            neck.forward(&mut tape, fms),
            Err(NeckError::TokenCountMismatch(_))
        ));
    }

    #[test]
    fn interpolate_scale_arithmetic() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let meta = vec![
            ItemMeta {
                form: MapForm::Grid,
                channels: 6
            };
            4
        ];
        let (neck, _) = build_interpolate_to_pyramid(
            &serde_yaml::Value::Null,
            &meta,
            &mut params,
            "necks.0",
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::for_inference(&params);
        let items: Vec<FeatureMap> = (0..4)
            .map(|_| FeatureMap {
                tensor: tape.input(ArrayD::zeros(IxDyn(&[1, 6, 14, 14]))),
                form: MapForm::Grid,
            })
            .collect();
        let out = neck.forward(&mut tape, FeatureMapSet { items }).unwrap();
        let sizes: Vec<usize> = out.items.iter().map(|fm| tape.shape(fm.tensor)[2]).collect();
        assert_eq!(sizes, vec![56, 28, 14, 7]);
        for fm in &out.items {
            assert_eq!(tape.shape(fm.tensor)[1], 6);
        }
    }

    #[test]
    fn interpolate_identity_scales_keep_shapes() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let meta = vec![
            ItemMeta {
                form: MapForm::Grid,
                channels: 3
            };
            2
        ];
        let args = serde_yaml::to_value(InterpolateArgs {
            scales: vec![1.0, 1.0],
        })
        .unwrap();
        let (neck, _) =
            build_interpolate_to_pyramid(&args, &meta, &mut params, "necks.0", &mut rng).unwrap();
        let mut tape = Tape::for_inference(&params);
        let items: Vec<FeatureMap> = (0..2)
            .map(|_| FeatureMap {
                tensor: tape.input(ArrayD::zeros(IxDyn(&[1, 3, 5, 5]))),
                form: MapForm::Grid,
            })
            .collect();
        let out = neck.forward(&mut tape, FeatureMapSet { items }).unwrap();
        for fm in &out.items {
            assert_eq!(tape.shape(fm.tensor), &[1, 3, 5, 5]);
        }
    }

    #[test]
    fn interpolate_length_mismatch() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let meta = vec![
            ItemMeta {
                form: MapForm::Grid,
                channels: 3
            };
            3
        ];
        assert!(build_interpolate_to_pyramid(
            &serde_yaml::Value::Null,
            &meta,
            &mut params,
            "necks.0",
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn interpolate_upscale_weights_receive_gradients() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let meta = vec![ItemMeta {
            form: MapForm::Grid,
            channels: 2,
        }];
        let args = serde_yaml::to_value(InterpolateArgs { scales: vec![2.0] }).unwrap();
        let (neck, _) =
            build_interpolate_to_pyramid(&args, &meta, &mut params, "necks.0", &mut rng).unwrap();
        let mut tape = Tape::for_training(&params, 0);
        let x = tape.input(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 1.0f32));
        let out = neck
            .forward(
                &mut tape,
                FeatureMapSet {
                    items: vec![FeatureMap {
                        tensor: x,
                        form: MapForm::Grid,
                    }],
                },
            )
            .unwrap();
        let y = out.items[0].tensor;
        let flat = tape.reshape(y, &[1, 2 * 6 * 6]).unwrap();
        let m = tape.mean_axes(flat, &[1]).unwrap();
        let loss = tape.reshape(m, &[]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let wid = params.id_of("necks.0.up.0.weight").unwrap();
        let gnorm: f32 = grads.get(wid).unwrap().iter().map(|v| v * v).sum();
        assert!(gnorm > 0.0);
    }

    #[test]
    fn pipeline_composition_is_associative_in_effect() {
        // Applying necks one-by-one equals applying them as one pipeline.
        let params = ParamSet::new();
        let mut tape = Tape::for_inference(&params);
        let fms = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let items: Vec<FeatureMap> = (0..3)
                .map(|_| FeatureMap {
                    tensor: tape.input(ArrayD::from_shape_fn(IxDyn(&[1, 4 * 4, 2]), |_| {
                        rng.random_range(-1.0..1.0f32)
                    })),
                    form: MapForm::Tokens {
                        frames: 1,
                        grid: (4, 4),
                    },
                })
                .collect();
            FeatureMapSet { items }
        };
        let select = SelectIndices {
            indices: vec![0, 2],
        };
        let reshape = ReshapeTokensToImage {
            grid_hw: None,
            effective_time_dim: None,
            temporal_reduce: TemporalReduce::Mean,
        };
        // One-by-one.
        let step1 = select.forward(&mut tape, fms.clone()).unwrap();
        let step2 = reshape.forward(&mut tape, step1).unwrap();
        // As a pipeline loop.
        let necks: Vec<&dyn Neck> = vec![&select, &reshape];
        let mut cur = fms;
        for n in necks {
            cur = n.forward(&mut tape, cur).unwrap();
        }
        assert_eq!(cur.len(), step2.len());
        for (a, b) in cur.items.iter().zip(step2.items.iter()) {
            assert_eq!(tape.value(a.tensor), tape.value(b.tensor));
        }
    }
}
