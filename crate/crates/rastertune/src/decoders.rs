//! Task-side model components: pyramid-fusion decoder, plain convolutional
//! decoder, identity decoder, and per-task heads.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbones::{FeatureMap, FeatureMapSet, ItemMeta, MapForm};
use crate::factory::FactoryError;
use crate::nn::{Conv2d, Init, Linear};
use crate::tensor::{ParamSet, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("pyramid shape error: {0}")]
    PyramidShapeError(String),
    #[error("no grid-form input: {0}")]
    NoGridInput(String),
    #[error("head/input kind mismatch: {0}")]
    KindMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<TensorError> for DecoderError {
    fn from(e: TensorError) -> Self {
        DecoderError::Shape(e.to_string())
    }
}

pub trait Decoder {
    fn forward(&self, tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMap, DecoderError>;
    fn out_meta(&self) -> ItemMeta;
}

fn bad_args(component: &str, detail: impl Into<String>) -> FactoryError {
    FactoryError::BadArgs {
        component: component.into(),
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// pyramid_fusion (UPerNet-style)
// ---------------------------------------------------------------------------

const POOL_SIZES: [usize; 4] = [1, 2, 3, 6];

/// Fuses a 4-level grid pyramid: multi-scale pooling on the deepest map,
/// lateral 1x1 convs, top-down upsample-add, then concat + 3x3 fuse at the
/// finest resolution.
pub struct PyramidFusion {
    channels: usize,
    psp_convs: Vec<Conv2d>,
    psp_fuse: Conv2d,
    laterals: Vec<Conv2d>,
    fuse: Conv2d,
}

impl PyramidFusion {
    pub fn build(
        in_meta: &[ItemMeta],
        channels: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FactoryError> {
        if in_meta.len() != 4 {
            return Err(bad_args(
                "pyramid_fusion",
                format!("requires exactly 4 inputs, got {}", in_meta.len()),
            ));
        }
        if in_meta.iter().any(|m| !m.form.is_grid()) {
            return Err(bad_args("pyramid_fusion", "requires grid-form inputs"));
        }
        if channels == 0 {
            return Err(bad_args("pyramid_fusion", "channels must be positive"));
        }
        // Item order is finest-first after reordering at forward time; build
        // laterals for the three finer levels, PSP for the deepest.
        let deep_c = in_meta[3].channels;
        let psp_convs = POOL_SIZES
            .iter()
            .map(|&p| {
                Conv2d::new(
                    params,
                    &format!("{prefix}.psp.{p}"),
                    deep_c,
                    channels,
                    1,
                    1,
                    0,
                    Init::He,
                    rng,
                )
            })
            .collect();
        let psp_fuse = Conv2d::new(
            params,
            &format!("{prefix}.psp_fuse"),
            deep_c + POOL_SIZES.len() * channels,
            channels,
            3,
            1,
            1,
            Init::He,
            rng,
        );
        let laterals = (0..3)
            .map(|i| {
                Conv2d::new(
                    params,
                    &format!("{prefix}.lateral.{i}"),
                    in_meta[i].channels,
                    channels,
                    1,
                    1,
                    0,
                    Init::He,
                    rng,
                )
            })
            .collect();
        let fuse = Conv2d::new(
            params,
            &format!("{prefix}.fuse"),
            4 * channels,
            channels,
            3,
            1,
            1,
            Init::He,
            rng,
        );
        Ok(Self {
            channels,
            psp_convs,
            psp_fuse,
            laterals,
            fuse,
        })
    }
}

impl Decoder for PyramidFusion {
    fn forward(&self, tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMap, DecoderError> {
        if fms.len() != 4 {
            return Err(DecoderError::PyramidShapeError(format!(
                "expected 4 inputs, got {}",
                fms.len()
            )));
        }
        if fms.items.iter().any(|fm| !fm.form.is_grid()) {
            return Err(DecoderError::PyramidShapeError(
                "all inputs must be grid-form".into(),
            ));
        }
        // Reorder finest-first, then validate the strict factor-2 chain.
        let mut items = fms.items;
        items.sort_by_key(|fm| std::cmp::Reverse(tape.shape(fm.tensor)[2]));
        let hw: Vec<(usize, usize)> = items
            .iter()
            .map(|fm| {
                let s = tape.shape(fm.tensor);
                (s[2], s[3])
            })
            .collect();
        for k in 0..3 {
            if hw[k].0 != hw[k + 1].0 * 2 || hw[k].1 != hw[k + 1].1 * 2 {
                return Err(DecoderError::PyramidShapeError(format!(
                    "spatial sizes {hw:?} must halve between consecutive levels"
                )));
            }
        }

        // Multi-scale pooling block on the deepest map.
        let deep = items[3].tensor;
        let (dh, dw) = hw[3];
        let mut branches = vec![deep];
        for (conv, &p) in self.psp_convs.iter().zip(POOL_SIZES.iter()) {
            let pooled = tape.adaptive_avg_pool2d(deep, p, p)?;
            let projected = conv.forward(tape, pooled)?;
            let projected = tape.relu(projected);
            branches.push(tape.bilinear_resize(projected, dh, dw)?);
        }
        let cat = tape.concat(1, &branches)?;
        let psp_out = self.psp_fuse.forward(tape, cat)?;
        let psp_out = tape.relu(psp_out);

        // Lateral projections + top-down upsample-add.
        let mut fused = vec![psp_out];
        for level in (0..3).rev() {
            let lateral = self.laterals[level].forward(tape, items[level].tensor)?;
            let up = tape.bilinear_resize(*fused.last().unwrap(), hw[level].0, hw[level].1)?;
            fused.push(tape.add(lateral, up)?);
        }
        // fused = [deepest, level2, level1, level0]; resize everything to the
        // finest size, concat, fuse.
        let (fh, fw) = hw[0];
        let mut resized = Vec::with_capacity(4);
        for t in fused.into_iter().rev() {
            resized.push(tape.bilinear_resize(t, fh, fw)?);
        }
        let cat = tape.concat(1, &resized)?;
        let out = self.fuse.forward(tape, cat)?;
        let out = tape.relu(out);
        Ok(FeatureMap {
            tensor: out,
            form: MapForm::Grid,
        })
    }

    fn out_meta(&self) -> ItemMeta {
        ItemMeta {
            form: MapForm::Grid,
            channels: self.channels,
        }
    }
}

// ---------------------------------------------------------------------------
// fcn
// ---------------------------------------------------------------------------

/// Stacked 3x3 conv blocks over the last input item; zero convs degenerates
/// to a single 1x1 projection.
pub struct Fcn {
    channels: usize,
    convs: Vec<Conv2d>,
}

impl Fcn {
    pub fn build(
        in_meta: &[ItemMeta],
        channels: usize,
        num_convs: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FactoryError> {
        let last = in_meta
            .last()
            .ok_or_else(|| bad_args("fcn", "no input items"))?;
        if !last.form.is_grid() {
            return Err(bad_args(
                "fcn",
                "last input item must be grid-form (add reshape_tokens_to_image first)",
            ));
        }
        if channels == 0 {
            return Err(bad_args("fcn", "channels must be positive"));
        }
        let mut convs = Vec::new();
        if num_convs == 0 {
            convs.push(Conv2d::new(
                params,
                &format!("{prefix}.proj"),
                last.channels,
                channels,
                1,
                1,
                0,
                Init::He,
                rng,
            ));
        } else {
            let mut c_in = last.channels;
            for i in 0..num_convs {
                convs.push(Conv2d::new(
                    params,
                    &format!("{prefix}.convs.{i}"),
                    c_in,
                    channels,
                    3,
                    1,
                    1,
                    Init::He,
                    rng,
                ));
                c_in = channels;
            }
        }
        Ok(Self { channels, convs })
    }
}

impl Decoder for Fcn {
    fn forward(&self, tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMap, DecoderError> {
        let last = fms
            .items
            .last()
            .ok_or_else(|| DecoderError::NoGridInput("empty feature set".into()))?;
        if !last.form.is_grid() {
            return Err(DecoderError::NoGridInput(
                "last item is token-form".into(),
            ));
        }
        let mut x = last.tensor;
        for conv in &self.convs {
            x = conv.forward(tape, x)?;
            x = tape.relu(x);
        }
        Ok(FeatureMap {
            tensor: x,
            form: MapForm::Grid,
        })
    }

    fn out_meta(&self) -> ItemMeta {
        ItemMeta {
            form: MapForm::Grid,
            channels: self.channels,
        }
    }
}

// ---------------------------------------------------------------------------
// identity
// ---------------------------------------------------------------------------

pub struct IdentityDecoder {
    meta: ItemMeta,
}

impl IdentityDecoder {
    pub fn build(in_meta: &[ItemMeta]) -> Result<Self, FactoryError> {
        if in_meta.len() != 1 {
            return Err(bad_args(
                "identity",
                format!("requires exactly 1 input, got {}", in_meta.len()),
            ));
        }
        Ok(Self { meta: in_meta[0] })
    }
}

impl Decoder for IdentityDecoder {
    fn forward(&self, _tape: &mut Tape, fms: FeatureMapSet) -> Result<FeatureMap, DecoderError> {
        if fms.len() != 1 {
            return Err(DecoderError::Shape(format!(
                "identity decoder takes exactly 1 input, got {}",
                fms.len()
            )));
        }
        Ok(fms.items[0])
    }

    fn out_meta(&self) -> ItemMeta {
        self.meta
    }
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Segmentation,
    Regression,
    Classification,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Segmentation => "segmentation",
            HeadKind::Regression => "regression",
            HeadKind::Classification => "classification",
        }
    }
}

enum HeadProj {
    Conv(Conv2d),
    Lin(Linear),
}

/// Final projection. Segmentation and regression expect a grid input and
/// bilinearly upsample the logits to the requested target size; classification
/// pools (spatially or over tokens) and projects.
pub struct Head {
    kind: HeadKind,
    out_channels: usize,
    dropout: f32,
    proj: HeadProj,
}

impl Head {
    pub fn build(
        kind: HeadKind,
        in_meta: ItemMeta,
        num_classes: Option<usize>,
        dropout: f64,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FactoryError> {
        let out_channels = match kind {
            HeadKind::Segmentation | HeadKind::Classification => {
                let k = num_classes.ok_or_else(|| {
                    bad_args(kind.name(), "num_classes is required for this task kind")
                })?;
                if k < 2 {
                    return Err(bad_args(kind.name(), format!("num_classes {k} must be >= 2")));
                }
                k
            }
            HeadKind::Regression => 1,
        };
        if !(0.0..1.0).contains(&dropout) {
            return Err(bad_args(kind.name(), format!("dropout {dropout} must be in [0,1)")));
        }
        let proj = match kind {
            HeadKind::Segmentation | HeadKind::Regression => HeadProj::Conv(Conv2d::new(
                params,
                &format!("{prefix}.proj"),
                in_meta.channels,
                out_channels,
                1,
                1,
                0,
                Init::He,
                rng,
            )),
            HeadKind::Classification => HeadProj::Lin(Linear::new(
                params,
                &format!("{prefix}.proj"),
                in_meta.channels,
                out_channels,
                Init::TruncNormal(0.02),
                rng,
            )),
        };
        Ok(Self {
            kind,
            out_channels,
            dropout: dropout as f32,
            proj,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        fm: FeatureMap,
        target_hw: (usize, usize),
    ) -> Result<Tensor, DecoderError> {
        match self.kind {
            HeadKind::Segmentation | HeadKind::Regression => {
                if !fm.form.is_grid() {
                    return Err(DecoderError::KindMismatch(format!(
                        "{} head needs a grid-form decoder output",
                        self.kind.name()
                    )));
                }
                let x = tape.dropout(fm.tensor, self.dropout);
                let HeadProj::Conv(conv) = &self.proj else {
                    unreachable!("pixel-wise heads use conv projections")
                };
                let logits = conv.forward(tape, x)?;
                Ok(tape.bilinear_resize(logits, target_hw.0, target_hw.1)?)
            }
            HeadKind::Classification => {
                let pooled = match fm.form {
                    MapForm::Grid => tape.mean_axes(fm.tensor, &[2, 3])?,
                    MapForm::Tokens { .. } => tape.mean_axes(fm.tensor, &[1])?,
                };
                let pooled = tape.dropout(pooled, self.dropout);
                let HeadProj::Lin(lin) = &self.proj else {
                    unreachable!("classification heads use linear projections")
                };
                Ok(lin.forward(tape, pooled)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn grid_meta(c: usize) -> ItemMeta {
        ItemMeta {
            form: MapForm::Grid,
            channels: c,
        }
    }

    fn rand_input(tape: &mut Tape, shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.input(ArrayD::from_shape_fn(IxDyn(shape), |_| {
            rng.random_range(-1.0..1.0f32)
        }))
    }

    fn pyramid_inputs(tape: &mut Tape, c: usize, sizes: &[usize]) -> FeatureMapSet {
        let items = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| FeatureMap {
                tensor: rand_input(tape, &[1, c, s, s], 10 + i as u64),
                form: MapForm::Grid,
            })
            .collect();
        FeatureMapSet { items }
    }

    #[test]
    fn pyramid_fusion_contract_shape() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let meta = vec![grid_meta(8); 4];
        let dec = PyramidFusion::build(&meta, 16, &mut params, "decoder", &mut rng).unwrap();
        let mut tape = Tape::for_inference(&params);
        let fms = pyramid_inputs(&mut tape, 8, &[56, 28, 14, 7]);
        let out = dec.forward(&mut tape, fms).unwrap();
        assert_eq!(tape.shape(out.tensor), &[1, 16, 56, 56]);
    }

    #[test]
    fn pyramid_fusion_arity_error() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let meta = vec![grid_meta(8); 4];
        let dec = PyramidFusion::build(&meta, 16, &mut params, "decoder", &mut rng).unwrap();
        let mut tape = Tape::for_inference(&params);
        let fms = pyramid_inputs(&mut tape, 8, &[28, 14, 7]);
        assert!(matches!(
            dec.forward(&mut tape, fms),
            Err(DecoderError::PyramidShapeError(_))
        ));
    }

    #[test]
    fn pyramid_fusion_depends_on_every_input() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let meta = vec![grid_meta(4); 4];
        let dec = PyramidFusion::build(&meta, 8, &mut params, "decoder", &mut rng).unwrap();
        let mut tape = Tape::for_inference(&params);
        let fms = pyramid_inputs(&mut tape, 4, &[16, 8, 4, 2]);
        let base = tape.value(dec.forward(&mut tape, fms.clone()).unwrap().tensor).clone();
        for zeroed in 0..4 {
            let mut items = fms.items.clone();
            let shape = tape.shape(items[zeroed].tensor).to_vec();
            items[zeroed].tensor = tape.input(ArrayD::zeros(IxDyn(&shape)));
            let out = dec
                .forward(&mut tape, FeatureMapSet { items })
                .unwrap();
            let diff = (tape.value(out.tensor) - &base)
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(diff > 0.0, "output ignores input {zeroed}");
        }
    }

    #[test]
    fn fcn_shapes_and_grad_flow() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Fcn::build(&[grid_meta(32)], 64, 2, &mut params, "decoder", &mut rng).unwrap();
        let mut tape = Tape::for_training(&params, 0);
        let fms = FeatureMapSet {
            items: vec![FeatureMap {
                tensor: rand_input(&mut tape, &[1, 32, 16, 16], 3),
                form: MapForm::Grid,
            }],
        };
        let out = dec.forward(&mut tape, fms).unwrap();
        assert_eq!(tape.shape(out.tensor), &[1, 64, 16, 16]);
        let flat = tape.reshape(out.tensor, &[1, 64 * 256]).unwrap();
        let m = tape.mean_axes(flat, &[1]).unwrap();
        let loss = tape.reshape(m, &[]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for i in 0..2 {
            let wid = params.id_of(&format!("decoder.convs.{i}.weight")).unwrap();
            assert!(grads.get(wid).is_some(), "conv {i} got no gradient");
        }
    }

    #[test]
    fn fcn_zero_convs_is_single_projection() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Fcn::build(&[grid_meta(8)], 16, 0, &mut params, "decoder", &mut rng).unwrap();
        assert!(params.id_of("decoder.proj.weight").is_some());
        let mut tape = Tape::for_inference(&params);
        let fms = FeatureMapSet {
            items: vec![FeatureMap {
                tensor: rand_input(&mut tape, &[2, 8, 4, 4], 1),
                form: MapForm::Grid,
            }],
        };
        let out = dec.forward(&mut tape, fms).unwrap();
        assert_eq!(tape.shape(out.tensor), &[2, 16, 4, 4]);
    }

    #[test]
    fn fcn_rejects_token_input() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Fcn::build(&[grid_meta(8)], 16, 1, &mut params, "decoder", &mut rng).unwrap();
        let mut tape = Tape::for_inference(&params);
        let fms = FeatureMapSet {
            items: vec![FeatureMap {
                tensor: rand_input(&mut tape, &[1, 16, 8], 1),
                form: MapForm::Tokens {
                    frames: 1,
                    grid: (4, 4),
                },
            }],
        };
        assert!(matches!(
            dec.forward(&mut tape, fms),
            Err(DecoderError::NoGridInput(_))
        ));
    }

    #[test]
    fn seg_head_upsamples_to_target() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::build(
            HeadKind::Segmentation,
            grid_meta(128),
            Some(2),
            0.0,
            &mut params,
            "head",
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::for_inference(&params);
        let fm = FeatureMap {
            tensor: rand_input(&mut tape, &[1, 128, 56, 56], 2),
            form: MapForm::Grid,
        };
        let out = head.forward(&mut tape, fm, (512, 512)).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 512, 512]);
    }

    #[test]
    fn regression_head_single_channel() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::build(
            HeadKind::Regression,
            grid_meta(16),
            None,
            0.0,
            &mut params,
            "head",
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::for_inference(&params);
        let fm = FeatureMap {
            tensor: rand_input(&mut tape, &[2, 16, 8, 8], 2),
            form: MapForm::Grid,
        };
        let out = head.forward(&mut tape, fm, (32, 32)).unwrap();
        assert_eq!(tape.shape(out), &[2, 1, 32, 32]);
    }

    #[test]
    fn classification_head_pools_tokens_and_grids() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::build(
            HeadKind::Classification,
            grid_meta(24),
            Some(5),
            0.0,
            &mut params,
            "head",
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::for_inference(&params);
        let tok = FeatureMap {
            tensor: rand_input(&mut tape, &[3, 10, 24], 4),
            form: MapForm::Tokens {
                frames: 1,
                grid: (2, 5),
            },
        };
        assert_eq!(tape.shape(head.forward(&mut tape, tok, (0, 0)).unwrap()), &[3, 5]);
        let grid = FeatureMap {
            tensor: rand_input(&mut tape, &[3, 24, 4, 4], 5),
            form: MapForm::Grid,
        };
        assert_eq!(tape.shape(head.forward(&mut tape, grid, (0, 0)).unwrap()), &[3, 5]);
    }

    #[test]
    fn seg_head_rejects_token_input() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::build(
            HeadKind::Segmentation,
            grid_meta(8),
            Some(2),
            0.0,
            &mut params,
            "head",
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::for_inference(&params);
        let tok = FeatureMap {
            tensor: rand_input(&mut tape, &[1, 4, 8], 6),
            form: MapForm::Tokens {
                frames: 1,
                grid: (2, 2),
            },
        };
        assert!(matches!(
            head.forward(&mut tape, tok, (8, 8)),
            Err(DecoderError::KindMismatch(_))
        ));
    }

    #[test]
    fn softmax_over_seg_logits_sums_to_one() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::build(
            HeadKind::Segmentation,
            grid_meta(8),
            Some(3),
            0.0,
            &mut params,
            "head",
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::for_inference(&params);
        let fm = FeatureMap {
            tensor: rand_input(&mut tape, &[1, 8, 4, 4], 7),
            form: MapForm::Grid,
        };
        let logits = head.forward(&mut tape, fm, (8, 8)).unwrap();
        // softmax over the class axis
        let perm = tape.permute(logits, &[0, 2, 3, 1]).unwrap();
        let sm = tape.softmax_last(perm);
        let v = tape.value(sm);
        for row in v.rows() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
