//! Small parameterized layers over the tape engine. Construction order fixes
//! the RNG draw order, so identical seeds give identical weights.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{init, ParamId, ParamSet, Result, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Truncated normal with the given std.
    TruncNormal(f32),
    /// He-style: std = sqrt(2 / fan_in).
    He,
}

fn weight(shape: &[usize], fan_in: usize, init: Init, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    match init {
        Init::TruncNormal(std) => init::trunc_normal(shape, std, rng),
        Init::He => init::he_normal(shape, fan_in, rng),
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        path: &str,
        d_in: usize,
        d_out: usize,
        init_kind: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{path}.weight"),
            weight(&[d_in, d_out], d_in, init_kind, rng),
        );
        let b = params.add(format!("{path}.bias"), init::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, Some(b))
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        path: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_kind: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{path}.weight"),
            weight(&[c_out, c_in, k, k], c_in * k * k, init_kind, rng),
        );
        let b = params.add(format!("{path}.bias"), init::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed conv with kernel == stride: learned non-overlapping upsampling.
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl ConvTranspose2d {
    pub fn new(
        params: &mut ParamSet,
        path: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{path}.weight"),
            init::he_normal(&[c_in, c_out, k, k], c_in, rng),
        );
        let b = params.add(format!("{path}.bias"), init::zeros(&[c_out]));
        Self { w, b, k }
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv_transpose2d_blocky(x, w, Some(b), self.k)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, path: &str, d: usize) -> Self {
        let gamma = params.add(format!("{path}.weight"), ArrayD::ones(ndarray::IxDyn(&[d])));
        let beta = params.add(format!("{path}.bias"), init::zeros(&[d]));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}
