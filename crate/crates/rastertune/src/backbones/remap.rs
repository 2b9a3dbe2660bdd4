//! Patch-embedding channel surgery: keep pretrained weights for matching
//! bands, randomly initialize unseen ones.
//!
//! Unseen-band slices are drawn from a zero-mean normal whose std matches the
//! empirical std of the copied slices (0.02 when nothing matches). Each band's
//! slice is seeded from (rng_seed, band name), so the result is deterministic
//! and permuting the target list permutes the output slices identically.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RemapError {
    #[error("duplicate band {0:?} in band list")]
    DuplicateBand(String),
    #[error("target band list is empty")]
    EmptyTargetBands,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn check_unique(bands: &[String]) -> Result<(), RemapError> {
    let mut seen = std::collections::BTreeSet::new();
    for b in bands {
        if !seen.insert(b) {
            return Err(RemapError::DuplicateBand(b.clone()));
        }
    }
    Ok(())
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const FALLBACK_STD: f32 = 0.02;

/// `pretrained` has shape (d, C_pre, p, p) with `pre_bands.len() == C_pre`.
/// Returns (d, C_new, p, p) ordered by `target_bands`.
pub fn remap_patch_embedding(
    pretrained: &ArrayD<f32>,
    pre_bands: &[String],
    target_bands: &[String],
    rng_seed: u64,
) -> Result<ArrayD<f32>, RemapError> {
    if target_bands.is_empty() {
        return Err(RemapError::EmptyTargetBands);
    }
    check_unique(pre_bands)?;
    check_unique(target_bands)?;
    let shape = pretrained.shape();
    if shape.len() != 4 {
        return Err(RemapError::ShapeMismatch(format!(
            "patch embedding must be rank 4, got {shape:?}"
        )));
    }
    let (d, c_pre, ph, pw) = (shape[0], shape[1], shape[2], shape[3]);
    if c_pre != pre_bands.len() {
        return Err(RemapError::ShapeMismatch(format!(
            "{} pre bands vs {} weight channels",
            pre_bands.len(),
            c_pre
        )));
    }

    let pre_index = |band: &str| pre_bands.iter().position(|b| b == band);

    // Empirical std over every copied value (population, about the mean).
    let copied: Vec<f32> = target_bands
        .iter()
        .filter_map(|b| pre_index(b))
        .flat_map(|j| {
            (0..d).flat_map(move |di| {
                (0..ph).flat_map(move |y| (0..pw).map(move |x| (di, y, x)))
            })
            .map(move |(di, y, x)| pretrained[[di, j, y, x]])
        })
        .collect();
    let std = if copied.is_empty() {
        FALLBACK_STD
    } else {
        let mean = copied.iter().map(|&v| v as f64).sum::<f64>() / copied.len() as f64;
        let var = copied
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / copied.len() as f64;
        var.sqrt() as f32
    };

    let mut out = ArrayD::<f32>::zeros(IxDyn(&[d, target_bands.len(), ph, pw]));
    for (j_new, band) in target_bands.iter().enumerate() {
        match pre_index(band) {
            Some(j_pre) => {
                for di in 0..d {
                    for y in 0..ph {
                        for x in 0..pw {
                            out[[di, j_new, y, x]] = pretrained[[di, j_pre, y, x]];
                        }
                    }
                }
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ fnv1a64(band));
                let dist = Normal::new(0.0f32, std.max(f32::MIN_POSITIVE))
                    .expect("std is finite and positive");
                for di in 0..d {
                    for y in 0..ph {
                        for x in 0..pw {
                            out[[di, j_new, y, x]] = dist.sample(&mut rng);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
