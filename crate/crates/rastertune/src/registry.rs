//! Named, namespaced component registries.
//!
//! One [`RegistrySet`] exists per component kind. A set holds registries in
//! priority order; the first underscore of a qualified name selects a
//! registry by namespace, and bare names search the set in order. Built-in
//! components are registered eagerly from a static manifest and frozen.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbones::{self, Backbone, ItemMeta};
use crate::decoders::{self, Decoder, Fcn, Head, HeadKind, IdentityDecoder, PyramidFusion};
use crate::factory::{BuildCtx, FactoryError};
use crate::necks::{self, Neck};
use crate::tensor::ParamSet;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("component {0:?} is already registered")]
    DuplicateName(String),
    #[error("invalid component name {name:?}: {reason}")]
    InvalidName { name: String, reason: String },
    #[error("no component named {name:?}{}", suggestion_text(.suggestions))]
    NotFound {
        name: String,
        suggestions: Vec<String>,
    },
    #[error("name {name:?} is ambiguous: {detail}")]
    AmbiguousNamespace { name: String, detail: String },
}

fn suggestion_text(suggestions: &[String]) -> String {
    if suggestions.is_empty() {
        String::new()
    } else {
        format!(" (did you mean {}?)", suggestions.join(", "))
    }
}

pub struct Entry<T> {
    pub summary: &'static str,
    pub payload: T,
}

pub struct Registry<T> {
    namespace: Option<String>,
    entries: std::collections::BTreeMap<String, Entry<T>>,
}

impl<T> Registry<T> {
    pub fn new(namespace: Option<&str>) -> Self {
        Self {
            namespace: namespace.map(str::to_string),
            entries: Default::default(),
        }
    }

    pub fn namespace(&self) -> Option<&str> {
        self.namespace.as_deref()
    }
}

pub struct RegistrySet<T> {
    registries: Vec<Registry<T>>,
}

impl<T> Default for RegistrySet<T> {
    fn default() -> Self {
        Self {
            registries: Vec::new(),
        }
    }
}

impl<T> RegistrySet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a registry; earlier registries win bare-name lookups.
    pub fn push_registry(&mut self, registry: Registry<T>) {
        self.registries.push(registry);
    }

    pub fn register(
        &mut self,
        registry_idx: usize,
        name: &str,
        summary: &'static str,
        payload: T,
    ) -> Result<(), RegistryError> {
        if name.is_empty() {
            return Err(RegistryError::InvalidName {
                name: name.into(),
                reason: "empty name".into(),
            });
        }
        if let Some((prefix, _)) = name.split_once('_') {
            if self
                .registries
                .iter()
                .any(|r| r.namespace.as_deref() == Some(prefix))
            {
                return Err(RegistryError::InvalidName {
                    name: name.into(),
                    reason: format!("prefix {prefix:?} collides with a registry namespace"),
                });
            }
        }
        let reg = &mut self.registries[registry_idx];
        if reg.entries.contains_key(name) {
            return Err(RegistryError::DuplicateName(name.into()));
        }
        reg.entries.insert(name.into(), Entry { summary, payload });
        Ok(())
    }

    /// Resolves `qualified`: "ns_name" dispatches to the registry whose
    /// namespace is "ns" (never falling through); bare names search
    /// registries in priority order.
    pub fn resolve(&self, qualified: &str) -> Result<&Entry<T>, RegistryError> {
        if qualified.is_empty() {
            return Err(RegistryError::NotFound {
                name: qualified.into(),
                suggestions: vec![],
            });
        }
        if let Some((ns, rest)) = qualified.split_once('_') {
            let ns_reg = self
                .registries
                .iter()
                .find(|r| r.namespace.as_deref() == Some(ns));
            if let Some(reg) = ns_reg {
                let bare_hit = self
                    .registries
                    .iter()
                    .any(|r| r.entries.contains_key(qualified));
                if bare_hit {
                    return Err(RegistryError::AmbiguousNamespace {
                        name: qualified.into(),
                        detail: format!(
                            "matches both namespace {ns:?} and a bare component name"
                        ),
                    });
                }
                return reg.entries.get(rest).ok_or_else(|| RegistryError::NotFound {
                    name: qualified.into(),
                    suggestions: self.suggest(rest),
                });
            }
        }
        for reg in &self.registries {
            if let Some(e) = reg.entries.get(qualified) {
                return Ok(e);
            }
        }
        Err(RegistryError::NotFound {
            name: qualified.into(),
            suggestions: self.suggest(qualified),
        })
    }

    /// All registered names, sorted, without namespace prefixes.
    pub fn list(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .registries
            .iter()
            .flat_map(|r| r.entries.keys())
            .collect();
        set.into_iter().cloned().collect()
    }

    fn suggest(&self, name: &str) -> Vec<String> {
        let mut scored: Vec<(usize, String)> = self
            .list()
            .into_iter()
            .map(|n| (levenshtein(name, &n), n))
            .filter(|(d, n)| *d <= 2.max(n.len() / 3))
            .collect();
        scored.sort();
        scored.into_iter().take(3).map(|(_, n)| n).collect()
    }
}

pub(crate) fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// ---------------------------------------------------------------------------
// Built-in manifest
// ---------------------------------------------------------------------------

pub type BackboneBuildFn = fn(
    &serde_yaml::Value,
    &BuildCtx,
    &mut ParamSet,
    &str,
    &mut ChaCha8Rng,
) -> Result<Box<dyn Backbone>, FactoryError>;

pub type NeckBuildFn = fn(
    &serde_yaml::Value,
    &[ItemMeta],
    &mut ParamSet,
    &str,
    &mut ChaCha8Rng,
) -> Result<(Box<dyn Neck>, Vec<ItemMeta>), FactoryError>;

/// (channels, num_convs) resolved from the decoder config section.
pub struct DecoderBuildSpec {
    pub channels: usize,
    pub num_convs: usize,
}

pub type DecoderBuildFn = fn(
    &DecoderBuildSpec,
    &[ItemMeta],
    &mut ParamSet,
    &str,
    &mut ChaCha8Rng,
) -> Result<Box<dyn Decoder>, FactoryError>;

pub struct HeadBuildSpec {
    pub num_classes: Option<usize>,
    pub dropout: f64,
}

pub type HeadBuildFn = fn(
    &HeadBuildSpec,
    ItemMeta,
    &mut ParamSet,
    &str,
    &mut ChaCha8Rng,
) -> Result<Head, FactoryError>;

pub struct Registries {
    pub backbones: RegistrySet<BackboneBuildFn>,
    pub necks: RegistrySet<NeckBuildFn>,
    pub decoders: RegistrySet<DecoderBuildFn>,
    pub heads: RegistrySet<HeadBuildFn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Backbone,
    Neck,
    Decoder,
    Head,
}

impl Registries {
    pub fn list(&self, kind: ComponentKind) -> Vec<String> {
        match kind {
            ComponentKind::Backbone => self.backbones.list(),
            ComponentKind::Neck => self.necks.list(),
            ComponentKind::Decoder => self.decoders.list(),
            ComponentKind::Head => self.heads.list(),
        }
    }
}

fn build_pyramid_fusion(
    spec: &DecoderBuildSpec,
    in_meta: &[ItemMeta],
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Decoder>, FactoryError> {
    Ok(Box::new(PyramidFusion::build(
        in_meta,
        spec.channels,
        params,
        prefix,
        rng,
    )?))
}

fn build_fcn(
    spec: &DecoderBuildSpec,
    in_meta: &[ItemMeta],
    params: &mut ParamSet,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Decoder>, FactoryError> {
    Ok(Box::new(Fcn::build(
        in_meta,
        spec.channels,
        spec.num_convs,
        params,
        prefix,
        rng,
    )?))
}

fn build_identity(
    _spec: &DecoderBuildSpec,
    in_meta: &[ItemMeta],
    _params: &mut ParamSet,
    _prefix: &str,
    _rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Decoder>, FactoryError> {
    Ok(Box::new(IdentityDecoder::build(in_meta)?))
}

fn head_builder(kind: HeadKind) -> HeadBuildFn {
    match kind {
        HeadKind::Segmentation => |spec, meta, params, prefix, rng| {
            Head::build(
                HeadKind::Segmentation,
                meta,
                spec.num_classes,
                spec.dropout,
                params,
                prefix,
                rng,
            )
        },
        HeadKind::Regression => |spec, meta, params, prefix, rng| {
            Head::build(
                HeadKind::Regression,
                meta,
                spec.num_classes,
                spec.dropout,
                params,
                prefix,
                rng,
            )
        },
        HeadKind::Classification => |spec, meta, params, prefix, rng| {
            Head::build(
                HeadKind::Classification,
                meta,
                spec.num_classes,
                spec.dropout,
                params,
                prefix,
                rng,
            )
        },
    }
}

fn build_manifest() -> Registries {
    let mut backbones = RegistrySet::new();
    backbones.push_registry(Registry::new(Some("toy")));
    backbones
        .register(
            0,
            "toyvit",
            "mini vision transformer with multi-band, multi-frame patch embedding",
            backbones::build_toyvit as BackboneBuildFn,
        )
        .expect("manifest");
    backbones
        .register(
            0,
            "conv_pyramid",
            "4-stage convolutional pyramid encoder",
            backbones::build_conv_pyramid as BackboneBuildFn,
        )
        .expect("manifest");

    let mut necks = RegistrySet::new();
    necks.push_registry(Registry::new(None));
    necks
        .register(
            0,
            "select_indices",
            "keep the listed feature items",
            necks::build_select_indices as NeckBuildFn,
        )
        .expect("manifest");
    necks
        .register(
            0,
            "reshape_tokens_to_image",
            "token sequences to 2-D grids, reducing the temporal axis",
            necks::build_reshape_tokens as NeckBuildFn,
        )
        .expect("manifest");
    necks
        .register(
            0,
            "interpolate_to_pyramid",
            "resize equal-size grids into a pyramid (learned upscaling)",
            necks::build_interpolate_to_pyramid as NeckBuildFn,
        )
        .expect("manifest");

    let mut decoder_set = RegistrySet::new();
    decoder_set.push_registry(Registry::new(None));
    decoder_set
        .register(
            0,
            "pyramid_fusion",
            "multi-scale pooling + top-down pyramid fusion",
            build_pyramid_fusion as DecoderBuildFn,
        )
        .expect("manifest");
    decoder_set
        .register(0, "fcn", "stacked 3x3 conv blocks", build_fcn as DecoderBuildFn)
        .expect("manifest");
    decoder_set
        .register(
            0,
            "identity",
            "pass-through for image-level tasks",
            build_identity as DecoderBuildFn,
        )
        .expect("manifest");

    let mut heads = RegistrySet::new();
    heads.push_registry(Registry::new(None));
    for kind in [
        HeadKind::Segmentation,
        HeadKind::Regression,
        HeadKind::Classification,
    ] {
        heads
            .register(0, kind.name(), "task head", head_builder(kind))
            .expect("manifest");
    }

    Registries {
        backbones,
        necks,
        decoders: decoder_set,
        heads,
    }
}

/// Frozen built-in registries; initialized once, read-only afterwards.
pub fn builtin() -> &'static Registries {
    static REGISTRIES: OnceLock<Registries> = OnceLock::new();
    REGISTRIES.get_or_init(build_manifest)
}
