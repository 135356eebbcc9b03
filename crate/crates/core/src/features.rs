//! Frozen feature backbone, query function and augmented-feature
//! construction.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{OfclError, Result};
use crate::geometry::{self, seeded_rng, Embedding};
use crate::ita::Token;
use crate::label::Label;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Identity,
    RandomProjection,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::RandomProjection => "frozen-random-projection",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "frozen-random-projection" | "random-projection" => Ok(Self::RandomProjection),
            other => Err(OfclError::Config(format!(
                "unknown backbone kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSample<T> {
    pub features: Vec<T>,
    /// `None` for unlabeled samples.
    pub label: Option<Label>,
}

/// Frozen encoder: optional linear projection, elementwise `tanh`, then
/// L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    spec: BackboneSpec,
    /// `input_dim x output_dim`, row-major; empty for the identity kind.
    weights: Vec<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(OfclError::usage("backbone dimensions must be positive"));
        }
        let weights = match spec.kind {
            BackboneKind::Identity => {
                if spec.input_dim != spec.output_dim {
                    return Err(OfclError::usage(format!(
                        "identity backbone needs input_dim == output_dim ({} != {})",
                        spec.input_dim, spec.output_dim
                    )));
                }
                Vec::new()
            }
            BackboneKind::RandomProjection => {
                let mut rng = seeded_rng(spec.seed, &[0xBAC_B0E]);
                let scale = 1.0 / (spec.input_dim as f64).sqrt();
                (0..spec.input_dim * spec.output_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::lit(z * scale)
                    })
                    .collect()
            }
        };
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> BackboneSpec {
        self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn extract(&self, x: &[T]) -> Result<Embedding<T>> {
        if x.len() != self.spec.input_dim {
            return Err(OfclError::usage(format!(
                "sample has {} features, backbone expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let projected: Vec<T> = match self.spec.kind {
            BackboneKind::Identity => x.iter().map(|v| v.tanh()).collect(),
            BackboneKind::RandomProjection => {
                let out = self.spec.output_dim;
                let mut acc = vec![T::zero(); out];
                for (&xi, row) in x.iter().zip(self.weights.chunks_exact(out)) {
                    for (a, &w) in acc.iter_mut().zip(row) {
                        *a += xi * w;
                    }
                }
                acc.into_iter().map(|v| v.tanh()).collect()
            }
        };
        geometry::normalize(&projected)
    }

    /// Key-space query; the same frozen encoder as [`Backbone::extract`].
    pub fn query(&self, x: &[T]) -> Result<Embedding<T>> {
        self.extract(x)
    }
}

/// `h` followed by the row-mean of each selected token, in selection order.
pub fn augmented_feature<T: Scalar>(h: &[T], selected: &[&Token<T>], k: usize) -> Result<Vec<T>> {
    if selected.len() != k {
        return Err(OfclError::usage(format!(
            "expected {k} tokens for augmentation, got {}",
            selected.len()
        )));
    }
    let mut out = Vec::with_capacity(h.len() * (1 + k));
    out.extend_from_slice(h);
    for tok in selected {
        if tok.key.dim() != h.len() {
            return Err(OfclError::usage(
                "token dimension differs from embedding dimension",
            ));
        }
        out.extend(tok.pooled());
    }
    Ok(out)
}
