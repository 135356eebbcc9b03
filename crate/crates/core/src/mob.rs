//! Margin-based open boundary: per-class hyperspheres, the log-sum-exp
//! margin loss with analytic gradients, quantile radius initialisation and
//! nearest-centroid open detection.

use std::fmt;

use crate::error::{OfclError, Result};
use crate::geometry::{self, Embedding, Quantile};
use crate::label::Label;
use crate::scalar::Scalar;

/// Smallest radius any sphere may carry.
pub const MIN_RADIUS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Known,
    Pseudo,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Known => "known",
            Self::Pseudo => "pseudo",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypersphere<T> {
    pub label: Label,
    pub centroid: Embedding<T>,
    pub radius: T,
    pub task_of_origin: usize,
    pub provenance: Provenance,
}

impl<T: Scalar> Hypersphere<T> {
    pub fn contains(&self, x: &[T]) -> bool {
        geometry::dist(&self.centroid, x) <= self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig<T> {
    pub m: T,
    pub alpha: T,
    pub beta: T,
    pub lambda_r: T,
    pub sigma: Quantile<T>,
}

impl<T: Scalar> MarginConfig<T> {
    pub fn new(m: T, alpha: T, beta: T, lambda_r: T, sigma: T) -> Result<Self> {
        let cfg = Self {
            m,
            alpha,
            beta,
            lambda_r,
            sigma: Quantile::new(sigma)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        if !(self.m > zero && self.alpha > zero && self.beta > zero && self.lambda_r >= zero) {
            return Err(OfclError::usage(
                "margin config needs m > 0, alpha > 0, beta > 0, lambda_r >= 0",
            ));
        }
        Ok(())
    }
}

pub fn compute_centroid<T: Scalar>(embeddings: &[&[T]]) -> Result<Embedding<T>> {
    Embedding::new(geometry::mean(embeddings)?)
}

/// Nearest-rank `sigma`-quantile of `{d(c, e) - m}` over the negatives,
/// clamped below at [`MIN_RADIUS`].
pub fn init_radius<T: Scalar>(
    centroid: &[T],
    negatives: &[&[T]],
    cfg: &MarginConfig<T>,
) -> Result<T> {
    if negatives.is_empty() {
        return Err(OfclError::degenerate(
            "radius initialisation needs at least one negative",
        ));
    }
    let shifted = negatives
        .iter()
        .map(|e| geometry::distance(centroid, e).map(|d| d - cfg.m))
        .collect::<Result<Vec<_>>>()?;
    let r = geometry::quantile(&shifted, cfg.sigma)?;
    Ok(r.max(T::lit(MIN_RADIUS)))
}

/// Radius for a class without negatives: twice the mean positive distance.
pub fn fallback_radius<T: Scalar>(centroid: &[T], positives: &[&[T]]) -> Result<T> {
    if positives.is_empty() {
        return Err(OfclError::degenerate(
            "fallback radius needs at least one positive",
        ));
    }
    let total = positives
        .iter()
        .map(|p| geometry::distance(centroid, p))
        .sum::<Result<T>>()?;
    let r = T::lit(2.0) * total / T::from_count(positives.len());
    Ok(r.max(T::lit(MIN_RADIUS)))
}

/// One class's contribution to the margin loss.
#[derive(Debug, Clone)]
pub struct ClassTerm<'a, T> {
    pub label: Label,
    pub centroid: &'a [T],
    pub radius: T,
    pub positives: Vec<&'a [T]>,
    pub negatives: Vec<&'a [T]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginLoss<T> {
    pub loss: T,
    pub centroid_grads: Vec<Vec<T>>,
    pub radius_grads: Vec<T>,
    pub margin_grad: T,
}

/// `log(1 + sum_i exp(a_i))` and the softmax weights `exp(a_i) / (1 + sum)`.
fn log1p_sum_exp<T: Scalar>(a: &[T]) -> (T, Vec<T>) {
    let shift = a.iter().copied().fold(T::zero(), T::max);
    let exps: Vec<T> = a.iter().map(|&v| (v - shift).exp()).collect();
    let total = (-shift).exp() + exps.iter().copied().sum::<T>();
    let value = shift + total.ln();
    (value, exps.into_iter().map(|e| e / total).collect())
}

/// Margin loss averaged over classes, with gradients for every centroid,
/// every radius and the shared margin `cfg.m`.
pub fn margin_loss<T: Scalar>(
    classes: &[ClassTerm<'_, T>],
    cfg: &MarginConfig<T>,
) -> Result<MarginLoss<T>> {
    if classes.is_empty() {
        return Err(OfclError::usage("margin loss needs at least one class"));
    }
    let n = T::from_count(classes.len());
    let mut loss = T::zero();
    let mut centroid_grads = Vec::with_capacity(classes.len());
    let mut radius_grads = Vec::with_capacity(classes.len());
    let mut margin_grad = T::zero();

    for class in classes {
        if class.positives.is_empty() {
            return Err(OfclError::usage(format!(
                "class {} has no positives",
                class.label
            )));
        }
        let c = class.centroid;
        let r = class.radius;
        let dim = c.len();
        let pos_d = distances(c, &class.positives)?;
        let neg_d = distances(c, &class.negatives)?;

        let pos_a: Vec<T> = pos_d.iter().map(|&d| cfg.alpha * (d - r)).collect();
        let (pos_lse, pos_w) = log1p_sum_exp(&pos_a);
        let neg_a: Vec<T> = neg_d
            .iter()
            .map(|&d| -cfg.beta * (d - (r + cfg.m)))
            .collect();
        let (neg_lse, neg_w) = log1p_sum_exp(&neg_a);

        let term = cfg.lambda_r * r * r + pos_lse / cfg.alpha + neg_lse / cfg.beta;
        if !term.is_finite() {
            return Err(OfclError::numerical(format!(
                "non-finite margin loss term for class {}",
                class.label
            )));
        }
        loss += term;

        let pos_mass: T = pos_w.iter().copied().sum();
        let neg_mass: T = neg_w.iter().copied().sum();
        radius_grads.push((T::lit(2.0) * cfg.lambda_r * r - pos_mass + neg_mass) / n);
        margin_grad += neg_mass / n;

        let mut gc = vec![T::zero(); dim];
        accumulate_distance_grad(&mut gc, c, &class.positives, &pos_d, &pos_w, T::one());
        accumulate_distance_grad(&mut gc, c, &class.negatives, &neg_d, &neg_w, -T::one());
        gc.iter_mut().for_each(|g| *g /= n);
        centroid_grads.push(gc);
    }

    Ok(MarginLoss {
        loss: loss / n,
        centroid_grads,
        radius_grads,
        margin_grad,
    })
}

fn distances<T: Scalar>(c: &[T], xs: &[&[T]]) -> Result<Vec<T>> {
    xs.iter().map(|x| geometry::distance(c, x)).collect()
}

/// `grad += sign * sum_i w_i * (c - x_i) / d_i`
fn accumulate_distance_grad<T: Scalar>(
    grad: &mut [T],
    c: &[T],
    xs: &[&[T]],
    d: &[T],
    w: &[T],
    sign: T,
) {
    for ((x, &di), &wi) in xs.iter().zip(d).zip(w) {
        if di > T::zero() {
            let scale = sign * wi / di;
            for ((g, &cv), &xv) in grad.iter_mut().zip(c).zip(x.iter()) {
                *g += scale * (cv - xv);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    /// `None` when the sample is outside its nearest sphere.
    pub label: Option<Label>,
    /// Index into the sphere list of the nearest centroid.
    pub nearest: usize,
    pub nearest_label: Label,
    pub distance: T,
    pub radius: T,
}

impl<T: Scalar> Detection<T> {
    pub fn is_unknown(&self) -> bool {
        self.label.is_none()
    }

    /// `d* - r*`: non-positive exactly when the sample is accepted.
    pub fn openness(&self) -> T {
        self.distance - self.radius
    }
}

/// Pick the nearest centroid (ties to the lower label), then accept its
/// label iff the sample lies within that sphere's radius.
pub fn detect<T: Scalar>(spheres: &[Hypersphere<T>], x: &[T]) -> Result<Detection<T>> {
    let mut best: Option<(T, Label, usize)> = None;
    for (i, s) in spheres.iter().enumerate() {
        let d = geometry::distance(&s.centroid, x)?;
        let better = match best {
            None => true,
            Some((bd, bl, _)) => d < bd || (d == bd && s.label < bl),
        };
        if better {
            best = Some((d, s.label, i));
        }
    }
    let (distance, nearest_label, nearest) =
        best.ok_or_else(|| OfclError::usage("detection over an empty sphere set"))?;
    let radius = spheres[nearest].radius;
    Ok(Detection {
        label: (distance <= radius).then_some(nearest_label),
        nearest,
        nearest_label,
        distance,
        radius,
    })
}

/// Continuous openness of `x`: distance past the boundary of the sphere
/// [`detect`] selects. Positive exactly when `detect` reports unknown.
pub fn openness_score<T: Scalar>(spheres: &[Hypersphere<T>], x: &[T]) -> Result<T> {
    detect(spheres, x).map(|d| d.openness())
}
