//! Adaptive-moment (Adam) optimizer with lazily created per-tensor state.

use std::collections::BTreeMap;

use crate::error::{OfclError, Result};
use crate::label::Label;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn new(learning_rate: T, beta1: T, beta2: T, epsilon: T) -> Result<Self> {
        let (zero, one) = (T::zero(), T::one());
        if !(learning_rate > zero)
            || !(beta1 >= zero && beta1 < one)
            || !(beta2 >= zero && beta2 < one)
            || !(epsilon > zero)
        {
            return Err(OfclError::usage(
                "adam needs lr > 0, beta1/beta2 in [0, 1), epsilon > 0",
            ));
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        })
    }
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(0.03),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }
}

/// Identity of a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Centroid(Label),
    Radius(Label),
    Margin,
    TokenKey(usize),
    TokenValues(usize),
    ClassifierColumn(Label),
    ClassifierBias(Label),
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
    steps: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig<T>,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig<T>) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig<T> {
        &self.config
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    /// One bias-corrected Adam update of `params`. An all-zero gradient is a
    /// no-op that leaves both the parameters and the moment state untouched.
    /// Returns whether an update was applied.
    pub fn step(&mut self, id: ParamId, params: &mut [T], grads: &[T]) -> Result<bool> {
        if params.len() != grads.len() {
            return Err(OfclError::usage(format!(
                "gradient length {} does not match parameter length {} for {id:?}",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().all(|g| *g == T::zero()) {
            return Ok(false);
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let m = self.state.entry(id).or_insert_with(|| Moments {
            first: vec![T::zero(); params.len()],
            second: vec![T::zero(); params.len()],
            steps: 0,
        });
        if m.first.len() != params.len() {
            return Err(OfclError::usage(format!("parameter {id:?} changed shape")));
        }
        m.steps += 1;
        let c1 = T::one() - beta1.powi(m.steps);
        let c2 = T::one() - beta2.powi(m.steps);
        for (((p, &g), f), s) in params
            .iter_mut()
            .zip(grads)
            .zip(m.first.iter_mut())
            .zip(m.second.iter_mut())
        {
            *f = beta1 * *f + (T::one() - beta1) * g;
            *s = beta2 * *s + (T::one() - beta2) * g * g;
            let f_hat = *f / c1;
            let s_hat = *s / c2;
            *p -= learning_rate * f_hat / (s_hat.sqrt() + epsilon);
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig::<f64>::default());
        let mut p = vec![1.0, -2.0];
        adam.step(ParamId::Margin, &mut p, &[0.5, 0.5]).unwrap();
        let after_first = p.clone();
        let snapshot = adam.clone();
        assert!(!adam.step(ParamId::Margin, &mut p, &[0.0, 0.0]).unwrap());
        assert_eq!(p, after_first);
        assert_eq!(adam, snapshot);
        assert!(!adam.has_state(ParamId::ClassifierBias(Label::class(0))));
        let mut q = vec![3.0];
        adam.step(ParamId::ClassifierBias(Label::class(0)), &mut q, &[0.0])
            .unwrap();
        assert!(!adam.has_state(ParamId::ClassifierBias(Label::class(0))));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::new(0.1, 0.9, 0.999, 1e-12).unwrap();
        let mut adam = Adam::new(cfg);
        let mut p: Vec<f64> = vec![0.0, 0.0];
        adam.step(ParamId::Margin, &mut p, &[3.0, -0.01]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-9 && (p[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::new(0.05, 0.9, 0.999, 1e-8).unwrap());
        let mut p = vec![2.0, -3.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            adam.step(ParamId::Margin, &mut p, &g).unwrap();
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(AdamConfig::new(0.0, 0.9, 0.999, 1e-8).is_err());
        assert!(AdamConfig::new(0.1, 1.0, 0.999, 1e-8).is_err());
        let mut adam = Adam::new(AdamConfig::<f64>::default());
        assert!(adam.step(ParamId::Margin, &mut [0.0], &[1.0, 2.0]).is_err());
    }
}
