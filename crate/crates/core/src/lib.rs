//! Open-world few-shot continual learning: instance-wise token augmentation,
//! margin-trained hypersphere boundaries, and an adaptive knowledge space that
//! turns clusters of detected unknowns into pseudo classes and later promotes
//! them to known ones.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the pipeline and the command line use.

// `!(x > 0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aks;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod ita;
pub mod label;
pub mod mob;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod stream;
pub mod trainer;

pub use error::{OfclError, Result};
pub use label::Label;
pub use scalar::Scalar;

pub type Embedding = geometry::Embedding<f64>;
pub type Quantile = geometry::Quantile<f64>;
pub type Backbone = features::Backbone<f64>;
pub type RawSample = features::RawSample<f64>;
pub type Token = ita::Token<f64>;
pub type TokenBank = ita::TokenBank<f64>;
pub type Hypersphere = mob::Hypersphere<f64>;
pub type MarginConfig = mob::MarginConfig<f64>;
pub type Detection = mob::Detection<f64>;
pub type ClusterParams = aks::ClusterParams<f64>;
pub type KnowledgeSpace = aks::KnowledgeSpace<f64>;
pub type Classifier = trainer::Classifier<f64>;
pub type Learner = trainer::Learner<f64>;
pub type StreamSpec = stream::StreamSpec<f64>;
pub type Episode = stream::Episode<f64>;
pub type PredictionRecord = eval::PredictionRecord<f64>;
