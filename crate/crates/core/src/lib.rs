//! Infrared/visible image fusion with back-door adjustment over scene
//! confounders.
//!
//! The pipeline: [`scenegen`] produces scene-biased synthetic pairs,
//! [`confounder`] clusters per-modality scene features into dictionaries,
//! [`fusionnet`] fuses a pair through [`baffm`], [`training`] fits the network
//! with Adam on top of the small [`diff`] autodiff engine, and [`metrics`]
//! scores the result.

pub mod baffm;
pub mod confounder;
pub mod corpus;
pub mod diff;
pub mod error;
pub mod fusionnet;
pub mod image;
pub mod metrics;
pub mod scenegen;
pub mod training;

pub use confounder::{ConfounderDictionary, DictionaryParams, Modality};
pub use diff::{AdamConfig, Graph, ParamStore, Tensor, Var};
pub use error::{Error, Result};
pub use fusionnet::{FusionModel, ModelConfig};
pub use image::Image;
pub use metrics::{EvaluationReport, MetricReport};
pub use scenegen::{BiasProfile, ImagePair, SceneCategory};
pub use training::{LossConfig, TrainConfig, TrainHistory};
