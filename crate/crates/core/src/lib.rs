//! Multi-horizon quantile recurrent forecaster: reverse-mode autodiff on
//! dense f64 tensors, sequence encoders, a forked multi-horizon decoder,
//! training by forking or cutting sequences, data handling and evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod training;

pub use autodiff::{Activation, Graph, Var};
pub use data::{Dataset, FeatureLayout, NormMode, NormalizationStats, SeriesRecord};
pub use decoder::{DecoderKind, DecoderSpec, Head};
pub use encoders::{EncoderKind, EncoderSpec};
pub use error::{MqError, Result};
pub use model::{DecodeAt, ForecastGrid, ModelSpec, MqModel};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use training::{train, QuantileSpec, Scheme, TargetMask, TrainReport, TrainingConfig};
pub use evaluation::{rolling_evaluate, score_quantile_loss, EvaluationPlan, MetricReport};
