//! Non-contrastive relation extraction.
//!
//! A sentence encoder is fine-tuned on labelled sentences, refined with an
//! online/target network pair trained on same-label sentence pairs, and then
//! frozen under a linear classifier. Everything is generic over the scalar
//! type; the aliases at the bottom pin `f64` (the default) and `f32`.

// Negated comparisons deliberately send NaN down the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod byol;
pub mod cli;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pairing;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Activation, Graph, Pooling, Var};
pub use byol::{ByolConfig, PairLayout, RepresentationTap};
pub use data::{DatasetSplit, LabelTable, LabeledSentence, SynthConfig};
pub use encoder::{EncoderConfig, TokenizerConfig};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, DiagnosticsSnapshot, EvalReport};
pub use pairing::{PairBatch, PairSampler};
pub use scalar::Scalar;
pub use tensor::{ParamId, ParamStore, Parameter};

/// Seed used whenever none is given.
pub const DEFAULT_SEED: u64 = 0x5EED;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type NetworkPair64 = byol::NetworkPair<f64>;
pub type NetworkPair32 = byol::NetworkPair<f32>;
pub type Sgd64 = optim::Sgd<f64>;
pub type Sgd32 = optim::Sgd<f32>;
pub type SentenceVector64 = encoder::SentenceVector<f64>;
