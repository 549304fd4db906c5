//! Contrastive sentence embeddings with sampled dropout rates.
//!
//! A small transformer encoder is trained so that two dropout-perturbed
//! passes over the same sentence agree under an InfoNCE objective. Dropout
//! rates can be drawn from a distribution per forward pass or per layer, and
//! optionally per sentence. Everything runs on a built-in reverse-mode
//! autodiff tape and is generic over `f32`/`f64`; the aliases at the crate
//! root fix the scalar type.

pub mod autodiff;
pub mod data;
pub mod dropout;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kv;
pub mod loss;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, GradCheckReport, SeqLayout, Var};
pub use dropout::{DropoutDistribution, DropoutSpec, RateScope, Scaling};
pub use encoder::{EncoderConfig, Pooling};
pub use error::{Error, Result};
pub use eval::{spearman, EvalReport};
pub use loss::{DenominatorMode, LossConfig};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{Method, TrainConfig};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type EncoderWeights64 = encoder::EncoderWeights<f64>;
