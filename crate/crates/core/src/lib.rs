//! Multimodal fake-news classification over pre-extracted feature sequences.
//!
//! Three feature channels (text, image, image-conditioned text) are projected
//! to a shared width and fused, by default with a tri-transformer: text
//! self-attention plus text-queried cross-attention over each other channel.
//! A small batch-normalized MLP turns the fused vector into a fake
//! probability. Everything runs on the crate's own tape-based autodiff.

pub mod attention;
pub mod data;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use data::{read_dataset, synth_generate, write_dataset, Dataset, FeatureDims, FeatureRecord, SynthConfig};
pub use error::{Error, Result};
pub use fusion::{ChannelMask, FusionConfig, Strategy};
pub use model::{Model, ModelConfig};
pub use tensor::{Precision, Tape, Tensor, Var};
pub use train::{evaluate, train, Metrics, TrainConfig};
