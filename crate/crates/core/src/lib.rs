//! Memory-augmented transformer encoders.
//!
//! A frozen *general* encoder emits per-layer hidden states (the memory
//! cache); a trainable *domain* encoder fuses a representation built from that
//! cache into selected layers by appending memory key/value pairs to its own
//! attention. The crate carries everything needed to study the effect at desk
//! scale: a small `f64` autodiff engine, the encoder, four memory strategies,
//! three attention variants, baselines, synthetic corpora, training loops and
//! a bit-exact checkpoint format.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use encoder::{EncoderConfig, HeadConfig};
pub use error::{Error, Result};
pub use fusion::{FusionSpec, Strategy, Variant};
pub use graph::{Graph, Target, Var};
pub use model::{Composition, GmapModel, Sequence};
pub use optim::AdamState;
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
