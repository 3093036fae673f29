//! Video object segmentation from a single annotated frame, built on a
//! key/value memory of past frames.
//!
//! A query encoder turns each frame into key and query feature maps; a mask
//! encoder turns a (predicted or annotated) mask plus the frame's backbone
//! features into a value map. Key/value pairs of selected frames are kept in
//! a [`MemoryBank`]; new frames read the bank through a softmax affinity over
//! negative squared key distances, and the decoder turns the readout into a
//! foreground probability map.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod memory;
pub mod model;
pub mod optim;
pub mod params;
pub mod propagate;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use dataset::{Dataset, Video};
pub use decoder::{DecoderConfig, FOREGROUND};
pub use encoders::{EncoderConfig, FrameFeatures, Provenance, ValueFeatures};
pub use error::{Error, Result};
pub use io::{Frame, Mask};
pub use losses::LossConfig;
pub use memory::{AffinityMatrix, MemoryBank, MemoryEntry};
pub use metrics::{MetricsConfig, MetricsReport};
pub use model::{Model, ModelConfig};
pub use optim::{AdamConfig, AdamState};
pub use params::ParamStore;
pub use propagate::{PropagationConfig, PropagationResult};
pub use synth::SynthConfig;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use training::{TrainConfig, Trainer};
