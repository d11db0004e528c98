//! Multi-frame traffic-light detection and state classification.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod egolane;
pub mod error;
pub mod image;
pub mod lint;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use dataset::{Clip, Distance, LightState, Tag};
pub use error::{Error, Result};
pub use image::Image;
pub use loss::{BBox, LossConfig, MatchResult, Target};
pub use model::{ModelConfig, Prediction, ViTLR};
pub use params::ParamStore;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
