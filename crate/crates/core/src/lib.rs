//! Motion-as-option video object segmentation: a two-encoder network that
//! takes either optical flow or the RGB frame as its motion input, trained
//! jointly on video and salient-object data, with confidence-based selection
//! between the two at inference time.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod imgproc;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod selection;
pub mod tensor;
pub mod training;
pub mod types;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use data::{Sample, SynthConfig, TrainingBatch, VosSequence};
pub use error::{Error, ErrorClass, Result};
pub use flow::{Corruption, FlowField};
pub use metrics::{EvalReport, Scores};
pub use network::{FeaturePyramid, NetConfig, Network, Stream};
pub use selection::{InferMode, InferOptions, PredictionOutput, SelectionLog, Source, TtaConfig};
pub use tensor::Tensor;
pub use training::TrainConfig;
pub use types::{BinaryMask, ImageRgb};
