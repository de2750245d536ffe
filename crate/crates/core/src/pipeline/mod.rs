//! End-user pipeline: image IO, letterboxing, NMS, inference, synthetic
//! data, toy training, evaluation and benchmarking.

pub mod bench;
pub mod config;
pub mod eval;
pub mod image;
pub mod infer;
pub mod letterbox;
pub mod nms;
pub mod synth;
pub mod train;

pub use bench::{bench, BenchReport};
pub use config::{Config, RunConfig, TrainConfig};
pub use eval::evaluate;
pub use image::Image;
pub use infer::{annotate, detect_batch, postprocess, run_inference};
pub use letterbox::{letterbox, LetterboxInfo, PAD_VALUE};
pub use nms::nms;
pub use synth::{generate_synth_dataset, load_split, SynthScene};
pub use train::{loss_endpoints, smoothed, train, LossRecord};
