//! Dual-branch sigmoid CAM laboratory.
//!
//! A small CNN with a frozen softmax classification head and a replicated,
//! independently trained sigmoid head over the same final-conv features; the
//! CAM family computed against either head; executable demonstrations of the
//! softmax additive-shift and sign-collapse distortions; and weakly
//! supervised localization and fidelity metrics on a synthetic dataset with
//! exact ground truth.

pub mod autograd;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distortion;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autograd::{BceCoefficients, Tape, Var};
pub use cam::{CamConfig, CamMethod, Heatmap};
pub use checkpoint::Checkpoint;
pub use config::KvConfig;
pub use data::{Dataset, DatasetSpec, Split, SynthSample};
pub use distortion::{DistortionGrid, DistortionKind, DistortionLab, DistortionReport, DistortionSpec};
pub use error::{Error, Result};
pub use experiment::{EvalMetrics, EvalRow, ExperimentConfig, RunManifest};
pub use metrics::BBox;
pub use model::{Arch, Branch, DualBranchModel, Part};
pub use tensor::{Real, Tensor};
pub use train::{PosWeightMode, TrainConfig};
