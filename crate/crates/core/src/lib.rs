//! Desk-scale single-shot object detection with a consistent training
//! objective.
//!
//! The crate is generic over the scalar type through [`scalar::Real`]; the
//! aliases below fix `f64` as the default precision used by the binaries and
//! tests.

pub mod analysis;
pub mod anchors;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod scalar;
pub mod synthdata;
pub mod targets;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default precision for all shipped binaries and tests.
pub type Scalar = f64;

pub type BBox = geometry::BBox<Scalar>;
pub type Offsets = geometry::Offsets<Scalar>;
pub type AnchorConfig = anchors::AnchorConfig<Scalar>;
pub type AnchorSet = anchors::AnchorSet<Scalar>;
pub type MatchThresholds = targets::MatchThresholds<Scalar>;
pub type TargetAssignment = targets::TargetAssignment<Scalar>;
pub type LossConfig = losses::LossConfig<Scalar>;
pub type LossReport = losses::LossReport<Scalar>;
pub type ModelConfig = detector::ModelConfig<Scalar>;
pub type DetectorModel = detector::DetectorModel<Scalar>;
pub type DetectorOutputs = detector::DetectorOutputs<Scalar>;
pub type InferenceConfig = inference::InferenceConfig<Scalar>;
pub type Detection = inference::Detection<Scalar>;
pub type EvalResult = evaluation::EvalResult<Scalar>;
pub type SceneSpec = synthdata::SceneSpec<Scalar>;
pub type Scene = synthdata::Scene<Scalar>;
pub type ExperimentConfig = config::ExperimentConfig<Scalar>;
pub type Tape = tensor::Tape<Scalar>;
pub type Tensor = tensor::Tensor<Scalar>;
