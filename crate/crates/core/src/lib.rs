//! Numeric core of the smokewatch wildfire-smoke detector.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, grid locations, regression vectors, IoU and centerness.
//! - [`neuralops`]: a small set of differentiable operators (conv, deformable conv,
//!   upsampling, activations) and an SGD optimizer.
//! - [`losses`]: focal, IoU and centerness losses and their composite.
//! - [`assignment`]: score-based adaptive sample selection and the point-adapted
//!   ATSS baseline.
//! - [`detector`]: the multi-level detector, training step, inference and checkpoints.
//! - [`evalharness`]: confusion metrics, time-to-detect reporting and the synthetic
//!   smoke corpus.

pub mod assignment;
pub mod detector;
pub mod evalharness;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod neuralops;

pub use assignment::{AssignmentResult, CandidateSample, LocationRole};
pub use detector::{Detection, Detector, DetectorConfig, PredictionMaps};
pub use evalharness::{ConfusionCounts, DetectionDelay, Metrics};
pub use geometry::{BoundingBox, GridLocation, RegressionVector};
pub use imaging::LabeledImage;
pub use losses::{LossBreakdown, SampleTarget};
pub use neuralops::{FeatureMap, ParameterSet, Real, Tensor};
