//! Two-stage query-based object detection: one global localization pass
//! followed by one local refinement pass, trained end to end with set
//! matching on synthetic scenes.
//!
//! Module map:
//! - [`tensor`]: dense arrays, differentiation tape, gradient checking
//! - [`backbone`]: convolutional feature pyramid P2-P5
//! - [`global`]: meta query init, multi-scale fusion, attention, adaptive sampling
//! - [`local`]: RoIAlign, query-guided feature enhancing, refinement heads
//! - [`matching`] and [`loss`]: Hungarian assignment and the set losses
//! - [`data`]: synthetic scenes, augmentation, dataset files
//! - [`harness`]: config, optimizer, training, evaluation, checkpoints, checks

pub mod backbone;
pub mod data;
pub mod error;
pub mod global;
pub mod harness;
pub mod layers;
pub mod local;
pub mod loss;
pub mod matching;
pub mod model;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
pub use backbone::{FeaturePyramid, Image};
pub use model::{Detection, Detector, ModelConfig};
pub use tensor::{Graph, ParamStore, Real, Tensor, Var};
