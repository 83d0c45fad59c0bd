//! Layer-aggregation fake-image detection: procedural face data, face
//! alignment, a tap-exposing CNN backbone, per-layer primitive projections
//! with a linear head, training, evaluation and post-hoc analysis.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the precision used by the pipeline.

pub mod aggmodel;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod preprocess;
pub mod scalar;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type Image = tensor::ImageTensor<f32>;
pub type Model = aggmodel::AggregationModel<f32>;
pub type Model64 = aggmodel::AggregationModel<f64>;
pub type Sample = tensor::LabeledImage<f32>;
