//! Detects faults in neural-network training programs by how much they
//! distort trained models.
//!
//! A trainer under test and a reference trainer each learn a model, the
//! model is used to generate a distorted copy of its own training data,
//! and the trainer learns again from that copy. Accuracy on the untouched
//! test set barely moves for a correct trainer but drops sharply for a
//! faulty one, even when the faulty trainer's own loss and accuracy curves
//! look healthy. The [`analysis`] module turns that gap into a verdict and
//! adds hidden-layer neuron-coverage statistics as further evidence.

pub mod analysis;
pub mod dataset;
pub mod distortion;
pub mod error;
pub mod model;
pub mod training;

pub use error::{Error, Result};
