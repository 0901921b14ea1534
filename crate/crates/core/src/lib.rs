//! Convolutional classifiers for fine-grained insect pest images: a
//! ResNet-50 baseline, a residual attention network, a feature pyramid
//! classifier and a multi-branch attention-localizing network, plus soft
//! voting, macro metrics and Grad-CAM.

pub mod backbone;
pub mod data_io;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod fpn;
pub mod metrics;
pub mod mmal;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod ran;
pub mod report;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
