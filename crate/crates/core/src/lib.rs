//! Encoder-decoder segmentation with shape-prior and adversarial
//! regularization, plus the 3D post-processing, evaluation, ranking and
//! leave-one-out experiment pipeline around it.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod postproc;
pub mod ranking;
pub mod synth;
pub mod train;
pub mod types;
pub mod vvol;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use types::{method_name, Regularization, Strategy};
