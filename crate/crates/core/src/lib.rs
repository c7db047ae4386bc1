//! Multi-task pyramid vision transformer for aerial object re-identification.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`]: dense `f64` arrays and a reverse-mode graph.
//! * [`nn`]: parameter storage and the small layers everything is built from.
//! * [`backbone`]: the four-stage pyramid encoder with spatial-reduction attention.
//! * [`fusion`]: spatial attention, batch-instance normalization and the shared
//!   channel gate that fuses the pyramid into one embedding.
//! * [`heads`]: object-ID and camera heads with log-variance readouts.
//! * [`losses`]: the uncertainty-weighted loss family and batch mining.
//! * [`metrics`]: CMC / mAP retrieval evaluation.
//! * [`data`], [`train`], [`checkpoint`], [`config`]: the training harness.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod heads;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{ReidError, Result};
pub use tensor::Tensor;
