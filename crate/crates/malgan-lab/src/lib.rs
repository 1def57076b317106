//! MalGAN laboratory: black-box adversarial attacks on binary-feature
//! malware detectors.
//!
//! The crate is organised around the attack pipeline:
//!
//! - [`dataset`]: synthetic binary-feature program datasets, CSV I/O,
//!   train/test split protocols and class-ratio minibatching.
//! - [`neuralnet`]: dense feed-forward networks with backpropagation and
//!   Adam, shared by the generator, the substitute detector and the MLP
//!   black-box detector.
//! - [`detectors`]: the six black-box detectors under attack (RF, LR, DT,
//!   SVM, MLP, VOTE) behind a hard-label-only interface.
//! - [`malgan`]: the generator / substitute-detector pair, the smooth
//!   merge, both losses and the adversarial training loop.
//! - [`baseline`]: the iterative saliency attack used as a comparison,
//!   with optional substitute retraining.
//! - [`armsrace`]: alternating defender retraining and attacker retraining.
//! - [`harness`]: experiment orchestration, CSV reports and the
//!   acceptance suite.

pub mod armsrace;
pub mod baseline;
pub mod dataset;
pub mod detectors;
mod error;
pub mod harness;
pub mod malgan;
pub mod neuralnet;
pub mod seed;

pub use error::{Error, Result};
