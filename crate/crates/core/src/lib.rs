//! Semantic-driven energy-based out-of-distribution detection.
//!
//! A small ReLU classifier is trained with cross-entropy, a dual-margin
//! squared hinge on (semantic) free energy, and a cluster loss over class
//! mean logit vectors that are tracked by exponential moving average. At
//! inference the energy of the similarity-weighted logits separates in- from
//! out-of-distribution inputs.
//!
//! Module map:
//! - [`numerics`]: stable logsumexp / softmax / cosine kernels
//! - [`network`]: MLP forward/backward and SGD
//! - [`clusters`]: class means and their EMA
//! - [`losses`]: CE, Cluster Focal Loss, ii-loss, hinge, joint objective
//! - [`scoring`]: vanilla / semantic / multi-layer energies, detector, thresholds
//! - [`metrics`]: FPR at TPR, AUROC, AUPR, overlap
//! - [`data`]: synthetic data and CSV formats
//! - [`cli`]: training loop and subcommands

pub mod checkpoint;
pub mod cli;
pub mod clusters;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod scoring;

pub use checkpoint::Model;
pub use error::{Error, Result};
