//! Detection of action *starts* in temporal sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`seqcore`]: label/score grids, start sets, Gaussian label blur and
//!   threshold + NMS start extraction.
//! - [`matching`]: the tau-constrained optimal assignment between true and
//!   predicted starts (Hungarian solver) and the structured error built on it.
//! - [`losses`]: per-frame MSE, the matching loss, the Wasserstein/EMD loss,
//!   their combination and the lambda schedule, all with analytic gradients.
//! - [`model`]: a bidirectional LSTM scorer with hand-written backprop and ADAM.
//! - [`evalkit`]: tau-matched precision/recall/F1 and point-level AP metrics.
//! - [`datagen`]: a seeded synthetic action-grammar dataset and file formats.

pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod matching;
pub mod model;
pub mod seqcore;

pub use error::{Error, Result};
pub use seqcore::{BlurSpec, ExtractSpec, Grid, LabelGrid, ScoreGrid, Start, StartSet};
