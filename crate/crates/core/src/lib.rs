//! Multi-attention recurrent video frame prediction.
//!
//! The crate is organised bottom-up: [`tensor`] values and the [`graph`]
//! autodiff tape, the [`cell`] recurrent unit, the [`generator`] and
//! [`discriminator`] networks built from it, [`train`] for losses,
//! optimisation and checkpoints, [`data`] for synthetic sequences, [`metrics`]
//! for frame quality, and [`cli`] for the `mau` command-line tool.

pub mod cell;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, Activation, Gradients, Graph, Var};
pub use tensor::Tensor;
