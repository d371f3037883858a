//! Noise-injection training and evaluation for tabular multilayer perceptrons.
//!
//! The crate is organised bottom-up: [`tensor`] and [`rng`] provide dense
//! matrices and seeded random streams, [`nn`] the network with manual
//! backpropagation, [`noise`] the injection operators and training loop.
//! [`data`], [`metrics`], [`ood`], [`hpo`] and [`landscape`] cover datasets,
//! scoring, corrupted test sets, hyperparameter search and loss-surface
//! probes. [`experiment`] wires everything into the command-line driver.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod hpo;
pub mod landscape;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod ood;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
