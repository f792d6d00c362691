//! Two-tower sequential recommenders with single or multiple user
//! representations, trained with in-batch sampled softmax, plus iterative
//! density weighting (IDW) of item losses for long-tailed data.
//!
//! The crate is organized bottom-up: [`synthetic`] and [`dataset`] produce
//! training examples, [`towers`] holds the model and its loss, [`training`]
//! and [`idw`] optimize it, and [`eval`] measures it.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod idw;
pub mod optim;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod towers;
pub mod training;

pub use error::{Error, Result};
