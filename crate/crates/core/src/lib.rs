//! Magnitude pruning with fine-tuning, weight rewinding and learning-rate
//! rewinding, built on a small reverse-mode differentiation engine.

mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod models;
pub mod optim;
pub mod prune;
pub mod rewind;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
