//! Long-term fair sequential decisions on a time-lagged causal model.
//!
//! The crate simulates a lending population whose features respond to past
//! decisions, measures path-specific effects of the protected attribute on
//! those decisions, and trains a logistic decision model by repeated risk
//! minimization against utility plus long- and short-term fairness losses.

pub mod baselines;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod intervene;
pub mod io;
pub mod model;
pub mod objective;
pub mod panel;
pub mod rng;
pub mod scm;
pub mod sensitivity;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{sigmoid, DecisionModel, Label};
pub use panel::PanelDataset;
pub use scm::{InitDistribution, Partition, TimeLaggedScm, Transition, S_MINUS, S_PLUS};
