//! A desk-scale class-incremental learning engine.
//!
//! The engine trains a single-head classifier over a sequence of class
//! increments whose data is imbalanced in two ways at once: within a phase
//! (long-tailed class counts) and between phases (a handful of stored
//! exemplars against a full batch of new data). Its center of gravity is a
//! per-class accounting of accumulated FC-gradient magnitudes, used to
//! rescale each class column's update so that no class — frequent or rare,
//! old or new — dominates the classifier by sheer gradient volume. An
//! entropy-gated distillation loss stabilizes old classes in proportion to
//! how much of their training data was lost to the exemplar budget.
//!
//! Modules follow the pipeline: [`datagen`] builds long-tailed datasets,
//! [`protocol`] slices classes into phases, [`memory`] manages the exemplar
//! store, [`model`] / [`losses`] / [`reweight`] implement the learner and
//! its update rules, [`trainer`] drives the phase loop, and [`metrics`]
//! aggregates continual-learning measurements.

pub mod datagen;
pub mod error;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod reweight;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
