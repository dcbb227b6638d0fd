//! A desk-scale laboratory for training classifiers under label noise.
//!
//! The crate combines two ingredients: nested channel masking, which orders
//! a feature representation by importance so it can be truncated at
//! inference, and co-teaching, where two peer networks each train on the
//! small-loss samples selected by the other. Training runs in two stages:
//! independent pretraining with per-iteration channel masking, then joint
//! co-teaching fine-tuning with frozen batch norm.
//!
//! Everything is f64 with fixed reduction orders, so a (config, seed) pair
//! reproduces results bitwise on one machine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod coteach;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nested;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod seeds;

pub use error::{Error, Result};
