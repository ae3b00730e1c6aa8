//! Core of a federated-learning simulator that compresses client updates
//! with layer-wise bucketed quantisation and accounts for every bit sent.
//!
//! Everything here is `no_std` with `alloc`; file formats, configuration and
//! the command line live in the `quantfl` crate.

#![no_std]
extern crate alloc;

pub mod costing;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};
