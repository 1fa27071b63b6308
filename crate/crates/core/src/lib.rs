//! Hierarchical auto-bidding engine at desk scale: a constrained ad-auction
//! simulator and offline dataset generator, a dual-embedding decision model,
//! IQL-trained value functions, a pluggable reasoning client, and the GQPO
//! group-selection pipeline exporting a fine-tuning dataset.

pub mod act;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gqpo;
pub mod iql;
pub mod nn;
pub mod objective;
pub mod sim;
pub mod think;

pub use error::{Error, Result};
