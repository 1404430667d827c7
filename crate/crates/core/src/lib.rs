//! Triadic voice activity projection toolkit.

pub mod activity;
pub mod corpus;
pub mod error;
pub mod features;
pub mod net;
pub mod projection;
pub mod train;

pub use error::{Error, Result};
