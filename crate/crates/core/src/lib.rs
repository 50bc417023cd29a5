//! Link-level simulation of semi-blind joint channel estimation and symbol
//! detection for multi-cell massive MIMO uplinks over time-varying channels.

pub mod channel;
pub mod config;
pub mod error;
pub mod frame;
pub mod harness;
pub mod inference;
pub mod numerics;
pub mod receivers;

pub use config::{Algorithm, SystemConfig};
pub use error::{Error, Result};
