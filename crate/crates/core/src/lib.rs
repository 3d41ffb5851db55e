//! Speech enhancement with an ensemble of mask-estimating denoisers and an
//! autoencoder that picks, per utterance, the module whose output looks
//! most like clean speech.

pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod fsutil;
pub mod metrics;
pub mod network;
pub mod selector;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
