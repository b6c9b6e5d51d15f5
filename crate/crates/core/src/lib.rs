//! Burst-spiking vision transformer: neurons, addition-only attention,
//! training, energy accounting and data loading.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod model;
pub mod neuron;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;
pub mod trap;

pub use error::{Error, Result};
