pub mod attention;
pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod simulator;
pub mod state;
pub mod tokenizer;
pub mod toydata;
pub mod training;
pub mod trajio;

pub use error::{Error, Result};
