pub mod aita;
pub mod archive;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod ranker;
pub mod synthetic;

pub use config::RunConfig;
pub use error::{Error, Result};
