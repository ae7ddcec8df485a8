pub mod buffers;
pub mod cli;
pub mod config;
pub mod curriculum;
pub mod domain;
pub mod error;
pub mod eval;
pub mod nnet;
pub mod orchestrator;
pub mod policy;
pub mod rewards;
pub mod system_agent;
pub mod user_agent;

pub use error::{Error, Result};
