pub mod cli;
pub mod distill;
pub mod error;
pub mod models;
pub mod numcore;
pub mod objectives;
pub mod rlteacher;
pub mod tasks;

pub use error::{Error, Result};
