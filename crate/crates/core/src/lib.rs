pub mod attention;
pub mod bench;
pub mod cli;
pub mod config;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod memory;
pub mod pipeline;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
