pub mod contrastive;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod grm;
pub mod inference;
pub mod labels;
pub mod pipeline;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, Result};
