pub mod adpg;
pub mod backbone;
pub mod color_hvi;
pub mod config;
pub mod error;
pub mod icde;
pub mod image_io;
pub mod lgim;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
