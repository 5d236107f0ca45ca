//! Pipeline driver and persistence for the mGRE motion-correction toolkit.

pub mod config;
pub mod error;
pub mod image;
pub mod pipeline;
pub mod volume;

pub use config::{RunConfig, Stage};
pub use error::CliError;
pub use pipeline::Run;
