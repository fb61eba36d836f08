// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage runner behind the `factlab` binary.

pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use stages::Workspace;
