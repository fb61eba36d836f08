// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod attribution;
pub mod corpus;
pub mod error;
pub mod freq;
pub mod harness;
pub mod intervention;
pub mod model;
pub mod ovsvd;
pub mod stats;
pub mod svg;
pub mod vocab;

pub use error::{Error, Result};
