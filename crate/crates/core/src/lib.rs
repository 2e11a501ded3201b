// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod archive;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod probe;
pub mod runner;
pub mod tokenizer;

pub use error::{Error, Result};
