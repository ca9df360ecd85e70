// SPDX-License-Identifier: MIT OR Apache-2.0

//! Configuration, checkpoints, evaluation and the staged pipeline behind the
//! `desksteer` command line.

pub mod checkpoint;
pub mod config;
pub mod dump;
pub mod error;
pub mod eval;
pub mod pipeline;

pub use error::{ErrorKind, HarnessError, Result};
