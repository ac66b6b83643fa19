//! Path-based intrusion detection for contracts running on a small
//! EVM-like virtual machine.

pub mod analysis;
pub mod error;
pub mod fixtures;
pub mod guard;
pub mod indexing;
pub mod instrument;
pub mod pathset;
mod serde_pairs;
pub mod vm;
pub mod word;

pub use error::{Error, Result};
pub use word::{Width, Word};
