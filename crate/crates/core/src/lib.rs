//! Multi-view clustering through a shared consistent representation
//! learned with variational information bottleneck and cluster-level
//! contrastive objectives.

pub mod cli;
pub mod error;
pub mod eval;
pub mod kv;
pub mod losses;
pub mod model;
pub mod mvdata;
pub mod network;
pub mod train;

pub use error::{Error, Result};
