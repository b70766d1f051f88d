//! Learned distance metrics between whole graphs.
//!
//! A graph-transformer encoder turns each graph into a vector, a bias-free
//! distance head compares vector pairs, and triangle fixing repairs the
//! triangle inequality on the resulting distance matrix. Exact graph edit
//! distance supplies ground truth at small scale, and rank statistics score
//! the learned distances.

pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ged;
pub mod graph;
pub mod head;
pub mod model;
pub mod nearness;
pub mod pipeline;
pub mod train;
pub mod wl;

pub use error::{Error, Result};
