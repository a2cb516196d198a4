//! Raw slice kernels behind the graph operations.

pub mod conv;
pub mod lstm;
pub mod norm;
pub mod pool;
