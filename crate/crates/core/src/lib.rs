pub mod augment;
pub mod dataio;
pub mod error;
pub mod seed;

pub use error::{Result, SslError};
pub mod backbone;
pub mod pretext;
pub mod harness;
