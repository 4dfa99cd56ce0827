pub mod artifacts;
pub mod cluster;
pub mod error;
pub mod forecast;
pub mod ingest;
pub mod model;
pub mod polybasis;
pub mod sampler;
pub mod validate;

pub use error::{Error, Result};
