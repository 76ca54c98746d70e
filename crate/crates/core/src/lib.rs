pub mod error;
pub mod estimate;
pub mod gwi;
pub mod harness;
pub mod models;
pub mod mvn_cdf;
pub mod numeric;
pub mod sequences;
pub mod skewlink;

pub use error::{Error, Result};
pub use estimate::{ApproxResult, Status};
