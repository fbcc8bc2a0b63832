pub mod backbone;
pub mod datapipe;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod trainer;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
