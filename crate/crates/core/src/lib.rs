pub mod attribution;
pub mod error;
pub mod montage;
pub mod numerics;
pub mod preprocess;
pub mod synthdata;
pub mod training;
pub mod trial;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
