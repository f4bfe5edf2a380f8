pub mod autodiff;
pub mod data;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
pub use frame::{compose, FrameBatch, SparseDepthFrame};
