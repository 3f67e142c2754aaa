pub mod bench;
pub mod csv_io;
pub mod data;
pub mod dgp;
pub mod error;
pub mod forest;
pub mod kernels;
pub mod linalg;
pub mod rkhs;
pub mod rng;
pub mod shape;
pub mod sparse;

pub use data::{Dataset, HyperParams, Model};
pub use error::{Error, Result};
