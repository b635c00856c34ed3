pub mod acceptance;
pub mod bsde;
pub mod dynamics;
pub mod error;
pub mod lattice;
pub mod lq;
pub mod noise;
pub mod smp;

pub use error::{Error, Result};
pub use nalgebra::DMatrix;
