pub mod cli;
pub mod comparators;
pub mod data;
pub mod effects;
pub mod emfit;
pub mod error;
pub mod fpt;
pub mod latentmodel;
pub mod math;
pub mod optim;
pub mod quad;
pub mod sensitivity;
pub mod simlab;

pub use error::{Error, Result};
