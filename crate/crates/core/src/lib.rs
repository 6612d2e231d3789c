#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod regularizers;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
