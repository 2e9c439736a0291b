#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

mod error;
pub mod numerics;
pub mod pipeline;
pub mod corpus;
pub mod diffusion;
pub mod guidance;
pub mod metrics;
pub mod mve;
pub mod scene;

pub use error::{Error, Result};
