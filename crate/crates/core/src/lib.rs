#![no_std]

extern crate alloc;

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod cowkv;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
