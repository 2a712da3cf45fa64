//! Differentiable rigid-body simulation with soft contact.
//!
//! The crate is `no_std` with `alloc`. All numerics are generic over
//! [`real::Real`] so the same code runs on plain `f64` and on forward-mode
//! dual numbers.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod collision;
pub mod contact;
pub mod dynamics;
pub mod error;
pub mod integrate;
pub mod math;
pub mod model;
pub mod optimize;
pub mod real;
pub mod sensitivity;

pub use error::{ModelError, SimError};
