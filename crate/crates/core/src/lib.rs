//! Channel-selective feature inversion for a small frozen ReLU CNN, corrected by
//! per-channel GroupNorm strips (LACs) at every stride boundary of the backward
//! cascade, together with the analyses built on top of it.

pub mod attention;
pub mod covvol;
pub mod encoder;
pub mod error;
pub mod interference;
pub mod io;
pub mod lac;
pub mod math;
pub mod par;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
