//! Learning model predictive control for predictive cruise control on
//! repeated routes with an unknown road grade.

pub mod config;
pub mod dp;
pub mod error;
pub mod grade;
pub mod harness;
pub mod io;
pub mod lmpc;
pub mod memory;
pub mod ocp;
pub mod polyfit;
pub mod qp;
pub mod route;
pub mod vehicle;

pub use error::{Error, Result};
