#![allow(dead_code)]

pub mod campaigns;
pub mod estimator;
pub mod exact;
pub mod kernels;
pub mod qp;

#[allow(unused_imports)]
pub use qp::{enumerate_active_sets, random_qp};
