// `!(x >= 0.0)` checks are deliberate: they also reject NaN.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod attacks;
pub mod checkpoint;
pub mod cli;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod perceptual;
pub mod report;
pub mod rlat;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
