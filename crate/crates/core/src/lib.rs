//! Linearly and exponentially graded transformers.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] are the
//! numeric substrate, [`graded_space`] and [`gnn`] hold the graded algebra
//! and losses, [`transformer`] is the ungraded baseline, and
//! [`graded_transformer`] and [`training`] assemble the graded models.
//! [`harness`] backs the `gradformer` binary.

pub mod autodiff;
pub mod error;
pub mod gnn;
pub mod graded_space;
pub mod graded_transformer;
pub mod harness;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
