//! Desk-scale federated learning simulator: FedAvg/FedAvgM with SAM/ASAM
//! local training, server-side SWA, and Hessian and loss-landscape
//! diagnostics.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod models;
pub mod optim;

pub use error::{Error, Result};
