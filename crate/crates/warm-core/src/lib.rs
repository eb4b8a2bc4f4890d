//! Weight-averaged reward models on a synthetic preference world.
//!
//! Data comes from [`synth`]. Reward nets are trained in [`net`] with the
//! Bradley-Terry loss, and [`combine`] averages them by weights or by
//! predictions. Closed-form limits live in [`theory`].
//!
//! [`align`] optimizes policies against a proxy reward.

// `!(x > 0.0)` is how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod combine;
pub mod error;
mod fmt;
pub mod linalg;
pub mod net;
pub mod recipe;
pub mod rng;
pub mod synth;
pub mod theory;

pub use error::{Result, WarmError};
pub use fmt::{f17, f17_array};
pub use net::{Reward, Weights};
pub use rng::RngState;
