//! Video transformers with separable spatio-temporal attention, built from
//! scratch on a small reverse-mode tape.
//!
//! The crate covers the full desk-scale pipeline: patchify a clip into
//! tokens, run one of four attention factorizations (joint, separable,
//! axial, spatial-only), optionally pool temporal tokens mid-network,
//! train on synthetic video tasks, inspect attention via rollout heatmaps,
//! and compare factorizations with an analytic cost model.

pub mod attention;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod patch;
pub mod pool;
pub mod rollout;
pub mod runconfig;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Precision, Tensor};
