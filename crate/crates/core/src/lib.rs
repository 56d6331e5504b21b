// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-conditional relevance propagation for feed-forward networks.
//!
//! The crate loads models from a JSON manifest plus a binary weight blob,
//! runs inference while recording activations, and propagates relevance
//! backwards under per-layer channel conditions. On top of that sit
//! reference-sample mining, spatial analysis, attribution graphs and
//! evaluation experiments.

pub mod attribute;
pub mod concepts;
pub mod error;
pub mod evaluate;
pub mod fixtures;
pub mod forward;
pub mod graphs;
pub mod localize;
pub mod model_io;
pub mod render;
pub mod tensor;

pub use error::{CrpError, Result};
