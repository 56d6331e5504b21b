// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model and dataset file formats, graph validation and canonization.

pub mod blob;
pub mod canonize;
pub mod dataset;
pub mod graph;
pub mod manifest;

use std::path::Path;

pub use blob::{StoredTensor, TensorStore};
pub use canonize::canonize;
pub use dataset::DatasetContainer;
pub use graph::{BatchNormParams, ConvParams, DenseParams, ModelGraph, Node, NodeInput, Op, PoolParams};
pub use manifest::{LayerKind, LayerSpec, Manifest, INPUT_ID};

use crate::error::Result;

/// Loads an uncanonized graph. See [`ModelGraph::load`].
pub fn load_model(manifest_path: impl AsRef<Path>, weights_path: impl AsRef<Path>) -> Result<ModelGraph> {
    ModelGraph::load(manifest_path, weights_path)
}

/// Loads a dataset container. See [`DatasetContainer::load`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetContainer> {
    DatasetContainer::load(path)
}
