// SPDX-License-Identifier: MIT OR Apache-2.0

//! Programmatic construction of model graphs through the manifest path.

use rand::Rng;

use crate::error::Result;
use crate::model_io::{LayerKind, LayerSpec, Manifest, ModelGraph, TensorStore};
use crate::tensor::Tensor;

/// Accumulates layer specs and weights, then validates them exactly like a
/// manifest loaded from disk.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    name: Option<String>,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    store: TensorStore,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            name: None,
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            store: TensorStore::new(),
        }
    }

    pub fn name(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    fn tensor(&mut self, id: &str, suffix: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<String> {
        let name = format!("{id}.{suffix}");
        self.store.insert_f32(name.clone(), Tensor::new(shape, data)?);
        Ok(name)
    }

    fn push(mut self, id: &str, inputs: &[&str], kind: LayerKind) -> Self {
        self.layers.push(LayerSpec::new(id, inputs, kind));
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        mut self,
        id: &str,
        inputs: &[&str],
        channels: (usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        let (i, o) = channels;
        let weight = self.tensor(id, "weight", vec![o, i, kernel, kernel], weight)?;
        let bias = bias.map(|b| self.tensor(id, "bias", vec![o], b)).transpose()?;
        Ok(self.push(
            id,
            inputs,
            LayerKind::Conv2d {
                in_channels: i,
                out_channels: o,
                kernel: [kernel, kernel],
                stride: [stride, stride],
                padding: [padding, padding],
                weight,
                bias,
            },
        ))
    }

    pub fn dense(
        mut self,
        id: &str,
        inputs: &[&str],
        features: (usize, usize),
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        let (i, o) = features;
        let weight = self.tensor(id, "weight", vec![o, i], weight)?;
        let bias = bias.map(|b| self.tensor(id, "bias", vec![o], b)).transpose()?;
        Ok(self.push(
            id,
            inputs,
            LayerKind::Dense {
                in_features: i,
                out_features: o,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(self, id: &str, inputs: &[&str]) -> Self {
        self.push(id, inputs, LayerKind::Relu)
    }

    pub fn maxpool(self, id: &str, inputs: &[&str], kernel: usize, stride: usize) -> Self {
        self.push(
            id,
            inputs,
            LayerKind::MaxPool2d {
                kernel: [kernel, kernel],
                stride: Some([stride, stride]),
            },
        )
    }

    pub fn avgpool(self, id: &str, inputs: &[&str], kernel: usize, stride: usize) -> Self {
        self.push(
            id,
            inputs,
            LayerKind::AvgPool2d {
                kernel: [kernel, kernel],
                stride: Some([stride, stride]),
            },
        )
    }

    pub fn flatten(self, id: &str, inputs: &[&str]) -> Self {
        self.push(id, inputs, LayerKind::Flatten)
    }

    pub fn add(self, id: &str, a: &str, b: &str) -> Self {
        self.push(id, &[a, b], LayerKind::Add)
    }

    /// Batchnorm parameters as `(gamma, beta, mean, var)`.
    pub fn batchnorm(mut self, id: &str, inputs: &[&str], params: [Vec<f32>; 4], eps: f64) -> Result<Self> {
        let c = params[0].len();
        let [g, b, m, v] = params;
        let gamma = self.tensor(id, "gamma", vec![c], g)?;
        let beta = self.tensor(id, "beta", vec![c], b)?;
        let mean = self.tensor(id, "mean", vec![c], m)?;
        let var = self.tensor(id, "var", vec![c], v)?;
        Ok(self.push(
            id,
            inputs,
            LayerKind::BatchNorm {
                num_features: c,
                eps,
                gamma,
                beta,
                mean,
                var,
            },
        ))
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(self.input_shape.clone(), self.layers.clone());
        m.name = self.name.clone();
        m
    }

    pub fn build(&self) -> Result<ModelGraph> {
        ModelGraph::from_parts(&self.manifest(), &self.store)
    }
}

/// `n` values drawn uniformly from `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
