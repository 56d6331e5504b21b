// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON model manifest.
//!
//! A manifest lists layers in any order that respects their `inputs`
//! references; the implicit graph input is called `input`. When `inputs` is
//! omitted a layer consumes the layer listed right before it (or the graph
//! input for the first layer). Serializing a parsed manifest reproduces its
//! canonical form byte for byte.

use serde::{Deserialize, Serialize};

use crate::error::{CrpError, Result};

/// Reserved id of the graph input.
pub const INPUT_ID: &str = "input";
pub const FORMAT_NAME: &str = "crp-model";
pub const FORMAT_VERSION: u32 = 1;

fn default_layout() -> String {
    "channels_first".to_string()
}

fn ones2() -> [usize; 2] {
    [1, 1]
}

fn one() -> usize {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub input_shape: Vec<usize>,
    #[serde(default = "default_layout")]
    pub layout: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub canonized: bool,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    #[serde(rename = "conv2d")]
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "ones2")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    #[serde(rename = "conv1d")]
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    #[serde(rename = "dense")]
    Dense {
        in_features: usize,
        out_features: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        kernel: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<[usize; 2]>,
    },
    #[serde(rename = "avgpool2d")]
    AvgPool2d {
        kernel: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<[usize; 2]>,
    },
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "batchnorm")]
    BatchNorm {
        num_features: usize,
        eps: f64,
        gamma: String,
        beta: String,
        mean: String,
        var: String,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Conv1d { .. } => "conv1d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::BatchNorm { .. } => "batchnorm",
        }
    }
}

impl Manifest {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            name: None,
            input_shape,
            layout: default_layout(),
            canonized: false,
            layers,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| CrpError::parse(format!("manifest: {e}")))?;
        if m.format != FORMAT_NAME {
            return Err(CrpError::parse(format!(
                "manifest format must be {FORMAT_NAME:?}, got {:?}",
                m.format
            )));
        }
        if m.version != FORMAT_VERSION {
            return Err(CrpError::parse(format!("unsupported manifest version {}", m.version)));
        }
        if m.layout != "channels_first" {
            return Err(CrpError::parse(format!(
                "unsupported layout {:?}; only channels_first is supported",
                m.layout
            )));
        }
        Ok(m)
    }

    /// Canonical pretty-printed JSON with a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, inputs: &[&str], kind: LayerKind) -> Self {
        Self {
            id: id.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            kind,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MLP: &str = r#"{
  "format": "crp-model",
  "version": 1,
  "input_shape": [
    4
  ],
  "layout": "channels_first",
  "layers": [
    {
      "id": "fc1",
      "kind": "dense",
      "in_features": 4,
      "out_features": 3,
      "weight": "fc1.w",
      "bias": "fc1.b"
    },
    {
      "id": "relu1",
      "kind": "relu"
    },
    {
      "id": "fc2",
      "inputs": [
        "relu1"
      ],
      "kind": "dense",
      "in_features": 3,
      "out_features": 2,
      "weight": "fc2.w"
    }
  ]
}
"#;

    #[test]
    fn canonical_manifest_round_trips_byte_identical() {
        let m = Manifest::from_json(MLP).unwrap();
        assert_eq!(m.layers.len(), 3);
        assert_eq!(m.layers[1].kind, LayerKind::Relu);
        assert_eq!(m.to_canonical_json(), MLP);
    }

    #[test]
    fn unknown_kind_is_a_parse_error() {
        let bad = MLP.replace("\"relu\"", "\"gelu\"");
        let err = Manifest::from_json(&bad).unwrap_err();
        assert!(matches!(err, CrpError::Parse { .. }), "{err}");
    }

    #[test]
    fn defaults_fill_in_stride_and_padding() {
        let text = r#"{"format":"crp-model","version":1,"input_shape":[1,5,5],
            "layers":[{"id":"c","kind":"conv2d","in_channels":1,"out_channels":1,"kernel":[3,3],"weight":"c.w"}]}"#;
        let m = Manifest::from_json(text).unwrap();
        match &m.layers[0].kind {
            LayerKind::Conv2d { stride, padding, .. } => {
                assert_eq!(*stride, [1, 1]);
                assert_eq!(*padding, [0, 0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
