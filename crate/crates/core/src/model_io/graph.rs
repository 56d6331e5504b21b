// SPDX-License-Identifier: MIT OR Apache-2.0

//! Validated layer graph built from a manifest and a weight store.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use crate::error::{CrpError, Result};
use crate::model_io::blob::{fingerprint, TensorStore};
use crate::model_io::manifest::{LayerKind, LayerSpec, Manifest, INPUT_ID};
use crate::tensor::{chw, Tensor};

/// Source of a node's operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeInput {
    /// The graph input.
    Input,
    /// Output of the node at this index in topological order.
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(out, in, kh, kw)`; 1-D convolutions use `kh = 1`.
    pub weight: Tensor<f32>,
    pub bias: Option<Tensor<f32>>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub one_d: bool,
}

impl ConvParams {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kernel(&self) -> [usize; 2] {
        [self.weight.shape()[2], self.weight.shape()[3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `(out, in)`.
    pub weight: Tensor<f32>,
    pub bias: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f64,
}

/// Operation of a resolved node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(ConvParams),
    Dense(DenseParams),
    Relu,
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    Flatten,
    Add,
    BatchNorm(BatchNormParams),
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Conv(p) if p.one_d => "conv1d",
            Op::Conv(_) => "conv2d",
            Op::Dense(_) => "dense",
            Op::Relu => "relu",
            Op::MaxPool(_) => "maxpool2d",
            Op::AvgPool(_) => "avgpool2d",
            Op::Flatten => "flatten",
            Op::Add => "add",
            Op::BatchNorm(_) => "batchnorm",
        }
    }

    /// Conv and dense nodes.
    pub fn is_linear(&self) -> bool {
        matches!(self, Op::Conv(_) | Op::Dense(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<NodeInput>,
    pub output_shape: Vec<usize>,
}

/// Validated feed-forward graph in deterministic topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: Option<String>,
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    consumers: Vec<Vec<usize>>,
    input_consumers: Vec<usize>,
    index: HashMap<String, usize>,
    output: usize,
    canonized: bool,
}

impl ModelGraph {
    /// Loads an uncanonized graph from a manifest file and a CRPW weight blob.
    pub fn load(manifest_path: impl AsRef<Path>, weights_path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest = Manifest::from_json(&text)?;
        let store = TensorStore::read(weights_path)?;
        Self::from_parts(&manifest, &store)
    }

    pub fn from_parts(manifest: &Manifest, store: &TensorStore) -> Result<Self> {
        if manifest.input_shape.is_empty() || manifest.input_shape.len() > 3 {
            return Err(CrpError::parse(format!(
                "input_shape must have rank 1..=3, got {:?}",
                manifest.input_shape
            )));
        }
        if manifest.input_shape.contains(&0) {
            return Err(CrpError::parse("input_shape has a zero extent"));
        }
        let specs = &manifest.layers;
        if specs.is_empty() {
            return Err(CrpError::parse("manifest has no layers"));
        }

        // Resolve operand ids to manifest positions.
        let mut by_id: HashMap<&str, usize> = HashMap::new();
        for (i, spec) in specs.iter().enumerate() {
            if spec.id == INPUT_ID {
                return Err(CrpError::parse_in(&spec.id, "layer id `input` is reserved"));
            }
            if spec.id.is_empty() {
                return Err(CrpError::parse(format!("layer {i} has an empty id")));
            }
            if by_id.insert(spec.id.as_str(), i).is_some() {
                return Err(CrpError::parse_in(&spec.id, "duplicate layer id"));
            }
        }
        let mut operands: Vec<Vec<Option<usize>>> = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let names: Vec<&str> = if spec.inputs.is_empty() {
                vec![if i == 0 { INPUT_ID } else { specs[i - 1].id.as_str() }]
            } else {
                spec.inputs.iter().map(String::as_str).collect()
            };
            let expected = if matches!(spec.kind, LayerKind::Add) { 2 } else { 1 };
            if names.len() != expected {
                return Err(CrpError::parse_in(
                    &spec.id,
                    format!(
                        "{} layers take {expected} input(s), got {}",
                        spec.kind.name(),
                        names.len()
                    ),
                ));
            }
            let mut resolved = Vec::new();
            for n in names {
                if n == INPUT_ID {
                    resolved.push(None);
                } else {
                    match by_id.get(n) {
                        Some(&j) => resolved.push(Some(j)),
                        None => return Err(CrpError::parse_in(&spec.id, format!("unknown input layer {n:?}"))),
                    }
                }
            }
            operands.push(resolved);
        }

        let order = topological_order(specs, &operands)?;
        let mut position = vec![usize::MAX; specs.len()];
        for (pos, &m) in order.iter().enumerate() {
            position[m] = pos;
        }

        let mut nodes: Vec<Node> = Vec::with_capacity(specs.len());
        for &m in &order {
            let spec = &specs[m];
            let inputs: Vec<NodeInput> = operands[m]
                .iter()
                .map(|o| match o {
                    None => NodeInput::Input,
                    Some(j) => NodeInput::Node(position[*j]),
                })
                .collect();
            let in_shapes: Vec<Vec<usize>> = inputs
                .iter()
                .map(|i| match i {
                    NodeInput::Input => manifest.input_shape.clone(),
                    NodeInput::Node(j) => nodes[*j].output_shape.clone(),
                })
                .collect();
            let op = resolve_op(spec, store)?;
            let output_shape = infer_shape(&spec.id, &op, &in_shapes)?;
            nodes.push(Node {
                id: spec.id.clone(),
                op,
                inputs,
                output_shape,
            });
        }

        let graph = Self::assemble(
            manifest.name.clone(),
            manifest.input_shape.clone(),
            nodes,
            manifest.canonized,
        )?;
        if manifest.canonized && graph.nodes.iter().any(|n| matches!(n.op, Op::BatchNorm(_))) {
            return Err(CrpError::parse(
                "manifest is marked canonized but contains batchnorm layers",
            ));
        }
        Ok(graph)
    }

    /// Builds consumer tables and validates the single-input/single-output
    /// structure. `nodes` must already be in topological order.
    pub(crate) fn assemble(
        name: Option<String>,
        input_shape: Vec<usize>,
        nodes: Vec<Node>,
        canonized: bool,
    ) -> Result<Self> {
        let mut consumers = vec![Vec::new(); nodes.len()];
        let mut input_consumers = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            for inp in &n.inputs {
                match inp {
                    NodeInput::Input => input_consumers.push(i),
                    NodeInput::Node(j) => {
                        if *j >= i {
                            return Err(CrpError::Graph(format!("node {} is not in topological order", n.id)));
                        }
                        consumers[*j].push(i);
                    }
                }
            }
        }
        if input_consumers.is_empty() {
            return Err(CrpError::parse("no layer consumes the graph input"));
        }
        let sinks: Vec<usize> = (0..nodes.len()).filter(|&i| consumers[i].is_empty()).collect();
        let output = match sinks.as_slice() {
            [o] => *o,
            _ => {
                let ids: Vec<&str> = sinks.iter().map(|&i| nodes[i].id.as_str()).collect();
                return Err(CrpError::parse(format!(
                    "graph must have exactly one output layer, found {ids:?}"
                )));
            }
        };
        if nodes[output].output_shape.len() != 1 {
            return Err(CrpError::parse_in(
                &nodes[output].id,
                format!(
                    "output layer must produce a rank-1 logit vector, got shape {:?}",
                    nodes[output].output_shape
                ),
            ));
        }
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        Ok(Self {
            name,
            input_shape,
            nodes,
            consumers,
            input_consumers,
            index,
            output,
            canonized,
        })
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &Node {
        &self.nodes[index]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| CrpError::NotFound(format!("layer {id:?}")))
    }

    pub fn consumers(&self, index: usize) -> &[usize] {
        &self.consumers[index]
    }

    pub fn input_consumers(&self) -> &[usize] {
        &self.input_consumers
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].output_shape
    }

    pub fn num_outputs(&self) -> usize {
        self.output_shape()[0]
    }

    pub fn is_canonized(&self) -> bool {
        self.canonized
    }

    pub(crate) fn set_canonized(&mut self) {
        self.canonized = true;
    }

    /// Channel count of a node output (feature count for dense vectors).
    pub fn channels(&self, index: usize) -> usize {
        self.nodes[index].output_shape[0]
    }

    /// Ids of the conv and dense nodes in topological order.
    pub fn linear_layers(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.op.is_linear())
            .map(|n| n.id.as_str())
            .collect()
    }

    /// True if `ancestor` feeds (transitively) into `node`.
    pub fn is_ancestor(&self, ancestor: usize, node: usize) -> bool {
        if ancestor >= node {
            return false;
        }
        let mut stack = vec![node];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(n) = stack.pop() {
            for inp in &self.nodes[n].inputs {
                if let NodeInput::Node(j) = *inp {
                    if j == ancestor {
                        return true;
                    }
                    if j > ancestor && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        false
    }

    /// Serializes the graph back into a canonical manifest and weight store.
    pub fn export(&self) -> (Manifest, TensorStore) {
        let mut store = TensorStore::new();
        let mut layers = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let inputs = n
                .inputs
                .iter()
                .map(|i| match i {
                    NodeInput::Input => INPUT_ID.to_string(),
                    NodeInput::Node(j) => self.nodes[*j].id.clone(),
                })
                .collect();
            let mut put = |suffix: &str, t: Tensor<f32>| {
                let name = format!("{}.{suffix}", n.id);
                store.insert_f32(name.clone(), t);
                name
            };
            let kind = match &n.op {
                Op::Conv(p) => {
                    let [kh, kw] = p.kernel();
                    let bias = p.bias.clone().map(|b| put("bias", b));
                    if p.one_d {
                        let w = p
                            .weight
                            .clone()
                            .reshape(vec![p.out_channels(), p.in_channels(), kw])
                            .expect("conv1d weight reshape");
                        LayerKind::Conv1d {
                            in_channels: p.in_channels(),
                            out_channels: p.out_channels(),
                            kernel: kw,
                            stride: p.stride[1],
                            padding: p.padding[1],
                            weight: put("weight", w),
                            bias,
                        }
                    } else {
                        LayerKind::Conv2d {
                            in_channels: p.in_channels(),
                            out_channels: p.out_channels(),
                            kernel: [kh, kw],
                            stride: p.stride,
                            padding: p.padding,
                            weight: put("weight", p.weight.clone()),
                            bias,
                        }
                    }
                }
                Op::Dense(p) => {
                    let bias = p.bias.clone().map(|b| put("bias", b));
                    LayerKind::Dense {
                        in_features: p.weight.shape()[1],
                        out_features: p.weight.shape()[0],
                        weight: put("weight", p.weight.clone()),
                        bias,
                    }
                }
                Op::Relu => LayerKind::Relu,
                Op::MaxPool(p) => LayerKind::MaxPool2d {
                    kernel: p.kernel,
                    stride: Some(p.stride),
                },
                Op::AvgPool(p) => LayerKind::AvgPool2d {
                    kernel: p.kernel,
                    stride: Some(p.stride),
                },
                Op::Flatten => LayerKind::Flatten,
                Op::Add => LayerKind::Add,
                Op::BatchNorm(p) => {
                    let c = p.gamma.len();
                    let vec1 = |v: &Vec<f32>| Tensor::new(vec![c], v.clone()).expect("bn param");
                    LayerKind::BatchNorm {
                        num_features: c,
                        eps: p.eps,
                        gamma: put("gamma", vec1(&p.gamma)),
                        beta: put("beta", vec1(&p.beta)),
                        mean: put("mean", vec1(&p.mean)),
                        var: put("var", vec1(&p.var)),
                    }
                }
            };
            layers.push(LayerSpec {
                id: n.id.clone(),
                inputs,
                kind,
            });
        }
        let mut manifest = Manifest::new(self.input_shape.clone(), layers);
        manifest.name = self.name.clone();
        manifest.canonized = self.canonized;
        (manifest, store)
    }

    /// Writes the canonical manifest and weight blob.
    pub fn save(&self, manifest_path: impl AsRef<Path>, weights_path: impl AsRef<Path>) -> Result<()> {
        let (manifest, store) = self.export();
        std::fs::write(manifest_path, manifest.to_canonical_json())?;
        store.write(weights_path)
    }

    /// Content hash over the canonical manifest and weight blob.
    pub fn fingerprint(&self) -> String {
        let (manifest, store) = self.export();
        let blob = store.encode().expect("exported store encodes");
        fingerprint(&[manifest.to_canonical_json().as_bytes(), &blob])
    }
}

fn topological_order(specs: &[LayerSpec], operands: &[Vec<Option<usize>>]) -> Result<Vec<usize>> {
    let n = specs.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for (i, ops) in operands.iter().enumerate() {
        for j in ops.iter().flatten() {
            indegree[i] += 1;
            succ[*j].push(i);
        }
    }
    // Min-heap on manifest position keeps the order stable.
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).expect("cycle member");
        return Err(CrpError::parse_in(&specs[stuck].id, "cycle in layer graph"));
    }
    Ok(order)
}

fn expect_shape(layer: &str, what: &str, t: &Tensor<f32>, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(CrpError::parse_in(
            layer,
            format!("{what} tensor has shape {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(())
}

fn optional_bias(layer: &str, store: &TensorStore, name: &Option<String>, out: usize) -> Result<Option<Tensor<f32>>> {
    match name {
        None => Ok(None),
        Some(b) => {
            let t = store.f32(b)?.clone();
            expect_shape(layer, "bias", &t, &[out])?;
            Ok(Some(t))
        }
    }
}

fn resolve_op(spec: &LayerSpec, store: &TensorStore) -> Result<Op> {
    let id = spec.id.as_str();
    let positive = |what: &str, v: &[usize]| -> Result<()> {
        if v.contains(&0) {
            Err(CrpError::parse_in(id, format!("{what} must be positive")))
        } else {
            Ok(())
        }
    };
    Ok(match &spec.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        } => {
            positive("kernel", kernel)?;
            positive("stride", stride)?;
            let w = store.f32(weight)?.clone();
            expect_shape(id, "weight", &w, &[*out_channels, *in_channels, kernel[0], kernel[1]])?;
            Op::Conv(ConvParams {
                weight: w,
                bias: optional_bias(id, store, bias, *out_channels)?,
                stride: *stride,
                padding: *padding,
                one_d: false,
            })
        }
        LayerKind::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        } => {
            positive("kernel", &[*kernel])?;
            positive("stride", &[*stride])?;
            let w = store.f32(weight)?.clone();
            expect_shape(id, "weight", &w, &[*out_channels, *in_channels, *kernel])?;
            Op::Conv(ConvParams {
                weight: w.reshape(vec![*out_channels, *in_channels, 1, *kernel])?,
                bias: optional_bias(id, store, bias, *out_channels)?,
                stride: [1, *stride],
                padding: [0, *padding],
                one_d: true,
            })
        }
        LayerKind::Dense {
            in_features,
            out_features,
            weight,
            bias,
        } => {
            let w = store.f32(weight)?.clone();
            expect_shape(id, "weight", &w, &[*out_features, *in_features])?;
            Op::Dense(DenseParams {
                weight: w,
                bias: optional_bias(id, store, bias, *out_features)?,
            })
        }
        LayerKind::Relu => Op::Relu,
        LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
            positive("kernel", kernel)?;
            let stride = stride.unwrap_or(*kernel);
            positive("stride", &stride)?;
            let p = PoolParams {
                kernel: *kernel,
                stride,
            };
            if matches!(spec.kind, LayerKind::MaxPool2d { .. }) {
                Op::MaxPool(p)
            } else {
                Op::AvgPool(p)
            }
        }
        LayerKind::Flatten => Op::Flatten,
        LayerKind::Add => Op::Add,
        LayerKind::BatchNorm {
            num_features,
            eps,
            gamma,
            beta,
            mean,
            var,
        } => {
            if !(*eps >= 0.0) || !eps.is_finite() {
                return Err(CrpError::parse_in(id, "batchnorm eps must be finite and >= 0"));
            }
            let fetch = |name: &String| -> Result<Vec<f32>> {
                let t = store.f32(name)?;
                expect_shape(id, name, t, &[*num_features])?;
                Ok(t.data().to_vec())
            };
            let var = fetch(var)?;
            if var.iter().any(|&v| v < 0.0) {
                return Err(CrpError::parse_in(id, "batchnorm variance is negative"));
            }
            Op::BatchNorm(BatchNormParams {
                gamma: fetch(gamma)?,
                beta: fetch(beta)?,
                mean: fetch(mean)?,
                var,
                eps: *eps,
            })
        }
    })
}

fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output shape of `op` applied to inputs of the given shapes.
pub fn infer_shape(layer: &str, op: &Op, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let err = |msg: String| CrpError::Shape(format!("layer {layer}: {msg}"));
    let x = &inputs[0];
    match op {
        Op::Conv(p) => {
            let expected_rank = if p.one_d { 2 } else { 3 };
            if x.len() != expected_rank {
                return Err(err(format!(
                    "{} expects rank-{expected_rank} input, got {x:?}",
                    op.kind_name()
                )));
            }
            let (c, h, w) = chw(x)?;
            if c != p.in_channels() {
                return Err(err(format!("expects {} input channels, got {c}", p.in_channels())));
            }
            let [kh, kw] = p.kernel();
            let oh = window_out(h, kh, p.stride[0], p.padding[0]);
            let ow = window_out(w, kw, p.stride[1], p.padding[1]);
            match (oh, ow) {
                (Some(oh), Some(ow)) if p.one_d => Ok(vec![p.out_channels(), ow * oh]),
                (Some(oh), Some(ow)) => Ok(vec![p.out_channels(), oh, ow]),
                _ => Err(err(format!("kernel larger than padded input {x:?}"))),
            }
        }
        Op::Dense(p) => {
            let n: usize = x.iter().product();
            if n != p.weight.shape()[1] {
                return Err(err(format!(
                    "expects {} input features, got shape {x:?}",
                    p.weight.shape()[1]
                )));
            }
            Ok(vec![p.weight.shape()[0]])
        }
        Op::Relu => Ok(x.clone()),
        Op::MaxPool(p) | Op::AvgPool(p) => {
            if x.len() != 3 {
                return Err(err(format!("pooling expects rank-3 input, got {x:?}")));
            }
            let oh = window_out(x[1], p.kernel[0], p.stride[0], 0);
            let ow = window_out(x[2], p.kernel[1], p.stride[1], 0);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Ok(vec![x[0], oh, ow]),
                _ => Err(err(format!("pooling window larger than input {x:?}"))),
            }
        }
        Op::Flatten => Ok(vec![x.iter().product()]),
        Op::Add => {
            if inputs.len() != 2 || inputs[0] != inputs[1] {
                return Err(err(format!("add operands differ in shape: {inputs:?}")));
            }
            Ok(x.clone())
        }
        Op::BatchNorm(p) => {
            if x[0] != p.gamma.len() {
                return Err(err(format!(
                    "batchnorm over {} features, input has {} channels",
                    p.gamma.len(),
                    x[0]
                )));
            }
            Ok(x.clone())
        }
    }
}
