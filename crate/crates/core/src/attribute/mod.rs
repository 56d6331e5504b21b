// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-conditional relevance propagation.
//!
//! [`attribute`] walks the graph once in reverse topological order. At every
//! node the incoming relevance is summed over consumers, channels outside the
//! node's condition are zeroed, the result is optionally rescaled to unit
//! absolute sum, and it is then pushed to the node's operands through the
//! node's rule.

mod flow;
pub mod rules;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CrpError, Result};
use crate::forward::ActivationTrace;
use crate::model_io::{ModelGraph, NodeInput, Op};
use crate::tensor::Tensor;

pub(crate) use flow::linear_below;
pub use flow::{decompose_channel_flow, FlowMatrix};
pub use rules::{Rule, RuleComposite, DEFAULT_EPSILON};

/// Per-layer channel selections. Channels within a layer combine as OR,
/// layers combine as AND.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionSet {
    layers: BTreeMap<String, BTreeSet<usize>>,
}

impl ConditionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `channels` to the selection of `layer`.
    pub fn with(mut self, layer: impl Into<String>, channels: impl IntoIterator<Item = usize>) -> Self {
        self.insert(layer, channels);
        self
    }

    pub fn insert(&mut self, layer: impl Into<String>, channels: impl IntoIterator<Item = usize>) {
        self.layers.entry(layer.into()).or_default().extend(channels);
    }

    /// Copy of `self` whose selection at `layer` is exactly `{channel}`.
    pub fn restricted(&self, layer: &str, channel: usize) -> Self {
        let mut c = self.clone();
        c.layers.insert(layer.to_string(), BTreeSet::from([channel]));
        c
    }

    pub fn get(&self, layer: &str) -> Option<&BTreeSet<usize>> {
        self.layers.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<usize>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Parses `layer:ch[,ch...]`.
    pub fn parse_entry(&mut self, s: &str) -> Result<()> {
        let (layer, chans) = s
            .rsplit_once(':')
            .ok_or_else(|| CrpError::Condition(format!("expected layer:ch[,ch...], got {s:?}")))?;
        if layer.is_empty() {
            return Err(CrpError::Condition(format!("missing layer in {s:?}")));
        }
        let channels = chans
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<usize>()
                    .map_err(|_| CrpError::Condition(format!("bad channel {c:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.insert(layer, channels);
        Ok(())
    }

    /// Checks layers and channel indices against `graph`; returns the
    /// resolved node index per entry.
    pub fn validate(&self, graph: &ModelGraph) -> Result<Vec<(usize, &BTreeSet<usize>)>> {
        self.layers
            .iter()
            .map(|(layer, set)| {
                let i = graph
                    .node_index(layer)
                    .map_err(|_| CrpError::Condition(format!("unknown layer {layer:?}")))?;
                let c = graph.channels(i);
                if set.is_empty() {
                    return Err(CrpError::Condition(format!("empty channel set for layer {layer}")));
                }
                if let Some(bad) = set.iter().find(|&&ch| ch >= c) {
                    return Err(CrpError::Condition(format!(
                        "channel {bad} out of range for layer {layer} with {c} channels"
                    )));
                }
                Ok((i, set))
            })
            .collect()
    }
}

impl fmt::Display for ConditionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|(l, s)| {
                let chans: Vec<String> = s.iter().map(usize::to_string).collect();
                format!("{l}:{}", chans.join(","))
            })
            .collect();
        f.write_str(&parts.join(";"))
    }
}

/// Where the backward pass starts and with which relevance.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    /// The logit of `class`, all other outputs zero.
    Logit(usize),
    /// One at `class`, zero elsewhere.
    OneHot(usize),
    /// Explicit output relevance.
    Vector(Tensor<f64>),
    /// Activations of an interior layer, restricted to one channel when given.
    LayerActivation { layer: String, channel: Option<usize> },
    /// Explicit relevance at an interior layer.
    Layer { layer: String, relevance: Tensor<f64> },
}

impl InitSpec {
    fn resolve(&self, trace: &ActivationTrace<'_>) -> Result<(usize, Vec<f64>)> {
        let g = trace.graph();
        let out = g.output_index();
        let n = g.num_outputs();
        let class_check = |c: usize| {
            if c < n {
                Ok(())
            } else {
                Err(CrpError::Condition(format!(
                    "class {c} out of range for a model with {n} outputs"
                )))
            }
        };
        match self {
            InitSpec::Logit(c) => {
                class_check(*c)?;
                let mut r = vec![0.0; n];
                r[*c] = trace.logits().data()[*c] as f64;
                Ok((out, r))
            }
            InitSpec::OneHot(c) => {
                class_check(*c)?;
                let mut r = vec![0.0; n];
                r[*c] = 1.0;
                Ok((out, r))
            }
            InitSpec::Vector(v) => {
                if v.len() != n {
                    return Err(CrpError::Condition(format!(
                        "init vector has length {}, model has {n} outputs",
                        v.len()
                    )));
                }
                Ok((out, v.data().to_vec()))
            }
            InitSpec::LayerActivation { layer, channel } => {
                let i = g.node_index(layer)?;
                let a = trace.output(i);
                let c = g.channels(i);
                let plane = a.len() / c;
                if let Some(ch) = channel {
                    if *ch >= c {
                        return Err(CrpError::Condition(format!(
                            "channel {ch} out of range for layer {layer} with {c} channels"
                        )));
                    }
                }
                let r = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| match channel {
                        Some(ch) if k / plane != *ch => 0.0,
                        _ => v as f64,
                    })
                    .collect();
                Ok((i, r))
            }
            InitSpec::Layer { layer, relevance } => {
                let i = g.node_index(layer)?;
                if relevance.shape() != g.node(i).output_shape.as_slice() {
                    return Err(CrpError::Shape(format!(
                        "init relevance shape {:?} does not match layer {layer} output {:?}",
                        relevance.shape(),
                        g.node(i).output_shape
                    )));
                }
                Ok((i, relevance.data().to_vec()))
            }
        }
    }
}

/// Per-node relevance of one conditional backward pass.
#[derive(Debug, Clone)]
pub struct RelevanceTrace<'g> {
    graph: &'g ModelGraph,
    nodes: Vec<Tensor<f64>>,
    input: Tensor<f64>,
}

impl<'g> RelevanceTrace<'g> {
    pub fn graph(&self) -> &'g ModelGraph {
        self.graph
    }

    pub fn node(&self, index: usize) -> &Tensor<f64> {
        &self.nodes[index]
    }

    pub fn get(&self, layer: &str) -> Result<&Tensor<f64>> {
        Ok(&self.nodes[self.graph.node_index(layer)?])
    }

    /// Input-space relevance, same shape as the model input.
    pub fn input(&self) -> &Tensor<f64> {
        &self.input
    }

    /// Input relevance summed over channels, shape `(H, W)`.
    pub fn heatmap(&self) -> Tensor<f64> {
        self.input.sum_over_channels().expect("input has a spatial view")
    }

    /// Spatially summed relevance per channel of `layer`.
    pub fn channel_relevance(&self, layer: &str) -> Result<Vec<f64>> {
        Ok(self.get(layer)?.channel_sums())
    }

    /// Total relevance per layer id, plus `"input"`.
    pub fn layer_sums(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self
            .graph
            .nodes()
            .iter()
            .zip(&self.nodes)
            .map(|(n, r)| (n.id.clone(), r.sum()))
            .collect();
        m.insert(crate::model_io::INPUT_ID.to_string(), self.input.sum());
        m
    }

    pub fn into_input(self) -> Tensor<f64> {
        self.input
    }
}

/// Runs one conditional backward pass over `trace`.
pub fn attribute<'g>(
    trace: &ActivationTrace<'g>,
    cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
    normalize_per_layer: bool,
) -> Result<RelevanceTrace<'g>> {
    let graph = trace.graph();
    let resolved = rules.resolve(graph)?;
    attribute_with(trace, cond, init, &resolved, normalize_per_layer)
}

/// [`attribute`] with rules already resolved per node.
pub fn attribute_with<'g>(
    trace: &ActivationTrace<'g>,
    cond: &ConditionSet,
    init: &InitSpec,
    rules: &[Rule],
    normalize_per_layer: bool,
) -> Result<RelevanceTrace<'g>> {
    let graph = trace.graph();
    if rules.len() != graph.len() {
        return Err(CrpError::Rule(format!(
            "{} rules resolved for a graph of {} nodes",
            rules.len(),
            graph.len()
        )));
    }
    let (start, r0) = init.resolve(trace)?;
    let mut masks: Vec<Option<&BTreeSet<usize>>> = vec![None; graph.len()];
    for (i, set) in cond.validate(graph)? {
        if i > start {
            return Err(CrpError::Condition(format!(
                "condition unreachable: layer {} lies above the initialization layer {}",
                graph.node(i).id,
                graph.node(start).id
            )));
        }
        masks[i] = Some(set);
    }

    let mut bufs: Vec<Option<Vec<f64>>> = vec![None; graph.len()];
    bufs[start] = Some(r0);
    let mut input_buf = vec![0f64; trace.input().len()];
    let mut nodes: Vec<Option<Tensor<f64>>> = vec![None; graph.len()];

    for i in (0..graph.len()).rev() {
        let node = graph.node(i);
        let shape = node.output_shape.clone();
        let Some(mut r) = bufs[i].take() else {
            nodes[i] = Some(Tensor::zeros(&shape)?);
            continue;
        };
        if let Some(set) = masks[i] {
            let plane = r.len() / graph.channels(i);
            for (k, v) in r.iter_mut().enumerate() {
                if !set.contains(&(k / plane)) {
                    *v = 0.0;
                }
            }
        }
        if normalize_per_layer {
            let s: f64 = r.iter().map(|v| v.abs()).sum();
            if s > 1e-12 {
                r.iter_mut().for_each(|v| *v /= s);
            }
        }
        propagate(trace, i, rules[i], &r, &mut bufs, &mut input_buf)?;
        nodes[i] = Some(Tensor::new(shape, r)?);
    }

    let input = Tensor::new(trace.input().shape().to_vec(), input_buf)?;
    Ok(RelevanceTrace {
        graph,
        nodes: nodes.into_iter().map(|t| t.expect("every node visited")).collect(),
        input,
    })
}

/// Relevance that flows through individual channels of one layer.
#[derive(Debug, Clone)]
pub struct ChannelSplit {
    /// Spatially summed relevance of every channel of the layer.
    pub layer_relevance: Vec<f64>,
    /// Input relevance per requested channel, in request order.
    pub inputs: Vec<Tensor<f64>>,
}

/// Input relevance of each channel in `channels` of `layer`, conditioned on
/// `cond` everywhere else.
///
/// The pass above `layer` is shared; each channel then propagates only its
/// own share downwards. On graphs without connections that bypass `layer`
/// this equals [`attribute`] with the condition at `layer` replaced by the
/// single channel, and the per-channel maps sum to the unconditioned map.
pub fn channel_input_relevance(
    trace: &ActivationTrace<'_>,
    cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
    layer: &str,
    channels: &[usize],
) -> Result<ChannelSplit> {
    use rayon::prelude::*;

    let graph = trace.graph();
    let li = graph.node_index(layer)?;
    let c = graph.channels(li);
    if let Some(bad) = channels.iter().find(|&&ch| ch >= c) {
        return Err(CrpError::Condition(format!(
            "channel {bad} out of range for layer {layer} with {c} channels"
        )));
    }
    let resolved = rules.resolve(graph)?;
    let full = attribute_with(trace, cond, init, &resolved, false)?;
    let r = full.node(li);
    let plane = r.len() / c;
    let mut below = ConditionSet::new();
    for (l, set) in cond.iter() {
        if graph.node_index(l)? < li {
            below.insert(l, set.iter().copied());
        }
    }
    let inputs = channels
        .par_iter()
        .map(|&ch| {
            let data = r
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| if k / plane == ch { v } else { 0.0 })
                .collect();
            let init = InitSpec::Layer {
                layer: layer.to_string(),
                relevance: Tensor::new(r.shape().to_vec(), data)?,
            };
            Ok(attribute_with(trace, &below, &init, &resolved, false)?.into_input())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSplit {
        layer_relevance: r.channel_sums(),
        inputs,
    })
}

fn accumulate(target: NodeInput, r: Vec<f64>, bufs: &mut [Option<Vec<f64>>], input_buf: &mut [f64]) {
    let dst: &mut [f64] = match target {
        NodeInput::Input => input_buf,
        NodeInput::Node(j) => match &mut bufs[j] {
            Some(b) => b,
            slot @ None => {
                *slot = Some(r);
                return;
            }
        },
    };
    for (d, v) in dst.iter_mut().zip(r) {
        *d += v;
    }
}

fn propagate(
    trace: &ActivationTrace<'_>,
    i: usize,
    rule: Rule,
    r: &[f64],
    bufs: &mut [Option<Vec<f64>>],
    input_buf: &mut [f64],
) -> Result<()> {
    let node = trace.graph().node(i);
    let x = trace.operand(i, 0);
    let r_in = match &node.op {
        Op::Conv(p) => rules::conv_backward(p, x.data(), x.shape(), r, rule)?,
        Op::Dense(p) => rules::dense_backward(p, x.data(), r, rule)?,
        Op::Relu | Op::Flatten => r.to_vec(),
        Op::MaxPool(p) => rules::maxpool_backward(p, x.shape(), trace.argmax(i), r, rule)?,
        Op::AvgPool(p) => rules::avgpool_backward(p, x.data(), x.shape(), r, rule)?,
        Op::Add => {
            let b = trace.operand(i, 1);
            let (ra, rb) = rules::add_backward(x.data(), b.data(), r, rule)?;
            accumulate(node.inputs[1], rb, bufs, input_buf);
            ra
        }
        Op::BatchNorm(_) => {
            return Err(CrpError::Rule(format!(
                "layer {} is a batchnorm; canonize the model before attribution",
                node.id
            )))
        }
    };
    accumulate(node.inputs[0], r_in, bufs, input_buf);
    Ok(())
}
