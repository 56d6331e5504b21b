// SPDX-License-Identifier: MIT OR Apache-2.0

//! Channel-to-channel relevance flow between two adjacent analyzed layers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attribute_with, ConditionSet, InitSpec, RuleComposite};
use crate::error::{CrpError, Result};
use crate::forward::ActivationTrace;
use crate::model_io::{ModelGraph, NodeInput};
use crate::tensor::Tensor;

/// `values[i][k]` is the relevance flowing from upper channel
/// `upper_channels[k]` into lower channel `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub upper: String,
    pub lower: String,
    pub upper_channels: Vec<usize>,
    /// Spatially summed relevance of each selected upper channel.
    pub upper_relevance: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl FlowMatrix {
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.upper_channels.len())
            .map(|k| self.values.iter().map(|row| row[k]).sum())
            .collect()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[k]).collect()
    }
}

/// True if `lower` is reached from `upper` by walking operands without
/// crossing another conv or dense node.
pub(crate) fn adjacent(graph: &ModelGraph, upper: usize, lower: usize) -> bool {
    linear_below(graph, upper).contains(&lower)
}

/// Linear nodes reachable from `upper` without crossing another linear
/// node, in ascending graph order.
pub(crate) fn linear_below(graph: &ModelGraph, upper: usize) -> Vec<usize> {
    let mut stack: Vec<usize> = Vec::new();
    let mut seen = vec![false; graph.len()];
    let mut found = Vec::new();
    let push = |stack: &mut Vec<usize>, seen: &mut Vec<bool>, n: usize| {
        for inp in &graph.node(n).inputs {
            if let NodeInput::Node(j) = *inp {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    };
    push(&mut stack, &mut seen, upper);
    while let Some(n) = stack.pop() {
        if graph.node(n).op.is_linear() {
            found.push(n);
        } else {
            push(&mut stack, &mut seen, n);
        }
    }
    found.sort_unstable();
    found
}

/// Relevance flow from each selected channel of `upper` to every channel of
/// `lower`. Upper channels are those selected by `cond` at `upper`, or all.
pub fn decompose_channel_flow(
    trace: &ActivationTrace<'_>,
    cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
    upper: &str,
    lower: &str,
) -> Result<FlowMatrix> {
    let graph = trace.graph();
    let ui = graph.node_index(upper)?;
    let li = graph.node_index(lower)?;
    if !adjacent(graph, ui, li) {
        return Err(CrpError::Graph(format!(
            "layers {lower} and {upper} are not adjacent: another conv or dense layer lies between them or {lower} does not feed {upper}"
        )));
    }
    let resolved = rules.resolve(graph)?;
    let full = attribute_with(trace, cond, init, &resolved, false)?;
    let r_upper = full.node(ui);
    let c_up = graph.channels(ui);
    let plane = r_upper.len() / c_up;
    let upper_channels: Vec<usize> = match cond.get(upper) {
        Some(set) => set.iter().copied().collect(),
        None => (0..c_up).collect(),
    };

    let mut below = ConditionSet::new();
    for (layer, set) in cond.iter() {
        if graph.node_index(layer)? < ui {
            below.insert(layer, set.iter().copied());
        }
    }

    let columns: Vec<Vec<f64>> = upper_channels
        .par_iter()
        .map(|&j| {
            let data = r_upper
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| if k / plane == j { v } else { 0.0 })
                .collect();
            let relevance = Tensor::new(r_upper.shape().to_vec(), data)?;
            let init = InitSpec::Layer {
                layer: upper.to_string(),
                relevance,
            };
            let t = attribute_with(trace, &below, &init, &resolved, false)?;
            Ok(t.node(li).channel_sums())
        })
        .collect::<Result<_>>()?;

    let c_low = graph.channels(li);
    let values = (0..c_low).map(|i| columns.iter().map(|col| col[i]).collect()).collect();
    let sums = r_upper.channel_sums();
    Ok(FlowMatrix {
        upper: upper.to_string(),
        lower: lower.to_string(),
        upper_relevance: upper_channels.iter().map(|&j| sums[j]).collect(),
        upper_channels,
        values,
    })
}
