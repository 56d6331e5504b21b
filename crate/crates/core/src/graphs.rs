// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hierarchical attribution graphs: a concept and the lower-layer concepts
//! its relevance flows into, expanded as a tree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::{attribute_with, linear_below, ConditionSet, InitSpec, RuleComposite};
use crate::error::{CrpError, Result};
use crate::forward::ActivationTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub layer: String,
    pub channel: usize,
    /// Relevance reaching this channel along the path from the root.
    pub relevance: f64,
    pub depth: usize,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// Child relevance over parent relevance.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionGraph {
    pub conditions: ConditionSet,
    pub depth: usize,
    pub children: usize,
    pub ascending: bool,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl AttributionGraph {
    pub fn root(&self) -> &GraphNode {
        &self.nodes[0]
    }

    pub fn children_of(&self, id: usize) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(move |n| n.parent == Some(id))
    }
}

/// Parent id, node index, channel, relevance and path condition.
type Child = (usize, usize, usize, f64, ConditionSet);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphParams {
    /// Levels below the root.
    pub depth: usize,
    /// Children kept per node.
    pub children: usize,
    /// Keep the most negative children instead of the most positive.
    pub ascending: bool,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            depth: 2,
            children: 3,
            ascending: false,
        }
    }
}

/// Expands `(layer, channel)` downwards. Each node's children are the
/// channels of the linear layers directly below it, scored by the relevance
/// they receive when the pass is conditioned on every channel of the path
/// from the root. Paths never merge, so the result is a tree.
pub fn build_graph(
    trace: &ActivationTrace<'_>,
    cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
    layer: &str,
    channel: usize,
    params: GraphParams,
) -> Result<AttributionGraph> {
    let graph = trace.graph();
    let li = graph.node_index(layer)?;
    if !graph.node(li).op.is_linear() {
        return Err(CrpError::InvalidArgument(format!(
            "graph roots must be convolution or dense layers; {layer} is {}",
            graph.node(li).op.kind_name()
        )));
    }
    if channel >= graph.channels(li) {
        return Err(CrpError::NotFound(format!(
            "channel {channel} in layer {layer} with {} channels",
            graph.channels(li)
        )));
    }
    if params.children == 0 {
        return Err(CrpError::InvalidArgument("children per node must be at least 1".into()));
    }
    cond.validate(graph)?;
    let resolved = rules.resolve(graph)?;
    let mut warnings = Vec::new();

    let root_cond = cond.restricted(layer, channel);
    let root_rel = attribute_with(trace, &root_cond, init, &resolved, false)?;
    let mut nodes = vec![GraphNode {
        id: 0,
        layer: layer.to_string(),
        channel,
        relevance: root_rel.node(li).channel_sums()[channel],
        depth: 0,
        parent: None,
    }];
    let mut edges = Vec::new();
    // (node id, graph index, path conditions)
    let mut frontier = vec![(0usize, li, root_cond)];

    for depth in 1..=params.depth {
        let expanded: Vec<Vec<Child>> = frontier
            .par_iter()
            .map(|(id, ni, path)| {
                let below = linear_below(graph, *ni);
                if below.is_empty() {
                    return Ok(Vec::new());
                }
                let r = attribute_with(trace, path, init, &resolved, false)?;
                let mut cands: Vec<(usize, usize, f64)> = below
                    .iter()
                    .flat_map(|&m| {
                        r.node(m)
                            .channel_sums()
                            .into_iter()
                            .enumerate()
                            .filter(move |(c, _)| path.get(&graph.node(m).id).is_none_or(|s| s.contains(c)))
                            .map(move |(c, v)| (m, c, v))
                    })
                    .collect();
                cands.sort_by(|a, b| {
                    let ord = if params.ascending {
                        a.2.total_cmp(&b.2)
                    } else {
                        b.2.total_cmp(&a.2)
                    };
                    ord.then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
                });
                cands.truncate(params.children);
                Ok(cands
                    .into_iter()
                    .map(|(m, c, v)| (*id, m, c, v, path.restricted(&graph.node(m).id, c)))
                    .collect())
            })
            .collect::<Result<_>>()?;

        let mut next = Vec::new();
        for (parent_pos, kids) in expanded.into_iter().enumerate() {
            let available: usize = linear_below(graph, frontier[parent_pos].1)
                .iter()
                .map(|&m| graph.channels(m))
                .sum();
            if available > 0 && params.children > available && warnings.is_empty() {
                let msg = format!(
                    "requested {} children but only {available} channels lie below {}; keeping all",
                    params.children,
                    graph.node(frontier[parent_pos].1).id
                );
                tracing::warn!("{msg}");
                warnings.push(msg);
            }
            for (parent, m, c, v, path) in kids {
                let id = nodes.len();
                let parent_rel = nodes[parent].relevance;
                nodes.push(GraphNode {
                    id,
                    layer: graph.node(m).id.clone(),
                    channel: c,
                    relevance: v,
                    depth,
                    parent: Some(parent),
                });
                edges.push(GraphEdge {
                    from: parent,
                    to: id,
                    weight: if parent_rel != 0.0 { v / parent_rel } else { 0.0 },
                });
                next.push((id, m, path));
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }

    Ok(AttributionGraph {
        conditions: cond.clone(),
        depth: params.depth,
        children: params.children,
        ascending: params.ascending,
        nodes,
        edges,
        warnings,
    })
}

/// Pretty-printed JSON.
pub fn export_graph(graph: &AttributionGraph) -> Result<String> {
    serde_json::to_string_pretty(graph).map_err(|e| CrpError::parse(e.to_string()))
}
