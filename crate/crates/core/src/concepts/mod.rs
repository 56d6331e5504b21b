// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reference-sample mining: activation and relevance maximization targets,
//! the persisted reference index and class rankings per concept.

mod index;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attribute::{attribute, ConditionSet, InitSpec, RuleComposite};
use crate::error::{CrpError, Result};
use crate::forward::forward;
use crate::model_io::{DatasetContainer, ModelGraph};
use crate::tensor::Reduction;

pub use index::{build_index, query_references, IndexConfig, RankEntry, RankingKey, ReferenceIndex, ReferenceRanking};

/// Default number of stored references per concept.
pub const DEFAULT_K: usize = 40;
/// Default number of displayed references.
pub const DEFAULT_DISPLAY_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Activation,
    Relevance,
}

/// Which output the relevance of a sample is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassSource {
    /// Ground-truth label when the dataset has labels, else the prediction.
    Auto,
    Label,
    Predicted,
    Fixed(usize),
    /// One ranking per output class, each sample conditioned on that class.
    EachClass,
}

/// Start value of the relevance pass at the output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputInit {
    /// The class logit.
    #[default]
    Logit,
    /// A unit value.
    OneHot,
}

impl OutputInit {
    pub fn spec(self, class: usize) -> InitSpec {
        match self {
            OutputInit::Logit => InitSpec::Logit(class),
            OutputInit::OneHot => InitSpec::OneHot(class),
        }
    }
}

impl FromStr for OutputInit {
    type Err = CrpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Self::Logit),
            "one_hot" | "onehot" => Ok(Self::OneHot),
            _ => Err(CrpError::InvalidArgument(format!(
                "unknown init {s:?}; use logit or one_hot"
            ))),
        }
    }
}

/// What is maximized when ranking reference samples for a channel.
///
/// String form: `act_sum`, `act_max`, `rel_sum`, `rel_max`, optionally
/// followed by `@label`, `@pred`, `@class=N` or `@each` (relevance only),
/// `+relu` (activation only) and `+norm` (relevance only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaximizationTarget {
    pub basis: Basis,
    pub aggregation: Aggregation,
    pub class_source: ClassSource,
    pub normalize: bool,
    /// Clamp activations at zero before aggregating.
    pub relu: bool,
}

/// Spatial aggregation of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Max,
}

impl From<Aggregation> for Reduction {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::Sum => Reduction::Sum,
            Aggregation::Max => Reduction::Max,
        }
    }
}

impl MaximizationTarget {
    pub fn activation(aggregation: Aggregation) -> Self {
        Self {
            basis: Basis::Activation,
            aggregation,
            class_source: ClassSource::Auto,
            normalize: false,
            relu: false,
        }
    }

    pub fn relevance(aggregation: Aggregation, class_source: ClassSource) -> Self {
        Self {
            basis: Basis::Relevance,
            aggregation,
            class_source,
            normalize: false,
            relu: false,
        }
    }

    /// Replaces [`ClassSource::Auto`] by the concrete source for `data`.
    pub fn resolved(mut self, data: &DatasetContainer) -> Self {
        if self.basis == Basis::Activation {
            self.class_source = ClassSource::Auto;
        } else if self.class_source == ClassSource::Auto {
            self.class_source = if data.labels().is_some() {
                ClassSource::Label
            } else {
                ClassSource::Predicted
            };
        }
        self
    }
}

impl fmt::Display for MaximizationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = match self.basis {
            Basis::Activation => "act",
            Basis::Relevance => "rel",
        };
        let a = match self.aggregation {
            Aggregation::Sum => "sum",
            Aggregation::Max => "max",
        };
        write!(f, "{b}_{a}")?;
        if self.basis == Basis::Relevance {
            match self.class_source {
                ClassSource::Auto => {}
                ClassSource::Label => f.write_str("@label")?,
                ClassSource::Predicted => f.write_str("@pred")?,
                ClassSource::Fixed(c) => write!(f, "@class={c}")?,
                ClassSource::EachClass => f.write_str("@each")?,
            }
            if self.normalize {
                f.write_str("+norm")?;
            }
        } else if self.relu {
            f.write_str("+relu")?;
        }
        Ok(())
    }
}

impl FromStr for MaximizationTarget {
    type Err = CrpError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            CrpError::InvalidArgument(format!(
            "unknown target {s:?}; expected act_sum, act_max, rel_sum or rel_max with optional @label, @pred, @class=N, @each, +relu, +norm"
        ))
        };
        let mut parts = s.split('+');
        let head = parts.next().ok_or_else(bad)?;
        let (base, source) = match head.split_once('@') {
            Some((b, src)) => (b, Some(src)),
            None => (head, None),
        };
        let mut t = match base {
            "act_sum" => Self::activation(Aggregation::Sum),
            "act_max" => Self::activation(Aggregation::Max),
            "rel_sum" => Self::relevance(Aggregation::Sum, ClassSource::Auto),
            "rel_max" => Self::relevance(Aggregation::Max, ClassSource::Auto),
            _ => return Err(bad()),
        };
        if let Some(src) = source {
            if t.basis != Basis::Relevance {
                return Err(bad());
            }
            t.class_source = match src {
                "label" => ClassSource::Label,
                "pred" => ClassSource::Predicted,
                "each" => ClassSource::EachClass,
                _ => match src.strip_prefix("class=").map(str::parse::<usize>) {
                    Some(Ok(c)) => ClassSource::Fixed(c),
                    _ => return Err(bad()),
                },
            };
        }
        for flag in parts {
            match (flag, t.basis) {
                ("relu", Basis::Activation) => t.relu = true,
                ("norm", Basis::Relevance) => t.normalize = true,
                _ => return Err(bad()),
            }
        }
        Ok(t)
    }
}

impl Serialize for MaximizationTarget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaximizationTarget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Mean relevance of one concept per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRelevance {
    pub class: usize,
    pub mean_relevance: f64,
}

/// For every output class `y`, the mean over all samples of the summed
/// relevance of `(layer, channel)` when the pass starts at `y`. Sorted
/// descending (ties by class id).
pub fn rank_classes_for_concept(
    graph: &ModelGraph,
    data: &DatasetContainer,
    layer: &str,
    channel: usize,
    rules: &RuleComposite,
    init: OutputInit,
) -> Result<Vec<ClassRelevance>> {
    data.check_compatible(graph)?;
    let li = graph.node_index(layer)?;
    if channel >= graph.channels(li) {
        return Err(CrpError::NotFound(format!(
            "channel {channel} in layer {layer} with {} channels",
            graph.channels(li)
        )));
    }
    let classes = graph.num_outputs();
    if classes == 0 {
        return Err(CrpError::InvalidArgument("model has no output classes".into()));
    }
    let resolved = rules.resolve(graph)?;
    let per_sample: Vec<Vec<f64>> = data
        .samples()
        .par_iter()
        .map(|x| {
            let trace = forward(graph, x, &[])?;
            (0..classes)
                .map(|y| {
                    let r = crate::attribute::attribute_with(
                        &trace,
                        &ConditionSet::new(),
                        &init.spec(y),
                        &resolved,
                        false,
                    )?;
                    Ok(r.node(li).channel_sums()[channel])
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let mut out: Vec<ClassRelevance> = (0..classes)
        .map(|y| ClassRelevance {
            class: y,
            mean_relevance: per_sample.iter().map(|s| s[y]).sum::<f64>() / n,
        })
        .collect();
    out.sort_by(|a, b| {
        b.mean_relevance
            .total_cmp(&a.mean_relevance)
            .then(a.class.cmp(&b.class))
    });
    Ok(out)
}

/// Score of every channel of every layer for one sample and target.
/// Returns `scores[layer][channel]`.
pub(crate) fn sample_scores(
    trace: &crate::forward::ActivationTrace<'_>,
    layers: &[usize],
    target: &MaximizationTarget,
    class: Option<usize>,
    rules: &RuleComposite,
    init: OutputInit,
) -> Result<Vec<Vec<f64>>> {
    let reduce = |t: &crate::tensor::Tensor<f64>| -> Result<Vec<f64>> {
        Ok(t.reduce_channels(target.aggregation.into()).into_data())
    };
    match target.basis {
        Basis::Activation => layers
            .iter()
            .map(|&l| {
                let a = trace.output(l).to_f64();
                let a = if target.relu { a.map(|v| v.max(0.0)) } else { a };
                reduce(&a)
            })
            .collect(),
        Basis::Relevance => {
            let class = class.expect("relevance targets carry a class");
            let r = attribute(trace, &ConditionSet::new(), &init.spec(class), rules, target.normalize)?;
            layers.iter().map(|&l| reduce(r.node(l))).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_strings_round_trip() {
        for s in [
            "act_sum",
            "act_max+relu",
            "rel_sum",
            "rel_max@label",
            "rel_sum@pred+norm",
            "rel_sum@class=3",
            "rel_sum@each",
        ] {
            let t: MaximizationTarget = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        for s in ["act_sum@label", "rel_sum+relu", "rel_avg", "rel_sum@class=x"] {
            assert!(s.parse::<MaximizationTarget>().is_err(), "{s}");
        }
    }
}
