// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-level experiments: filter flipping, activation blending sweeps and
//! the averaged cosine similarity between channels.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attribute::{attribute_with, ConditionSet, InitSpec, RuleComposite};
use crate::concepts::{query_references, Aggregation, ClassSource, MaximizationTarget, ReferenceIndex};
use crate::error::{CrpError, Result};
use crate::forward::{forward, ActivationEdit, ActivationTrace};
use crate::model_io::{DatasetContainer, ModelGraph};
use crate::tensor::Tensor;

/// Order in which channels are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipOrder {
    RelevanceDesc,
    RelevanceAsc,
    Random(u64),
}

impl fmt::Display for FlipOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlipOrder::RelevanceDesc => f.write_str("relevance_desc"),
            FlipOrder::RelevanceAsc => f.write_str("relevance_asc"),
            FlipOrder::Random(s) => write!(f, "random:{s}"),
        }
    }
}

impl FromStr for FlipOrder {
    type Err = CrpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relevance_desc" | "desc" => Ok(Self::RelevanceDesc),
            "relevance_asc" | "asc" => Ok(Self::RelevanceAsc),
            _ => match s.strip_prefix("random:").map(str::parse) {
                Some(Ok(seed)) => Ok(Self::Random(seed)),
                _ => Err(CrpError::InvalidArgument(format!(
                    "unknown order {s:?}; use relevance_desc, relevance_asc or random:SEED"
                ))),
            },
        }
    }
}

impl Serialize for FlipOrder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FlipOrder {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipStep {
    pub step: usize,
    /// Channel switched off at this step; none at step 0.
    pub channel: Option<usize>,
    pub disabled: Vec<usize>,
    pub logits: Vec<f64>,
    /// `logit_t / logit_0` per class, or the raw logit where `logit_0 == 0`.
    pub relative: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// `p_t / p_0` per class.
    pub relative_probability: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipCurve {
    pub layer: String,
    pub order: FlipOrder,
    pub target: usize,
    /// `(channel, relevance)` in flip order.
    pub ranking: Vec<(usize, f64)>,
    /// Classes whose initial logit is zero; their `relative` values are absolute.
    pub absolute_classes: Vec<usize>,
    pub steps: Vec<FlipStep>,
}

impl FlipCurve {
    /// Whether the target class is reported as absolute logits.
    pub fn zero_logit(&self) -> bool {
        self.absolute_classes.contains(&self.target)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn logits_of(trace: &ActivationTrace<'_>) -> Vec<f64> {
    trace.logits().data().iter().map(|&v| v as f64).collect()
}

/// Ranks the channels of `layer` once by their summed relevance for
/// `target` under `cond`, then switches them off one by one.
#[allow(clippy::too_many_arguments)]
pub fn flip_filters(
    graph: &ModelGraph,
    x: &Tensor<f32>,
    layer: &str,
    cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
    order: FlipOrder,
    max_steps: Option<usize>,
) -> Result<FlipCurve> {
    let li = graph.node_index(layer)?;
    let c = graph.channels(li);
    let steps = max_steps.unwrap_or(c);
    if steps > c {
        return Err(CrpError::InvalidArgument(format!(
            "{steps} flip steps requested but layer {layer} has {c} channels"
        )));
    }
    let clean = forward(graph, x, &[])?;
    let target = match init {
        InitSpec::Logit(y) | InitSpec::OneHot(y) => *y,
        _ => clean.predicted_class(),
    };
    let resolved = rules.resolve(graph)?;
    let rel = attribute_with(&clean, cond, init, &resolved, false)?;
    let sums = rel.node(li).channel_sums();
    let mut ranking: Vec<(usize, f64)> = sums.into_iter().enumerate().collect();
    match order {
        FlipOrder::RelevanceDesc => ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))),
        FlipOrder::RelevanceAsc => ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))),
        FlipOrder::Random(seed) => ranking.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }

    let base = logits_of(&clean);
    let base_p = softmax(&base);
    let absolute_classes: Vec<usize> = (0..base.len()).filter(|&k| base[k] == 0.0).collect();
    let record = |step: usize, channel: Option<usize>, disabled: Vec<usize>, logits: Vec<f64>| {
        let p = softmax(&logits);
        FlipStep {
            step,
            channel,
            disabled,
            relative: logits
                .iter()
                .zip(&base)
                .map(|(l, b)| if *b == 0.0 { *l } else { l / b })
                .collect(),
            relative_probability: p.iter().zip(&base_p).map(|(a, b)| a / b).collect(),
            probabilities: p,
            logits,
        }
    };
    let rest: Vec<FlipStep> = (1..=steps)
        .into_par_iter()
        .map(|t| {
            let disabled: Vec<usize> = ranking[..t].iter().map(|r| r.0).collect();
            let edit = ActivationEdit::zero_channels(layer, disabled.iter().copied());
            let trace = forward(graph, x, &[edit])?;
            Ok(record(t, Some(ranking[t - 1].0), disabled, logits_of(&trace)))
        })
        .collect::<Result<_>>()?;
    let mut all = vec![record(0, None, Vec::new(), base.clone())];
    all.extend(rest);
    Ok(FlipCurve {
        layer: layer.to_string(),
        order,
        target,
        ranking,
        absolute_classes,
        steps: all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendPoint {
    pub alpha: f64,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Summed relevance of each tracked channel.
    pub tracked: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendSweep {
    pub layer: String,
    pub tracked: Vec<(String, usize)>,
    pub points: Vec<BlendPoint>,
}

/// Runs `template` at every blend factor in `alphas` (sorted ascending
/// first) and records logits plus the relevance of `tracked` channels.
#[allow(clippy::too_many_arguments)]
pub fn blend_sweep(
    graph: &ModelGraph,
    x: &Tensor<f32>,
    template: &ActivationEdit,
    alphas: &[f64],
    tracked: &[(String, usize)],
    cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
) -> Result<BlendSweep> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(CrpError::InvalidArgument(format!("blend alpha {a} outside [0, 1]")));
    }
    let mut grid = alphas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut idx = Vec::with_capacity(tracked.len());
    for (l, ch) in tracked {
        let i = graph.node_index(l)?;
        if *ch >= graph.channels(i) {
            return Err(CrpError::NotFound(format!("channel {ch} in layer {l}")));
        }
        idx.push((i, *ch));
    }
    let resolved = rules.resolve(graph)?;
    let points = grid
        .par_iter()
        .map(|&alpha| {
            let trace = forward(graph, x, &[template.with_alpha(alpha)])?;
            let tracked = if idx.is_empty() {
                Vec::new()
            } else {
                let r = attribute_with(&trace, cond, init, &resolved, false)?;
                idx.iter().map(|&(i, ch)| r.node(i).channel_sums()[ch]).collect()
            };
            let logits = logits_of(&trace);
            Ok(BlendPoint {
                alpha,
                probabilities: softmax(&logits),
                logits,
                tracked,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BlendSweep {
        layer: template.layer.clone(),
        tracked: tracked.to_vec(),
        points,
    })
}

/// Per-channel spatial means of `layer` over a dataset, for mean blending.
pub fn channel_means(graph: &ModelGraph, data: &DatasetContainer, layer: &str) -> Result<Tensor<f32>> {
    let li = graph.node_index(layer)?;
    let c = graph.channels(li);
    if data.is_empty() {
        return Err(CrpError::InvalidArgument("dataset is empty".into()));
    }
    let per: Vec<Vec<f64>> = data
        .samples()
        .par_iter()
        .map(|x| {
            let t = forward(graph, x, &[])?;
            let out = t.output(li);
            let plane = (out.len() / c) as f64;
            Ok(out.channel_sums().into_iter().map(|s| s / plane).collect())
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Tensor::new(
        vec![c],
        (0..c)
            .map(|ch| (per.iter().map(|p| p[ch]).sum::<f64>() / n) as f32)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub layer: String,
    pub channels: usize,
    pub k: usize,
    pub target: String,
    /// Symmetric averaged cosine similarity.
    pub rho: Vec<Vec<f64>>,
    /// `1 - rho`.
    pub distance: Vec<Vec<f64>>,
    /// Channels with an all-zero activation vector on one of their references.
    pub flagged: Vec<usize>,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Similarity from explicit reference sets: `references[q]` lists the
/// samples representing channel `q`.
pub fn similarity_from_references(
    graph: &ModelGraph,
    data: &DatasetContainer,
    layer: &str,
    references: &[Vec<usize>],
) -> Result<SimilarityMatrix> {
    let li = graph.node_index(layer)?;
    let c = graph.channels(li);
    if references.len() != c {
        return Err(CrpError::InvalidArgument(format!(
            "{} reference sets for {c} channels",
            references.len()
        )));
    }
    // cos[q][p] with a zero-activation flag per q.
    let rows: Vec<(Vec<f64>, bool)> = references
        .par_iter()
        .enumerate()
        .map(|(q, refs)| {
            let mut row = vec![0.0; c];
            let mut flagged = false;
            for &m in refs {
                let t = forward(graph, data.sample(m)?, &[])?;
                let out = t.output(li);
                let plane = out.len() / c;
                let z: Vec<f64> = out.data().iter().map(|&v| (v as f64).max(0.0)).collect();
                let zq = |ch: usize| &z[ch * plane..(ch + 1) * plane];
                if zq(q).iter().all(|&v| v == 0.0) {
                    flagged = true;
                }
                for (p, cell) in row.iter_mut().enumerate() {
                    *cell += cosine(zq(q), zq(p)).unwrap_or(0.0);
                }
            }
            if !refs.is_empty() {
                row.iter_mut().for_each(|v| *v /= refs.len() as f64);
            }
            Ok((row, flagged || refs.is_empty()))
        })
        .collect::<Result<_>>()?;
    let rho: Vec<Vec<f64>> = (0..c)
        .map(|q| (0..c).map(|p| 0.5 * (rows[q].0[p] + rows[p].0[q])).collect())
        .collect();
    let distance = rho.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
    Ok(SimilarityMatrix {
        layer: layer.to_string(),
        channels: c,
        k: references.iter().map(Vec::len).max().unwrap_or(0),
        target: String::new(),
        rho,
        distance,
        flagged: rows.iter().enumerate().filter(|(_, r)| r.1).map(|(q, _)| q).collect(),
    })
}

/// Averaged cosine similarity of every channel pair of `layer` over the
/// top-`k` `rel_sum` references of each channel.
pub fn channel_similarity(
    graph: &ModelGraph,
    data: &DatasetContainer,
    index: &ReferenceIndex,
    layer: &str,
    k: usize,
) -> Result<SimilarityMatrix> {
    index.check(graph, data)?;
    let want = MaximizationTarget::relevance(Aggregation::Sum, ClassSource::Auto);
    let target = index.find_target(&want).ok_or_else(|| {
        CrpError::NotFound(format!(
            "similarity needs a rel_sum ranking; available targets: {}",
            index
                .targets
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })?;
    let c = graph.channels(graph.node_index(layer)?);
    let refs = (0..c)
        .map(|q| {
            Ok(query_references(index, layer, q, &target, None, k)?
                .entries
                .iter()
                .map(|e| e.sample)
                .collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    let mut m = similarity_from_references(graph, data, layer, &refs)?;
    m.k = k;
    m.target = target.to_string();
    Ok(m)
}

/// Shortest round-trip text; exponent form for very small or large values.
fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn csv_err(e: csv::Error) -> CrpError {
    CrpError::Io(std::io::Error::other(e.to_string()))
}

/// `step, channel, relative_<c>..., logit_<c>..., probability_<c>...`
pub fn write_flip_csv(curve: &FlipCurve, out: impl Write) -> Result<()> {
    let n = curve.steps.first().map_or(0, |s| s.logits.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "channel".to_string()];
    for prefix in ["relative", "logit", "probability"] {
        header.extend((0..n).map(|c| format!("{prefix}_{c}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for s in &curve.steps {
        let mut row = vec![s.step.to_string(), s.channel.map(|c| c.to_string()).unwrap_or_default()];
        for v in s.relative.iter().chain(&s.logits).chain(&s.probabilities) {
            row.push(num(*v));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `alpha, logit_<c>..., <layer>:<channel>...`
pub fn write_blend_csv(sweep: &BlendSweep, out: impl Write) -> Result<()> {
    let n = sweep.points.first().map_or(0, |p| p.logits.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["alpha".to_string()];
    header.extend((0..n).map(|c| format!("logit_{c}")));
    header.extend(sweep.tracked.iter().map(|(l, c)| format!("{l}:{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for p in &sweep.points {
        let mut row = vec![num(p.alpha)];
        row.extend(p.logits.iter().chain(&p.tracked).map(|&v| num(v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Dense `rho` with a leading channel column.
pub fn write_similarity_csv(m: &SimilarityMatrix, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["channel".to_string()];
    header.extend((0..m.channels).map(|c| c.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (q, row) in m.rho.iter().enumerate() {
        let mut r = vec![q.to_string()];
        r.extend(row.iter().map(|&v| num(v)));
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_strings_round_trip() {
        for s in ["relevance_desc", "relevance_asc", "random:7"] {
            assert_eq!(s.parse::<FlipOrder>().unwrap().to_string(), s);
        }
        assert!("random:x".parse::<FlipOrder>().is_err());
    }

    #[test]
    fn csv_numbers_parse_back_exactly() {
        for v in [
            0.0,
            1.0,
            -0.25,
            1.1240381162801028e-29,
            3.5e17,
            0.9999971510234339,
            -7.5e-5,
        ] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v, "{}", num(v));
        }
        assert_eq!(num(1e-30), "1e-30");
        assert_eq!(num(0.5), "0.5");
    }

    #[test]
    fn cosine_of_proportional_vectors_is_one() {
        assert!((cosine(&[1.0, 2.0, 0.0], &[3.0, 6.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, -3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
