// SPDX-License-Identifier: MIT OR Apache-2.0

//! Top-k reference index and its on-disk form (`index.json` + `index.crpw`).

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_scores, Basis, ClassSource, MaximizationTarget, OutputInit};
use crate::attribute::RuleComposite;
use crate::error::{CrpError, Result};
use crate::forward::forward;
use crate::model_io::{DatasetContainer, ModelGraph, StoredTensor, TensorStore};
use crate::tensor::Tensor;

const FORMAT: &str = "crp-index";
const VERSION: u32 = 1;
const CHUNK: usize = 16;

pub const JSON_NAME: &str = "index.json";
pub const BLOB_NAME: &str = "index.crpw";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub sample: usize,
    pub score: f64,
}

/// Identifies one family of rankings: every channel of `layer` under `target`,
/// optionally for a single output class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RankingKey {
    pub layer: String,
    pub target: MaximizationTarget,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRanking {
    pub layer: String,
    pub channel: usize,
    pub target: MaximizationTarget,
    pub class: Option<usize>,
    pub entries: Vec<RankEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct IndexConfig {
    pub rules: RuleComposite,
    pub init: OutputInit,
    /// Worker threads; `None` uses the global default.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
    pub k: usize,
    pub samples: usize,
    pub init: OutputInit,
    pub rules: RuleComposite,
    pub layers: Vec<String>,
    pub targets: Vec<MaximizationTarget>,
    /// `rankings[key][channel]`, best first.
    pub rankings: BTreeMap<RankingKey, Vec<Vec<RankEntry>>>,
}

/// Score descending, then sample id ascending.
fn better(a: &RankEntry, b: &RankEntry) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.sample.cmp(&b.sample))
}

fn merge(mut a: Vec<RankEntry>, b: &[RankEntry], k: usize) -> Vec<RankEntry> {
    a.extend_from_slice(b);
    a.sort_by(better);
    a.truncate(k);
    a
}

/// Classes each sample is conditioned on for a target.
fn classes_for(
    target: &MaximizationTarget,
    trace_pred: usize,
    label: Option<usize>,
    outputs: usize,
) -> Result<Vec<Option<usize>>> {
    Ok(match (target.basis, target.class_source) {
        (Basis::Activation, _) => vec![None],
        (_, ClassSource::Label) => {
            vec![Some(label.ok_or_else(|| {
                CrpError::InvalidArgument(format!("target {target} needs a labelled dataset"))
            })?)]
        }
        (_, ClassSource::Predicted) | (_, ClassSource::Auto) => vec![Some(trace_pred)],
        (_, ClassSource::Fixed(c)) => vec![Some(c)],
        (_, ClassSource::EachClass) => (0..outputs).map(Some).collect(),
    })
}

/// Ranks dataset samples for every channel of `layers` under every target.
/// The result depends only on the inputs: ties are broken by ascending
/// sample id, so worker count and visit order do not matter.
pub fn build_index(
    graph: &ModelGraph,
    data: &DatasetContainer,
    layers: &[&str],
    targets: &[MaximizationTarget],
    k: usize,
    config: &IndexConfig,
) -> Result<ReferenceIndex> {
    if k == 0 {
        return Err(CrpError::InvalidArgument("k must be at least 1".into()));
    }
    if layers.is_empty() || targets.is_empty() {
        return Err(CrpError::InvalidArgument(
            "index needs at least one layer and one target".into(),
        ));
    }
    if data.is_empty() {
        return Err(CrpError::InvalidArgument("dataset is empty".into()));
    }
    data.check_compatible(graph)?;
    config.rules.resolve(graph)?;
    let outputs = graph.num_outputs();
    let layer_idx: Vec<usize> = layers.iter().map(|l| graph.node_index(l)).collect::<Result<_>>()?;
    let mut resolved: Vec<MaximizationTarget> = Vec::new();
    for t in targets {
        let t = t.resolved(data);
        if let ClassSource::Fixed(c) = t.class_source {
            if c >= outputs {
                return Err(CrpError::InvalidArgument(format!(
                    "target {t} names class {c} but the model has {outputs} outputs"
                )));
            }
        }
        if t.class_source == ClassSource::Label && data.labels().is_none() {
            return Err(CrpError::InvalidArgument(format!(
                "target {t} needs a labelled dataset"
            )));
        }
        if !resolved.contains(&t) {
            resolved.push(t);
        }
    }

    // One group per (target, class) ranking family.
    let mut groups: Vec<(usize, Option<usize>)> = Vec::new();
    for (ti, t) in resolved.iter().enumerate() {
        if t.class_source == ClassSource::EachClass {
            groups.extend((0..outputs).map(|y| (ti, Some(y))));
        } else {
            groups.push((ti, None));
        }
    }
    let channels: Vec<usize> = layer_idx.iter().map(|&l| graph.channels(l)).collect();
    type Partial = Vec<Vec<Vec<Vec<RankEntry>>>>; // [group][layer][channel]
    let empty = || -> Partial {
        groups
            .iter()
            .map(|_| channels.iter().map(|&c| vec![Vec::new(); c]).collect())
            .collect()
    };

    let work = || -> Result<Partial> {
        let partials: Vec<Partial> = data
            .samples()
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut part = empty();
                for (j, x) in chunk.iter().enumerate() {
                    let id = ci * CHUNK + j;
                    let trace = forward(graph, x, &[])?;
                    for (gi, &(ti, class)) in groups.iter().enumerate() {
                        let t = &resolved[ti];
                        let used = match class {
                            Some(y) => vec![Some(y)],
                            None => classes_for(t, trace.predicted_class(), data.label(id), outputs)?,
                        };
                        let scores = sample_scores(&trace, &layer_idx, t, used[0], &config.rules, config.init)?;
                        for (li, per_ch) in scores.into_iter().enumerate() {
                            for (c, score) in per_ch.into_iter().enumerate() {
                                if !score.is_finite() {
                                    return Err(CrpError::InvalidArgument(format!(
                                        "non-finite score for sample {id} in {}:{c}",
                                        layers[li]
                                    )));
                                }
                                let slot = &mut part[gi][li][c];
                                slot.push(RankEntry { sample: id, score });
                                if slot.len() > 2 * k {
                                    slot.sort_by(better);
                                    slot.truncate(k);
                                }
                            }
                        }
                    }
                }
                for g in &mut part {
                    for l in g {
                        for slot in l {
                            slot.sort_by(better);
                            slot.truncate(k);
                        }
                    }
                }
                Ok(part)
            })
            .collect::<Result<_>>()?;
        let mut acc = empty();
        for p in partials {
            for (ga, gp) in acc.iter_mut().zip(p) {
                for (la, lp) in ga.iter_mut().zip(gp) {
                    for (slot, other) in la.iter_mut().zip(lp) {
                        *slot = merge(std::mem::take(slot), &other, k);
                    }
                }
            }
        }
        Ok(acc)
    };
    let merged = match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| CrpError::InvalidArgument(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let mut rankings = BTreeMap::new();
    for ((ti, class), per_layer) in groups.iter().zip(merged) {
        for (li, per_ch) in per_layer.into_iter().enumerate() {
            rankings.insert(
                RankingKey {
                    layer: layers[li].to_string(),
                    target: resolved[*ti],
                    class: *class,
                },
                per_ch,
            );
        }
    }
    Ok(ReferenceIndex {
        model_fingerprint: graph.fingerprint(),
        dataset_fingerprint: data.fingerprint(),
        k,
        samples: data.len(),
        init: config.init,
        rules: config.rules.clone(),
        layers: layers.iter().map(|s| s.to_string()).collect(),
        targets: resolved,
        rankings,
    })
}

/// The first `k` references of one channel.
pub fn query_references(
    index: &ReferenceIndex,
    layer: &str,
    channel: usize,
    target: &MaximizationTarget,
    class_filter: Option<usize>,
    k: usize,
) -> Result<ReferenceRanking> {
    if k > index.k {
        return Err(CrpError::InvalidArgument(format!(
            "requested {k} references but the index keeps {}",
            index.k
        )));
    }
    let stored = index.find_target(target).ok_or_else(|| {
        CrpError::NotFound(format!(
            "target {target} is not indexed; available targets: {}",
            index
                .targets
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })?;
    match (stored.class_source, class_filter) {
        (ClassSource::EachClass, None) => {
            return Err(CrpError::InvalidArgument(format!(
                "target {stored} is ranked per class; pass a class filter"
            )))
        }
        (ClassSource::EachClass, Some(_)) => {}
        (_, Some(c)) => {
            let per_class: Vec<String> = index
                .targets
                .iter()
                .filter(|t| t.class_source == ClassSource::EachClass)
                .map(|t| t.to_string())
                .collect();
            return Err(CrpError::NotFound(format!(
                "no class-specific ranking for class {c} under {stored}; per-class targets: [{}]",
                per_class.join(", ")
            )));
        }
        (_, None) => {}
    }
    let key = RankingKey {
        layer: layer.to_string(),
        target: stored,
        class: class_filter,
    };
    let per_ch = index.rankings.get(&key).ok_or_else(|| {
        CrpError::NotFound(format!(
            "layer {layer} (class {class_filter:?}) is not indexed; indexed layers: {}",
            index.layers.join(", ")
        ))
    })?;
    let entries = per_ch.get(channel).ok_or_else(|| {
        CrpError::NotFound(format!(
            "channel {channel} in layer {layer} with {} channels",
            per_ch.len()
        ))
    })?;
    Ok(ReferenceRanking {
        layer: layer.to_string(),
        channel,
        target: stored,
        class: class_filter,
        entries: entries.iter().take(k).copied().collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct JsonRanking {
    layer: String,
    target: MaximizationTarget,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    class: Option<usize>,
    /// Name suffix of the `scores/` and `ids/` tensors in the blob.
    tensor: usize,
    /// Sample ids per channel, best first.
    samples: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct JsonIndex {
    format: String,
    version: u32,
    model_fingerprint: String,
    dataset_fingerprint: String,
    k: usize,
    samples: usize,
    init: OutputInit,
    rules: RuleComposite,
    layers: Vec<String>,
    targets: Vec<MaximizationTarget>,
    rankings: Vec<JsonRanking>,
}

impl ReferenceIndex {
    /// Exact match, or for [`ClassSource::Auto`] the stored target that
    /// differs only in its resolved class source.
    pub fn find_target(&self, target: &MaximizationTarget) -> Option<MaximizationTarget> {
        if let Some(t) = self.targets.iter().find(|t| *t == target) {
            return Some(*t);
        }
        let loose = |t: &MaximizationTarget| MaximizationTarget {
            class_source: ClassSource::Auto,
            ..*t
        };
        if target.class_source == ClassSource::Auto || target.basis == Basis::Activation {
            self.targets
                .iter()
                .find(|t| {
                    loose(t) == loose(target)
                        && matches!(
                            t.class_source,
                            ClassSource::Label | ClassSource::Predicted | ClassSource::Auto
                        )
                })
                .copied()
        } else {
            None
        }
    }

    /// JSON sidecar and CRPW blob, both deterministic.
    pub fn to_files(&self) -> Result<(String, Vec<u8>)> {
        let mut store = TensorStore::new();
        let mut rankings = Vec::new();
        for (n, (key, per_ch)) in self.rankings.iter().enumerate() {
            let width = per_ch.first().map_or(0, Vec::len);
            if per_ch.iter().any(|r| r.len() != width) {
                return Err(CrpError::InvalidArgument("ragged ranking".into()));
            }
            let scores = per_ch.iter().flat_map(|r| r.iter().map(|e| e.score)).collect();
            let ids = per_ch.iter().flat_map(|r| r.iter().map(|e| e.sample as i32)).collect();
            store.insert(
                format!("scores/{n}"),
                StoredTensor::F64(Tensor::new(vec![per_ch.len(), width], scores)?),
            );
            store.insert(
                format!("ids/{n}"),
                StoredTensor::I32(Tensor::new(vec![per_ch.len(), width], ids)?),
            );
            rankings.push(JsonRanking {
                layer: key.layer.clone(),
                target: key.target,
                class: key.class,
                tensor: n,
                samples: per_ch.iter().map(|r| r.iter().map(|e| e.sample).collect()).collect(),
            });
        }
        let json = JsonIndex {
            format: FORMAT.into(),
            version: VERSION,
            model_fingerprint: self.model_fingerprint.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            k: self.k,
            samples: self.samples,
            init: self.init,
            rules: self.rules.clone(),
            layers: self.layers.clone(),
            targets: self.targets.clone(),
            rankings,
        };
        let text = serde_json::to_string_pretty(&json).map_err(|e| CrpError::parse(e.to_string()))?;
        Ok((text, store.encode()?))
    }

    pub fn from_files(json: &str, blob: &[u8]) -> Result<Self> {
        let j: JsonIndex = serde_json::from_str(json).map_err(|e| CrpError::parse(format!("index.json: {e}")))?;
        if j.format != FORMAT || j.version != VERSION {
            return Err(CrpError::parse(format!(
                "expected {FORMAT} version {VERSION}, found {} version {}",
                j.format, j.version
            )));
        }
        let store = TensorStore::decode(blob)?;
        let mut rankings = BTreeMap::new();
        for r in j.rankings {
            let (Some(StoredTensor::F64(scores)), Some(StoredTensor::I32(ids))) = (
                store.get(&format!("scores/{}", r.tensor)),
                store.get(&format!("ids/{}", r.tensor)),
            ) else {
                return Err(CrpError::parse(format!(
                    "index blob lacks tensors for ranking {}",
                    r.tensor
                )));
            };
            let [c, w] = scores.shape() else {
                return Err(CrpError::parse("score tensors must be rank 2"));
            };
            if ids.shape() != scores.shape() || r.samples.len() != *c || r.samples.iter().any(|s| s.len() != *w) {
                return Err(CrpError::parse(format!(
                    "ranking {} disagrees with the index blob",
                    r.tensor
                )));
            }
            let mut per_ch = Vec::with_capacity(*c);
            for (ch, row) in r.samples.iter().enumerate() {
                let mut entries = Vec::with_capacity(*w);
                for (i, &s) in row.iter().enumerate() {
                    if ids.data()[ch * w + i] as usize != s || s >= j.samples {
                        return Err(CrpError::parse(format!(
                            "ranking {} has inconsistent sample ids",
                            r.tensor
                        )));
                    }
                    entries.push(RankEntry {
                        sample: s,
                        score: scores.data()[ch * w + i],
                    });
                }
                per_ch.push(entries);
            }
            rankings.insert(
                RankingKey {
                    layer: r.layer,
                    target: r.target,
                    class: r.class,
                },
                per_ch,
            );
        }
        Ok(Self {
            model_fingerprint: j.model_fingerprint,
            dataset_fingerprint: j.dataset_fingerprint,
            k: j.k,
            samples: j.samples,
            init: j.init,
            rules: j.rules,
            layers: j.layers,
            targets: j.targets,
            rankings,
        })
    }

    /// Writes `index.json` and `index.crpw` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let (json, blob) = self.to_files()?;
        std::fs::write(dir.join(JSON_NAME), json)?;
        std::fs::write(dir.join(BLOB_NAME), blob)?;
        Ok(())
    }

    /// Reads an index without checking which model and dataset built it.
    pub fn load_unchecked(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let json = std::fs::read_to_string(dir.join(JSON_NAME))?;
        let blob = std::fs::read(dir.join(BLOB_NAME))?;
        Self::from_files(&json, &blob)
    }

    /// Reads an index and rejects it unless it was built from exactly this
    /// model and dataset.
    pub fn load(dir: impl AsRef<Path>, graph: &ModelGraph, data: &DatasetContainer) -> Result<Self> {
        let idx = Self::load_unchecked(dir)?;
        idx.check(graph, data)?;
        Ok(idx)
    }

    pub fn check(&self, graph: &ModelGraph, data: &DatasetContainer) -> Result<()> {
        if self.model_fingerprint != graph.fingerprint() {
            return Err(CrpError::FingerprintMismatch(
                "index was built for a different model".into(),
            ));
        }
        if self.dataset_fingerprint != data.fingerprint() {
            return Err(CrpError::FingerprintMismatch(
                "index was built for a different dataset".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_breaks_ties_by_sample_id() {
        let a = vec![RankEntry { sample: 5, score: 1.0 }, RankEntry { sample: 1, score: 0.5 }];
        let b = [RankEntry { sample: 2, score: 1.0 }, RankEntry { sample: 0, score: 0.5 }];
        let m = merge(a, &b, 3);
        let ids: Vec<usize> = m.iter().map(|e| e.sample).collect();
        assert_eq!(ids, vec![2, 5, 0]);
    }
}
