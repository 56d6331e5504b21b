// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analysis steps shared by the command line and the HTTP service.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crp_core::attribute::{attribute, ConditionSet, Rule, RuleComposite, DEFAULT_EPSILON};
use crp_core::concepts::{
    query_references, rank_classes_for_concept, Basis, ClassRelevance, ClassSource, MaximizationTarget, OutputInit,
    RankEntry, ReferenceIndex,
};
use crp_core::evaluate::{self, BlendSweep, FlipCurve, FlipOrder, SimilarityMatrix};
use crp_core::forward::{forward, ActivationEdit, EditMode};
use crp_core::graphs::{build_graph, AttributionGraph, GraphParams};
use crp_core::localize::{
    argmax_in_channel, build_atlas, local_concept_query, mask_reference, receptive_field, ChannelScore, ConceptAtlas,
    RegionPartition,
};
use crp_core::model_io::{DatasetContainer, ModelGraph, StoredTensor, TensorStore};
use crp_core::render;
use crp_core::tensor::{BooleanMask, Tensor};
use crp_core::{CrpError, Result};

/// Kept fraction of the maximum when masking reference thumbnails.
pub const THUMBNAIL_THRESHOLD: f64 = 0.4;

/// Names accepted for `--rules` and the `rules` request field.
pub const COMPOSITE_NAMES: [&str; 5] = ["epsilon-zplus-flat", "zplus-flat", "epsilon", "zplus", "flat"];

pub fn composite_by_name(name: &str, epsilon: f64) -> Result<RuleComposite> {
    Ok(match name {
        "epsilon-zplus-flat" | "default" => RuleComposite::epsilon_zplus_flat(epsilon),
        "zplus-flat" => RuleComposite::zplus_flat(),
        "epsilon" => RuleComposite::uniform(Rule::Epsilon(epsilon)),
        "zplus" => RuleComposite::uniform(Rule::ZPlus),
        "flat" => RuleComposite::uniform(Rule::Flat),
        _ => {
            return Err(CrpError::Rule(format!(
                "unknown rule composite {name:?}; available: {}",
                COMPOSITE_NAMES.join(", ")
            )))
        }
    })
}

/// Either a composite name or a full composite document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RulesSpec {
    Name(String),
    Composite(RuleComposite),
}

impl RulesSpec {
    pub fn resolve(&self) -> Result<RuleComposite> {
        match self {
            RulesSpec::Name(n) => composite_by_name(n, DEFAULT_EPSILON),
            RulesSpec::Composite(c) => Ok(c.clone()),
        }
    }
}

/// Loaded model and data plus the analysis settings.
#[derive(Debug, Clone)]
pub struct Engine {
    pub graph: ModelGraph,
    pub dataset: Option<DatasetContainer>,
    pub index: Option<ReferenceIndex>,
    pub rules: RuleComposite,
    pub init: OutputInit,
    pub normalize: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub class: usize,
    pub logit: f64,
    pub conditions: ConditionSet,
    pub layer_sums: BTreeMap<String, f64>,
    /// Summed relevance per channel for every layer with a channel axis.
    pub channel_relevance: BTreeMap<String, Vec<f64>>,
    /// Input relevance summed over channels.
    pub heatmap: Tensor<f64>,
    pub input_relevance: Tensor<f64>,
}

impl Attribution {
    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        s.insert("heatmap", StoredTensor::F64(self.heatmap.clone()));
        s.insert("relevance", StoredTensor::F64(self.input_relevance.clone()));
        s
    }

    pub fn crpw(&self) -> Result<Vec<u8>> {
        self.to_store().encode()
    }

    pub fn png(&self) -> Result<Vec<u8>> {
        render::heatmap_png(&self.heatmap)
    }
}

/// One reference sample with an optional rendered thumbnail.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub entry: RankEntry,
    pub class: Option<usize>,
    pub thumbnail: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub layer: String,
    pub channel: usize,
    pub target: MaximizationTarget,
    pub class: Option<usize>,
    pub references: Vec<Reference>,
}

/// Where a blend takes its replacement activations from.
#[derive(Debug, Clone, PartialEq)]
pub enum Donor {
    Sample(Tensor<f32>),
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub model_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    pub input_shape: Vec<usize>,
    pub outputs: usize,
    pub layers: Vec<LayerInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_fingerprint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<IndexMeta>,
    pub rules: RuleComposite,
    pub init: OutputInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
    pub k: usize,
    pub layers: Vec<String>,
    pub targets: Vec<MaximizationTarget>,
    /// Whether the index matches the loaded model and dataset.
    pub matches: bool,
}

impl Engine {
    pub fn new(graph: ModelGraph) -> Self {
        Self {
            graph,
            dataset: None,
            index: None,
            rules: RuleComposite::default(),
            init: OutputInit::Logit,
            normalize: false,
            seed: 0,
        }
    }

    pub fn dataset(&self) -> Result<&DatasetContainer> {
        self.dataset
            .as_ref()
            .ok_or_else(|| CrpError::InvalidArgument("no dataset loaded".into()))
    }

    pub fn index(&self) -> Result<&ReferenceIndex> {
        let index = self
            .index
            .as_ref()
            .ok_or_else(|| CrpError::InvalidArgument("no reference index loaded".into()))?;
        index.check(&self.graph, self.dataset()?)?;
        Ok(index)
    }

    /// Sample `id` of the loaded dataset.
    pub fn sample(&self, id: usize) -> Result<&Tensor<f32>> {
        self.dataset()?.sample(id)
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Prediction> {
        let trace = forward(&self.graph, x, &[])?;
        let logits: Vec<f64> = trace.logits().data().iter().map(|&v| v as f64).collect();
        let predicted = trace.predicted_class();
        let class_name = self
            .dataset
            .as_ref()
            .and_then(|d| d.class_names())
            .and_then(|n| n.get(predicted).cloned());
        Ok(Prediction {
            probabilities: evaluate::softmax(&logits),
            logits,
            predicted,
            class_name,
        })
    }

    fn class_for(&self, x: &Tensor<f32>, class: Option<usize>) -> Result<usize> {
        match class {
            Some(c) => Ok(c),
            None => Ok(forward(&self.graph, x, &[])?.predicted_class()),
        }
    }

    pub fn attribute(&self, x: &Tensor<f32>, class: Option<usize>, cond: &ConditionSet) -> Result<Attribution> {
        self.attribute_with(x, class, cond, &self.rules)
    }

    pub fn attribute_with(
        &self,
        x: &Tensor<f32>,
        class: Option<usize>,
        cond: &ConditionSet,
        rules: &RuleComposite,
    ) -> Result<Attribution> {
        let trace = forward(&self.graph, x, &[])?;
        let class = class.unwrap_or_else(|| trace.predicted_class());
        let r = attribute(&trace, cond, &self.init.spec(class), rules, self.normalize)?;
        let channel_relevance = self
            .graph
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, crp_core::model_io::Op::Flatten))
            .map(|(i, n)| (n.id.clone(), r.node(i).channel_sums()))
            .collect();
        let logit = trace
            .logits()
            .data()
            .get(class)
            .copied()
            .ok_or_else(|| CrpError::Condition(format!("class {class} out of range")))? as f64;
        Ok(Attribution {
            class,
            logit,
            conditions: cond.clone(),
            layer_sums: r.layer_sums(),
            channel_relevance,
            heatmap: r.heatmap(),
            input_relevance: r.into_input(),
        })
    }

    /// Ranking of every channel of `layer` by its conditional input relevance
    /// inside `region`; a full mask gives the global ranking.
    pub fn region(
        &self,
        x: &Tensor<f32>,
        layer: &str,
        class: Option<usize>,
        cond: &ConditionSet,
        region: &BooleanMask,
    ) -> Result<Vec<ChannelScore>> {
        let trace = forward(&self.graph, x, &[])?;
        let class = class.unwrap_or_else(|| trace.predicted_class());
        local_concept_query(&trace, cond, &self.init.spec(class), &self.rules, layer, region)
    }

    /// Full-input mask for the loaded model.
    pub fn full_mask(&self) -> Result<BooleanMask> {
        let (_, h, w) = crp_core::tensor::chw(self.graph.input_shape())?;
        BooleanMask::full(&[h, w], true)
    }

    pub fn concepts(
        &self,
        x: &Tensor<f32>,
        layer: &str,
        class: Option<usize>,
        cond: &ConditionSet,
    ) -> Result<Vec<ChannelScore>> {
        self.region(x, layer, class, cond, &self.full_mask()?)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn atlas(
        &self,
        x: &Tensor<f32>,
        layer: &str,
        class: Option<usize>,
        cond: &ConditionSet,
        partition: &RegionPartition,
        top_n: usize,
        density_threshold: bool,
    ) -> Result<ConceptAtlas> {
        let trace = forward(&self.graph, x, &[])?;
        let class = class.unwrap_or_else(|| trace.predicted_class());
        build_atlas(
            &trace,
            cond,
            &self.init.spec(class),
            &self.rules,
            layer,
            partition,
            top_n,
            density_threshold,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn graph(
        &self,
        x: &Tensor<f32>,
        layer: &str,
        channel: usize,
        class: Option<usize>,
        cond: &ConditionSet,
        params: GraphParams,
    ) -> Result<AttributionGraph> {
        let trace = forward(&self.graph, x, &[])?;
        let class = class.unwrap_or_else(|| trace.predicted_class());
        build_graph(
            &trace,
            cond,
            &self.init.spec(class),
            &self.rules,
            layer,
            channel,
            params,
        )
    }

    pub fn flip(
        &self,
        x: &Tensor<f32>,
        layer: &str,
        class: Option<usize>,
        cond: &ConditionSet,
        order: FlipOrder,
        steps: Option<usize>,
    ) -> Result<FlipCurve> {
        let class = self.class_for(x, class)?;
        evaluate::flip_filters(
            &self.graph,
            x,
            layer,
            cond,
            &self.init.spec(class),
            &self.rules,
            order,
            steps,
        )
    }

    /// Blend sweep at `layer`. Without a mask the whole plane is blended.
    #[allow(clippy::too_many_arguments)]
    pub fn blend(
        &self,
        x: &Tensor<f32>,
        layer: &str,
        donor: &Donor,
        mask: Option<BooleanMask>,
        alphas: &[f64],
        tracked: &[(String, usize)],
        class: Option<usize>,
        cond: &ConditionSet,
    ) -> Result<BlendSweep> {
        let li = self.graph.node_index(layer)?;
        let (_, h, w) = crp_core::tensor::chw(&self.graph.node(li).output_shape)?;
        let mask = match mask {
            Some(m) => m,
            None => BooleanMask::full(&[h, w], true)?,
        };
        let template = match donor {
            Donor::Sample(d) => {
                let t = forward(&self.graph, d, &[])?;
                ActivationEdit::blend(layer, mask, t.output(li).clone(), 0.0)
            }
            Donor::Mean => ActivationEdit {
                layer: layer.to_string(),
                mode: EditMode::BlendMean {
                    mask,
                    donor_means: evaluate::channel_means(&self.graph, self.dataset()?, layer)?,
                    alpha: 0.0,
                },
            },
        };
        let class = self.class_for(x, class)?;
        evaluate::blend_sweep(
            &self.graph,
            x,
            &template,
            alphas,
            tracked,
            cond,
            &self.init.spec(class),
            &self.rules,
        )
    }

    pub fn similarity(&self, layer: &str, k: usize) -> Result<SimilarityMatrix> {
        evaluate::channel_similarity(&self.graph, self.dataset()?, self.index()?, layer, k)
    }

    pub fn classes(&self, layer: &str, channel: usize) -> Result<Vec<ClassRelevance>> {
        rank_classes_for_concept(&self.graph, self.dataset()?, layer, channel, &self.rules, self.init)
    }

    /// Top-`k` references of one channel, with masked thumbnails on request.
    pub fn references(
        &self,
        layer: &str,
        channel: usize,
        target: &MaximizationTarget,
        class: Option<usize>,
        k: usize,
        thumbnails: bool,
    ) -> Result<References> {
        let index = self.index()?;
        let data = self.dataset()?;
        let stored = index.find_target(&target.resolved(data)).ok_or_else(|| {
            CrpError::NotFound(format!(
                "target {target}; available targets: {}",
                index
                    .targets
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?;
        let ranking = query_references(index, layer, channel, &stored, class, k)?;
        let references = ranking
            .entries
            .iter()
            .map(|e| {
                let class = self.reference_class(&stored, ranking.class, e.sample)?;
                let thumbnail = if thumbnails {
                    self.thumbnail(e.sample, layer, channel, class)?
                } else {
                    None
                };
                Ok(Reference {
                    entry: *e,
                    class,
                    thumbnail,
                })
            })
            .collect::<Result<_>>()?;
        Ok(References {
            layer: layer.to_string(),
            channel,
            target: stored,
            class: ranking.class,
            references,
        })
    }

    /// Class a reference sample was ranked under; none for activation targets.
    fn reference_class(
        &self,
        target: &MaximizationTarget,
        ranked: Option<usize>,
        sample: usize,
    ) -> Result<Option<usize>> {
        if target.basis == Basis::Activation {
            return Ok(None);
        }
        Ok(Some(match (target.class_source, ranked) {
            (_, Some(c)) | (ClassSource::Fixed(c), _) => c,
            (ClassSource::Label, _) => self
                .dataset()?
                .label(sample)
                .ok_or_else(|| CrpError::InvalidArgument("dataset has no labels".into()))?,
            _ => forward(&self.graph, self.sample(sample)?, &[])?.predicted_class(),
        }))
    }

    /// PNG of a reference sample masked to the pixels most relevant to the
    /// channel and cropped to the receptive field of its strongest neuron.
    /// `None` when the model input has no spatial extent.
    pub fn thumbnail(
        &self,
        sample: usize,
        layer: &str,
        channel: usize,
        class: Option<usize>,
    ) -> Result<Option<Vec<u8>>> {
        if self.graph.input_shape().len() != 3 {
            return Ok(None);
        }
        let x = self.sample(sample)?;
        let trace = forward(&self.graph, x, &[])?;
        let li = self.graph.node_index(layer)?;
        let init = match class {
            Some(c) => self.init.spec(c),
            None => crp_core::attribute::InitSpec::LayerActivation {
                layer: layer.to_string(),
                channel: Some(channel),
            },
        };
        let cond = match class {
            Some(_) => ConditionSet::new().with(layer, [channel]),
            None => ConditionSet::new(),
        };
        let r = attribute(&trace, &cond, &init, &self.rules, false)?;
        let field = argmax_in_channel(trace.output(li), channel)
            .and_then(|n| receptive_field(&self.graph, layer, &n))
            .ok();
        let masked = mask_reference(x, &r.heatmap(), THUMBNAIL_THRESHOLD, None, field.as_ref())?;
        let img = masked.crop.as_ref().unwrap_or(&masked.sample);
        Ok(Some(render::sample_png(img)?))
    }

    pub fn meta(&self) -> Meta {
        let layers = self
            .graph
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| LayerInfo {
                id: n.id.clone(),
                kind: n.op.kind_name().to_string(),
                output_shape: n.output_shape.clone(),
                channels: self.graph.channels(i),
            })
            .collect();
        let index = self.index.as_ref().map(|ix| IndexMeta {
            model_fingerprint: ix.model_fingerprint.clone(),
            dataset_fingerprint: ix.dataset_fingerprint.clone(),
            k: ix.k,
            layers: ix.layers.clone(),
            targets: ix.targets.clone(),
            matches: self.dataset.as_ref().is_some_and(|d| ix.check(&self.graph, d).is_ok()),
        });
        Meta {
            model_fingerprint: self.graph.fingerprint(),
            model_name: self.graph.name().map(str::to_string),
            input_shape: self.graph.input_shape().to_vec(),
            outputs: self.graph.num_outputs(),
            layers,
            dataset_fingerprint: self.dataset.as_ref().map(|d| d.fingerprint()),
            samples: self.dataset.as_ref().map(|d| d.len()),
            class_names: self
                .dataset
                .as_ref()
                .and_then(|d| d.class_names())
                .map(<[String]>::to_vec),
            index,
            rules: self.rules.clone(),
            init: self.init,
        }
    }
}

/// Parses `top,left,height,width`.
pub fn parse_rect(s: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CrpError::InvalidArgument(format!("expected top,left,height,width, got {s:?}")))?;
    v.try_into()
        .map_err(|_| CrpError::InvalidArgument(format!("expected four values in {s:?}")))
}

/// Parses `ROWSxCOLS`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || CrpError::InvalidArgument(format!("expected ROWSxCOLS, got {s:?}"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

/// Parses `layer:channel`.
pub fn parse_tracked(s: &str) -> Result<(String, usize)> {
    let bad = || CrpError::InvalidArgument(format!("expected layer:channel, got {s:?}"));
    let (l, c) = s.rsplit_once(':').ok_or_else(bad)?;
    if l.is_empty() {
        return Err(bad());
    }
    Ok((l.to_string(), c.trim().parse().map_err(|_| bad())?))
}
