// SPDX-License-Identifier: MIT OR Apache-2.0

//! Regional concept rankings.

use serde::{Deserialize, Serialize};

use super::{has_channel_axis, map_extent, spatial_extent, RegionPartition};
use crate::attribute::{channel_input_relevance, ConditionSet, InitSpec, RuleComposite};
use crate::error::{CrpError, Result};
use crate::forward::ActivationTrace;
use crate::render::{encode_rgb, palette};
use crate::tensor::{BooleanMask, Tensor};

/// Regions whose relevance density is below this fraction of the densest
/// region are flagged.
pub const DENSITY_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: usize,
    pub relevance: f64,
    /// `relevance / sum_c |relevance_c|` over all channels in the region.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasRegion {
    pub id: usize,
    pub pixels: usize,
    /// Relevance in the region summed over all channels.
    pub relevance: f64,
    /// `relevance / pixels`.
    pub density: f64,
    pub flagged: bool,
    pub ranking: Vec<ChannelScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAssignment {
    pub region: usize,
    pub primary: Option<usize>,
    pub secondary: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAtlas {
    pub layer: String,
    pub top_n: usize,
    pub density_threshold: bool,
    pub regions: Vec<AtlasRegion>,
    /// Input relevance of each channel over the whole input.
    pub global: Vec<f64>,
    /// `aggregates[region][channel]`.
    pub aggregates: Vec<Vec<f64>>,
    /// Fill (primary) and overlay (secondary) concept per region.
    pub assignment: Vec<RegionAssignment>,
    #[serde(skip)]
    pub labels: Vec<usize>,
    #[serde(skip)]
    pub extent: (usize, usize),
}

/// Sorts by relevance descending, then channel ascending, and attaches shares.
fn rank(relevance: &[f64]) -> Vec<ChannelScore> {
    let denom: f64 = relevance.iter().map(|v| v.abs()).sum();
    let mut out: Vec<ChannelScore> = relevance
        .iter()
        .enumerate()
        .map(|(c, &r)| ChannelScore {
            channel: c,
            relevance: r,
            share: if denom > 0.0 { r / denom } else { 0.0 },
        })
        .collect();
    out.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then(a.channel.cmp(&b.channel)));
    out
}

fn check_layer(trace: &ActivationTrace<'_>, layer: &str) -> Result<usize> {
    let g = trace.graph();
    if !has_channel_axis(g, layer)? {
        return Err(CrpError::InvalidArgument(format!("layer {layer} has no channel axis")));
    }
    Ok(g.channels(g.node_index(layer)?))
}

/// Per-pixel relevance summed over input channels.
fn pixel_map(input: &Tensor<f64>, plane: usize) -> Vec<f64> {
    let mut m = vec![0.0; plane];
    for (i, v) in input.data().iter().enumerate() {
        m[i % plane] += v;
    }
    m
}

/// Ranks the channels of `layer` inside every region of `partition`.
#[allow(clippy::too_many_arguments)]
pub fn build_atlas(
    trace: &ActivationTrace<'_>,
    base_cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
    layer: &str,
    partition: &RegionPartition,
    top_n: usize,
    density_threshold: bool,
) -> Result<ConceptAtlas> {
    let c = check_layer(trace, layer)?;
    let (h, w) = spatial_extent(trace.graph().input_shape())?;
    if (partition.height(), partition.width()) != (h, w) {
        return Err(CrpError::Shape(format!(
            "partition is {}x{}, input is {h}x{w}",
            partition.height(),
            partition.width()
        )));
    }
    let channels: Vec<usize> = (0..c).collect();
    let split = channel_input_relevance(trace, base_cond, init, rules, layer, &channels)?;
    let k = partition.count();
    let mut aggregates = vec![vec![0.0; c]; k];
    let mut global = vec![0.0; c];
    for (ch, input) in split.inputs.iter().enumerate() {
        for (p, v) in pixel_map(input, h * w).into_iter().enumerate() {
            aggregates[partition.labels()[p]][ch] += v;
        }
        global[ch] = input.sum();
    }

    let mut regions: Vec<AtlasRegion> = aggregates
        .iter()
        .enumerate()
        .map(|(id, agg)| {
            let pixels = partition.pixel_count(id);
            let relevance: f64 = agg.iter().sum();
            let mut ranking = rank(agg);
            ranking.truncate(top_n);
            AtlasRegion {
                id,
                pixels,
                relevance,
                density: relevance / pixels as f64,
                flagged: false,
                ranking,
            }
        })
        .collect();
    if density_threshold {
        let max = regions.iter().map(|r| r.density).fold(f64::NEG_INFINITY, f64::max);
        for r in &mut regions {
            r.flagged = !(max > 0.0) || r.density < DENSITY_FRACTION * max;
        }
    }
    let assignment = regions
        .iter()
        .map(|r| RegionAssignment {
            region: r.id,
            primary: r.ranking.first().map(|s| s.channel),
            secondary: r.ranking.get(1).map(|s| s.channel),
        })
        .collect();
    Ok(ConceptAtlas {
        layer: layer.to_string(),
        top_n,
        density_threshold,
        regions,
        global,
        aggregates,
        assignment,
        labels: partition.labels().to_vec(),
        extent: (h, w),
    })
}

impl ConceptAtlas {
    /// Region fill in the primary concept's color with diagonal stripes in
    /// the secondary concept's color; flagged regions are light grey.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (h, w) = self.extent;
        if self.labels.len() != h * w {
            return Err(CrpError::InvalidArgument("atlas has no label map".into()));
        }
        let scale = (256 / h.max(w)).max(1);
        let (oh, ow) = (h * scale, w * scale);
        let mut rgb = Vec::with_capacity(oh * ow * 3);
        for y in 0..oh {
            for x in 0..ow {
                let region = self.labels[(y / scale) * w + x / scale];
                let a = &self.assignment[region];
                let px = if self.regions[region].flagged {
                    [235, 235, 235]
                } else {
                    let stripe = (x + y) % 8 < 3;
                    match (a.primary, a.secondary) {
                        (_, Some(s)) if stripe => palette(s),
                        (Some(p), _) => palette(p),
                        _ => [255, 255, 255],
                    }
                };
                rgb.extend_from_slice(&px);
            }
        }
        encode_rgb(ow, oh, &rgb)
    }
}

/// Channel ranking of `layer` restricted to the input pixels in `region`.
pub fn local_concept_query(
    trace: &ActivationTrace<'_>,
    base_cond: &ConditionSet,
    init: &InitSpec,
    rules: &RuleComposite,
    layer: &str,
    region: &BooleanMask,
) -> Result<Vec<ChannelScore>> {
    let c = check_layer(trace, layer)?;
    let (h, w) = spatial_extent(trace.graph().input_shape())?;
    if map_extent(region.shape())? != (h, w) {
        return Err(CrpError::Shape(format!(
            "region mask {:?} does not match the {h}x{w} input",
            region.shape()
        )));
    }
    if region.count() == 0 {
        return Err(CrpError::InvalidArgument("region mask is empty".into()));
    }
    let channels: Vec<usize> = (0..c).collect();
    let split = channel_input_relevance(trace, base_cond, init, rules, layer, &channels)?;
    let relevance: Vec<f64> = split
        .inputs
        .iter()
        .map(|input| {
            pixel_map(input, h * w)
                .into_iter()
                .zip(region.bits())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum()
        })
        .collect();
    Ok(rank(&relevance))
}
