// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial concept analysis: receptive fields, masked references, region
//! partitions and concept atlases.

mod atlas;
mod regions;

use serde::{Deserialize, Serialize};

use crate::attribute::{attribute, ConditionSet, InitSpec, RuleComposite};
use crate::error::{CrpError, Result};
use crate::forward::forward;
use crate::model_io::{ModelGraph, Op};
use crate::tensor::{BooleanMask, Tensor};

pub use atlas::{build_atlas, local_concept_query, AtlasRegion, ChannelScore, ConceptAtlas, RegionAssignment};
pub use regions::{grid_partition, PartitionSource, RegionPartition};

/// Relevance magnitudes at or below this count as zero.
pub const FIELD_TOLERANCE: f64 = 1e-12;

/// Input pixels that can influence one neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub layer: String,
    pub neuron: Vec<usize>,
    #[serde(skip)]
    pub mask: Option<BooleanMask>,
    /// `(top, left, height, width)` of the tight box around the mask.
    pub bbox: (usize, usize, usize, usize),
}

impl ReceptiveField {
    pub fn mask(&self) -> &BooleanMask {
        self.mask.as_ref().expect("receptive field carries its mask")
    }
}

/// Spatial extent `(H, W)` of an input or layer shape.
pub(crate) fn spatial_extent(shape: &[usize]) -> Result<(usize, usize)> {
    let (_, h, w) = crate::tensor::chw(shape)?;
    Ok((h, w))
}

/// Extent `(H, W)` of a two-dimensional map; rank-1 maps are one row.
pub(crate) fn map_extent(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [w] => Ok((1, *w)),
        _ => Err(CrpError::Shape(format!("expected an (H, W) map, got {shape:?}"))),
    }
}

/// Receptive field of `neuron` (full output index of `layer`).
///
/// A flat-rule backward pass from a unit relevance at the neuron marks every
/// input pixel it can reach. Activations are irrelevant to the flat rule, so
/// an all-ones input is used.
pub fn receptive_field(graph: &ModelGraph, layer: &str, neuron: &[usize]) -> Result<ReceptiveField> {
    let li = graph.node_index(layer)?;
    let shape = graph.node(li).output_shape.clone();
    let mut relevance = Tensor::<f64>::zeros(&shape)?;
    let off = relevance.offset(neuron).map_err(|_| {
        CrpError::InvalidArgument(format!(
            "neuron {neuron:?} is outside layer {layer} with shape {shape:?}"
        ))
    })?;
    relevance.data_mut()[off] = 1.0;
    let ones = Tensor::filled(graph.input_shape(), 1.0f32)?;
    let trace = forward(graph, &ones, &[])?;
    let init = InitSpec::Layer {
        layer: layer.to_string(),
        relevance,
    };
    let r = attribute(
        &trace,
        &ConditionSet::new(),
        &init,
        &RuleComposite::flat_everywhere(),
        false,
    )?;
    let (h, w) = spatial_extent(graph.input_shape())?;
    let plane = h * w;
    let mut bits = vec![false; plane];
    for (k, v) in r.input().data().iter().enumerate() {
        if v.abs() > FIELD_TOLERANCE {
            bits[k % plane] = true;
        }
    }
    let mask = BooleanMask::new(vec![h, w], bits)?;
    let bbox =
        tight_box(&mask).ok_or_else(|| CrpError::Numeric(format!("receptive field of {layer}{neuron:?} is empty")))?;
    Ok(ReceptiveField {
        layer: layer.to_string(),
        neuron: neuron.to_vec(),
        mask: Some(mask),
        bbox,
    })
}

/// Tight `(top, left, height, width)` box around the true bits.
pub fn tight_box(mask: &BooleanMask) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = map_extent(mask.shape()).ok()?;
    let (mut t, mut l, mut b, mut r) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.bits()[y * w + x] {
                t = t.min(y);
                l = l.min(x);
                b = b.max(y);
                r = r.max(x);
            }
        }
    }
    (t != usize::MAX).then(|| (t, l, b - t + 1, r - l + 1))
}

/// True if `layer` has a channel axis (everything except flatten).
pub fn has_channel_axis(graph: &ModelGraph, layer: &str) -> Result<bool> {
    Ok(!matches!(graph.node(graph.node_index(layer)?).op, Op::Flatten))
}

/// Full index of the largest value in one channel of a layer output
/// (lowest index on ties).
pub fn argmax_in_channel(t: &Tensor<f32>, channel: usize) -> Result<Vec<usize>> {
    let (c, _, _) = t.chw()?;
    if channel >= c {
        return Err(CrpError::InvalidArgument(format!("channel {channel} of {c}")));
    }
    let plane = t.len() / c;
    let slice = &t.data()[channel * plane..(channel + 1) * plane];
    let mut best = 0;
    for (i, &v) in slice.iter().enumerate() {
        if v > slice[best] {
            best = i;
        }
    }
    let flat = channel * plane + best;
    let mut idx = vec![0; t.rank()];
    let mut rem = flat;
    for d in (0..t.rank()).rev() {
        idx[d] = rem % t.shape()[d];
        rem /= t.shape()[d];
    }
    Ok(idx)
}

/// Gaussian smoothing kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self { kernel: 29, sigma: 4.7 }
    }
}

impl GaussianSpec {
    /// Default kernel scaled down for inputs smaller than 224 px.
    pub fn scaled_for(h: usize, w: usize) -> Self {
        let s = h.min(w) as f64 / 224.0;
        if s >= 1.0 {
            return Self::default();
        }
        let mut kernel = ((29.0 * s).round() as usize).max(1);
        if kernel.is_multiple_of(2) {
            kernel += 1;
        }
        Self {
            kernel,
            sigma: (4.7 * s).max(1e-3),
        }
    }

    fn weights(&self) -> Vec<f64> {
        let r = (self.kernel / 2) as isize;
        let w: Vec<f64> = (-r..=r)
            .map(|d| (-(d * d) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    /// Separable zero-padded smoothing of an `(H, W)` map.
    pub fn smooth(&self, map: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (h, w) = map_extent(map.shape())?;
        let k = self.weights();
        let r = (k.len() / 2) as isize;
        let d = map.data();
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let xx = x as isize + i as isize - r;
                        if xx < 0 || xx >= w as isize {
                            0.0
                        } else {
                            kv * d[y * w + xx as usize]
                        }
                    })
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let yy = y as isize + i as isize - r;
                        if yy < 0 || yy >= h as isize {
                            0.0
                        } else {
                            kv * tmp[yy as usize * w + x]
                        }
                    })
                    .sum();
            }
        }
        Tensor::new(map.shape().to_vec(), out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedReference {
    /// Sample with low-relevance pixels set to zero.
    pub sample: Tensor<f32>,
    /// Pixels that were kept.
    pub kept: BooleanMask,
    /// Set when the map had no positive values and nothing was masked.
    pub unmasked: bool,
    /// Masked sample cropped to the receptive field box, when one was given.
    pub crop: Option<Tensor<f32>>,
}

/// Zeros pixels whose relevance is below `threshold_fraction * max(rel)`.
pub fn mask_reference(
    sample: &Tensor<f32>,
    rel_map: &Tensor<f64>,
    threshold_fraction: f64,
    smooth: Option<&GaussianSpec>,
    field: Option<&ReceptiveField>,
) -> Result<MaskedReference> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(CrpError::InvalidArgument(format!(
            "threshold fraction {threshold_fraction} outside (0, 1)"
        )));
    }
    let (_, h, w) = sample.chw()?;
    if map_extent(rel_map.shape())? != (h, w) || rel_map.len() != h * w {
        return Err(CrpError::Shape(format!(
            "relevance map {:?} does not match sample {:?}",
            rel_map.shape(),
            sample.shape()
        )));
    }
    let map = match smooth {
        Some(g) => g.smooth(rel_map)?,
        None => rel_map.clone(),
    };
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unmasked = !(max > 0.0);
    let bits: Vec<bool> = if unmasked {
        vec![true; h * w]
    } else {
        map.data().iter().map(|&v| v >= threshold_fraction * max).collect()
    };
    let mut out = sample.clone();
    let plane = h * w;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !bits[i % plane] {
            *v = 0.0;
        }
    }
    let crop = field.map(|f| crop(&out, f.bbox)).transpose()?;
    Ok(MaskedReference {
        sample: out,
        kept: BooleanMask::new(vec![h, w], bits)?,
        unmasked,
        crop,
    })
}

/// Cuts `(top, left, height, width)` out of every channel.
pub fn crop(sample: &Tensor<f32>, bbox: (usize, usize, usize, usize)) -> Result<Tensor<f32>> {
    let (c, h, w) = sample.chw()?;
    let (t, l, bh, bw) = bbox;
    if t + bh > h || l + bw > w || bh == 0 || bw == 0 {
        return Err(CrpError::InvalidArgument(format!("crop box {bbox:?} outside {h}x{w}")));
    }
    let mut data = Vec::with_capacity(c * bh * bw);
    for ch in 0..c {
        for y in t..t + bh {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&sample.data()[row + l..row + l + bw]);
        }
    }
    Tensor::new(vec![c, bh, bw], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::GraphBuilder;

    fn conv_stack(layers: &[(usize, usize, usize)], size: usize) -> ModelGraph {
        let mut b = GraphBuilder::new(&[1, size, size]);
        let mut ids = Vec::new();
        for (n, &(k, s, p)) in layers.iter().enumerate() {
            let id = format!("c{n}");
            b = b.conv2d(&id, &[], (1, 1), k, s, p, vec![1.0; k * k], None).unwrap();
            ids.push(id);
        }
        let last: usize = {
            let g = b.clone().relu("r", &[]).flatten("f", &[]).build().unwrap();
            g.node(g.len() - 1).output_shape[0]
        };
        b.dense("fc", &[], (last, 1), vec![1.0; last], None)
            .unwrap()
            .build()
            .unwrap()
    }

    #[test]
    fn single_conv_center_neuron_is_kernel_footprint() {
        let g = conv_stack(&[(3, 1, 0)], 7);
        let f = receptive_field(&g, "c0", &[0, 2, 2]).unwrap();
        assert_eq!(f.bbox, (2, 2, 3, 3));
        assert_eq!(f.mask().count(), 9);
    }

    #[test]
    fn stacked_convs_give_five_by_five() {
        let g = conv_stack(&[(3, 1, 0), (3, 1, 0)], 9);
        let f = receptive_field(&g, "c1", &[0, 2, 2]).unwrap();
        assert_eq!(f.bbox, (2, 2, 5, 5));
        assert_eq!(f.mask().count(), 25);
    }

    #[test]
    fn padded_corner_neuron_is_clipped() {
        let g = conv_stack(&[(3, 1, 1)], 6);
        let f = receptive_field(&g, "c0", &[0, 0, 0]).unwrap();
        assert_eq!(f.bbox, (0, 0, 2, 2));
    }

    #[test]
    fn invalid_neuron_is_rejected() {
        let g = conv_stack(&[(3, 1, 0)], 7);
        assert!(receptive_field(&g, "c0", &[0, 9, 0]).is_err());
    }

    #[test]
    fn forty_percent_threshold() {
        let s = Tensor::filled(&[1, 1, 3], 1.0f32).unwrap();
        let rel = Tensor::new(vec![1, 3], vec![0.1, 0.5, 1.0]).unwrap();
        let m = mask_reference(&s, &rel, 0.4, None, None).unwrap();
        assert_eq!(m.kept.bits(), &[false, true, true]);
        assert_eq!(m.sample.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_map_masks_nothing_and_masking_is_idempotent() {
        let s = Tensor::from_fn(&[2, 3, 3], |i| i as f32).unwrap();
        let uniform = Tensor::filled(&[3, 3], 0.7).unwrap();
        let m = mask_reference(&s, &uniform, 0.99, None, None).unwrap();
        assert_eq!(m.sample, s);
        let rel = Tensor::from_fn(&[3, 3], |i| i as f64).unwrap();
        let once = mask_reference(&s, &rel, 0.4, None, None).unwrap();
        let twice = mask_reference(&once.sample, &rel, 0.4, None, None).unwrap();
        assert_eq!(once.sample, twice.sample);
    }

    #[test]
    fn zero_map_is_flagged_and_untouched() {
        let s = Tensor::filled(&[1, 2, 2], 3.0f32).unwrap();
        let m = mask_reference(&s, &Tensor::zeros(&[2, 2]).unwrap(), 0.4, None, None).unwrap();
        assert!(m.unmasked);
        assert_eq!(m.sample, s);
    }

    #[test]
    fn gaussian_preserves_mass_in_the_interior() {
        let mut map = Tensor::<f64>::zeros(&[31, 31]).unwrap();
        map.data_mut()[15 * 31 + 15] = 1.0;
        let g = GaussianSpec { kernel: 9, sigma: 1.5 };
        let s = g.smooth(&map).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-12);
        assert!(s.data()[15 * 31 + 15] < 1.0);
        assert_eq!(GaussianSpec::scaled_for(224, 224), GaussianSpec::default());
        assert_eq!(GaussianSpec::scaled_for(32, 32).kernel % 2, 1);
    }
}
