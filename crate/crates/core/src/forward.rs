// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference over a [`ModelGraph`] recording every intermediate activation.
//!
//! Kernels accumulate in `f64` and store `f32`. Max pooling records the
//! flat input index of each window's winner (lowest index on ties) so the
//! backward pass can route relevance by lookup.

use std::collections::BTreeSet;

use crate::error::{CrpError, Result};
use crate::model_io::{BatchNormParams, ConvParams, DenseParams, ModelGraph, NodeInput, Op, PoolParams};
use crate::tensor::{chw, BooleanMask, Tensor};

/// Replacement applied to one layer's output during [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationEdit {
    pub layer: String,
    pub mode: EditMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EditMode {
    /// Sets the listed channels to zero.
    ZeroChannels(BTreeSet<usize>),
    /// `Z + alpha * M * (donor - Z)` with a spatial mask `M`.
    Blend {
        mask: BooleanMask,
        donor: Tensor<f32>,
        alpha: f64,
    },
    /// Like `Blend` with the donor replaced by per-channel mean activations.
    BlendMean {
        mask: BooleanMask,
        donor_means: Tensor<f32>,
        alpha: f64,
    },
}

impl ActivationEdit {
    pub fn zero_channels(layer: impl Into<String>, channels: impl IntoIterator<Item = usize>) -> Self {
        Self {
            layer: layer.into(),
            mode: EditMode::ZeroChannels(channels.into_iter().collect()),
        }
    }

    pub fn blend(layer: impl Into<String>, mask: BooleanMask, donor: Tensor<f32>, alpha: f64) -> Self {
        Self {
            layer: layer.into(),
            mode: EditMode::Blend { mask, donor, alpha },
        }
    }

    /// Same edit with a different blend factor. Zeroing edits are unchanged.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut e = self.clone();
        match &mut e.mode {
            EditMode::Blend { alpha: a, .. } | EditMode::BlendMean { alpha: a, .. } => *a = alpha,
            EditMode::ZeroChannels(_) => {}
        }
        e
    }

    fn apply(&self, z: &mut Tensor<f32>) -> Result<()> {
        let (c, h, w) = z.chw()?;
        let plane = h * w;
        let check_blend = |mask: &BooleanMask, alpha: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(CrpError::InvalidArgument(format!("blend alpha {alpha} outside [0, 1]")));
            }
            if !mask.matches_spatial(h, w) {
                return Err(CrpError::Shape(format!(
                    "edit mask shape {:?} does not match spatial shape {h}x{w} of layer {}",
                    mask.shape(),
                    self.layer
                )));
            }
            Ok(())
        };
        match &self.mode {
            EditMode::ZeroChannels(set) => {
                if let Some(&bad) = set.iter().find(|&&ch| ch >= c) {
                    return Err(CrpError::InvalidArgument(format!(
                        "channel {bad} out of range for layer {} with {c} channels",
                        self.layer
                    )));
                }
                let data = z.data_mut();
                for &ch in set {
                    data[ch * plane..(ch + 1) * plane].fill(0.0);
                }
            }
            EditMode::Blend { mask, donor, alpha } => {
                check_blend(mask, *alpha)?;
                if donor.shape() != z.shape() {
                    return Err(CrpError::Shape(format!(
                        "donor shape {:?} does not match layer {} output {:?}",
                        donor.shape(),
                        self.layer,
                        z.shape()
                    )));
                }
                let bits = mask.bits();
                for (i, v) in z.data_mut().iter_mut().enumerate() {
                    *v = blend(*v, donor.data()[i], if bits[i % plane] { *alpha } else { 0.0 });
                }
            }
            EditMode::BlendMean {
                mask,
                donor_means,
                alpha,
            } => {
                check_blend(mask, *alpha)?;
                if donor_means.shape() != [c] {
                    return Err(CrpError::Shape(format!(
                        "donor means have shape {:?}, layer {} has {c} channels",
                        donor_means.shape(),
                        self.layer
                    )));
                }
                let bits = mask.bits();
                for (i, v) in z.data_mut().iter_mut().enumerate() {
                    let d = donor_means.data()[i / plane];
                    *v = blend(*v, d, if bits[i % plane] { *alpha } else { 0.0 });
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn blend(z: f32, donor: f32, a: f64) -> f32 {
    if a == 0.0 {
        z
    } else if a == 1.0 {
        donor
    } else {
        (z as f64 + a * (donor as f64 - z as f64)) as f32
    }
}

/// Per-node outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace<'g> {
    graph: &'g ModelGraph,
    input: Tensor<f32>,
    outputs: Vec<Tensor<f32>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl<'g> ActivationTrace<'g> {
    pub fn graph(&self) -> &'g ModelGraph {
        self.graph
    }

    pub fn input(&self) -> &Tensor<f32> {
        &self.input
    }

    pub fn output(&self, node: usize) -> &Tensor<f32> {
        &self.outputs[node]
    }

    pub fn get(&self, layer: &str) -> Result<&Tensor<f32>> {
        Ok(&self.outputs[self.graph.node_index(layer)?])
    }

    /// Pre-activation output of a conv or dense node.
    pub fn preactivation(&self, layer: &str) -> Result<&Tensor<f32>> {
        let i = self.graph.node_index(layer)?;
        if !self.graph.node(i).op.is_linear() {
            return Err(CrpError::InvalidArgument(format!(
                "layer {layer} is not a linear layer"
            )));
        }
        Ok(&self.outputs[i])
    }

    pub fn logits(&self) -> &Tensor<f32> {
        &self.outputs[self.graph.output_index()]
    }

    /// Index of the largest logit (lowest index on ties).
    pub fn predicted_class(&self) -> usize {
        argmax_f32(self.logits().data())
    }

    /// Winner indices of a max-pooling node.
    pub fn argmax(&self, node: usize) -> Option<&[usize]> {
        self.argmax[node].as_deref()
    }

    /// Tensor consumed as operand `k` of `node`.
    pub fn operand(&self, node: usize, k: usize) -> &Tensor<f32> {
        match self.graph.node(node).inputs[k] {
            NodeInput::Input => &self.input,
            NodeInput::Node(j) => &self.outputs[j],
        }
    }

    /// Number of recorded tensors: one per node plus the input.
    pub fn len(&self) -> usize {
        self.outputs.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub(crate) fn argmax_f32(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the graph on `x`, applying `edits` to the named layers' outputs
/// before their consumers read them.
pub fn forward<'g>(graph: &'g ModelGraph, x: &Tensor<f32>, edits: &[ActivationEdit]) -> Result<ActivationTrace<'g>> {
    if x.shape() != graph.input_shape() {
        return Err(CrpError::Shape(format!(
            "input has shape {:?}, model expects {:?}",
            x.shape(),
            graph.input_shape()
        )));
    }
    let mut per_node: Vec<Vec<&ActivationEdit>> = vec![Vec::new(); graph.len()];
    for e in edits {
        let i = graph
            .node_index(&e.layer)
            .map_err(|_| CrpError::NotFound(format!("edit targets unknown layer {:?}", e.layer)))?;
        per_node[i].push(e);
    }

    let mut outputs: Vec<Tensor<f32>> = Vec::with_capacity(graph.len());
    let mut argmax = vec![None; graph.len()];
    for (i, node) in graph.nodes().iter().enumerate() {
        let operand = |k: usize| -> &Tensor<f32> {
            match node.inputs[k] {
                NodeInput::Input => x,
                NodeInput::Node(j) => &outputs[j],
            }
        };
        let a = operand(0);
        let mut out = match &node.op {
            Op::Conv(p) => conv_forward(p, a)?,
            Op::Dense(p) => dense_forward(p, a)?,
            Op::Relu => relu_forward(a),
            Op::MaxPool(p) => {
                let (t, idx) = maxpool_forward(p, a)?;
                argmax[i] = Some(idx);
                t
            }
            Op::AvgPool(p) => avgpool_forward(p, a)?,
            Op::Flatten => a.clone().reshape(node.output_shape.clone())?,
            Op::Add => add_forward(a, operand(1))?,
            Op::BatchNorm(p) => batchnorm_forward(p, a)?,
        };
        if out.shape() != node.output_shape.as_slice() {
            return Err(CrpError::Shape(format!(
                "layer {} produced {:?}, expected {:?}",
                node.id,
                out.shape(),
                node.output_shape
            )));
        }
        for e in &per_node[i] {
            e.apply(&mut out)?;
        }
        outputs.push(out);
    }
    Ok(ActivationTrace {
        graph,
        input: x.clone(),
        outputs,
        argmax,
    })
}

/// Zero-padded 2-D convolution over the `(C, H, W)` view of `x`.
pub fn conv_forward(p: &ConvParams, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = x.chw()?;
    if c != p.in_channels() {
        return Err(CrpError::Shape(format!(
            "conv expects {} channels, got {c}",
            p.in_channels()
        )));
    }
    let [kh, kw] = p.kernel();
    let [sh, sw] = p.stride;
    let [ph, pw] = p.padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let o_ch = p.out_channels();
    let wd = p.weight.data();
    let xd = x.data();
    let mut out = vec![0f32; o_ch * oh * ow];
    for o in 0..o_ch {
        let b = p.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
        for r in 0..oh {
            for q in 0..ow {
                let mut acc = b;
                for ci in 0..c {
                    for u in 0..kh {
                        let y = (r * sh + u) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let xx = (q * sw + v) as isize - pw as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let wi = ((o * c + ci) * kh + u) * kw + v;
                            let xi = (ci * h + y as usize) * w + xx as usize;
                            acc += wd[wi] as f64 * xd[xi] as f64;
                        }
                    }
                }
                out[(o * oh + r) * ow + q] = acc as f32;
            }
        }
    }
    let shape = if p.one_d { vec![o_ch, ow] } else { vec![o_ch, oh, ow] };
    Tensor::new(shape, out)
}

/// Affine map on the flattened input.
pub fn dense_forward(p: &DenseParams, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (out_f, in_f) = (p.weight.shape()[0], p.weight.shape()[1]);
    if x.len() != in_f {
        return Err(CrpError::Shape(format!(
            "dense expects {in_f} features, got {}",
            x.len()
        )));
    }
    let wd = p.weight.data();
    let xd = x.data();
    let out = (0..out_f)
        .map(|j| {
            let row = &wd[j * in_f..(j + 1) * in_f];
            let b = p.bias.as_ref().map_or(0.0, |b| b.data()[j] as f64);
            (row.iter().zip(xd).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>() + b) as f32
        })
        .collect();
    Tensor::new(vec![out_f], out)
}

pub fn relu_forward(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Max pooling with recorded winners (flat input index per output).
pub fn maxpool_forward(p: &PoolParams, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (c, h, w) = chw(x.shape())?;
    let [kh, kw] = p.kernel;
    let [sh, sw] = p.stride;
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for r in 0..oh {
            for q in 0..ow {
                let mut best = (ch * h + r * sh) * w + q * sw;
                for u in 0..kh {
                    for v in 0..kw {
                        let i = (ch * h + r * sh + u) * w + q * sw + v;
                        // Row-major scan: strict > keeps the lowest index on ties.
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, idx))
}

pub fn avgpool_forward(p: &PoolParams, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(x.shape())?;
    let [kh, kw] = p.kernel;
    let [sh, sw] = p.stride;
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let n = (kh * kw) as f64;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for r in 0..oh {
            for q in 0..ow {
                let mut acc = 0f64;
                for u in 0..kh {
                    for v in 0..kw {
                        acc += xd[(ch * h + r * sh + u) * w + q * sw + v] as f64;
                    }
                }
                out.push((acc / n) as f32);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn add_forward(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    a.zip_with(b, |x, y| x + y)
}

pub fn batchnorm_forward(p: &BatchNormParams, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i / plane;
        debug_assert!(ch < c);
        let inv = 1.0 / (p.var[ch] as f64 + p.eps).sqrt();
        *v = ((*v as f64 - p.mean[ch] as f64) * inv * p.gamma[ch] as f64 + p.beta[ch] as f64) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{uniform, GraphBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Convolution over an explicitly zero-padded copy of the input.
    fn padded_conv(
        x: &[f32],
        (c, h, w): (usize, usize, usize),
        wt: &[f32],
        o: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let mut xp = vec![0f64; c * hp * wp];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    xp[(ci * hp + y + p) * wp + xx + p] = x[(ci * h + y) * w + xx] as f64;
                }
            }
        }
        let (oh, ow) = ((hp - k) / s + 1, (wp - k) / s + 1);
        let mut out = Vec::new();
        for oc in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                acc += wt[((oc * c + ci) * k + u) * k + v] as f64
                                    * xp[(ci * hp + r * s + u) * wp + q * s + v];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_padded_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s, p) in [(3, 1, 1), (5, 2, 0), (1, 2, 1), (3, 2, 1)] {
            let wt = uniform(&mut rng, 4 * 2 * k * k, -1.0, 1.0);
            let g = GraphBuilder::new(&[2, 7, 9])
                .conv2d("c", &[], (2, 4), k, s, p, wt.clone(), None)
                .unwrap()
                .dense(
                    "fc",
                    &[],
                    (4 * ((7 + 2 * p - k) / s + 1) * ((9 + 2 * p - k) / s + 1), 1),
                    vec![0.0; 4 * ((7 + 2 * p - k) / s + 1) * ((9 + 2 * p - k) / s + 1)],
                    None,
                )
                .unwrap()
                .build()
                .unwrap();
            let x = Tensor::new(vec![2, 7, 9], uniform(&mut rng, 126, -1.0, 1.0)).unwrap();
            let t = forward(&g, &x, &[]).unwrap();
            let want = padded_conv(x.data(), (2, 7, 9), &wt, 4, k, s, p);
            for (a, b) in t.get("c").unwrap().data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5, "k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn identity_1x1_conv_copies_input() {
        let g = GraphBuilder::new(&[2, 3, 3])
            .conv2d("c", &[], (2, 2), 1, 1, 0, vec![1.0, 0.0, 0.0, 1.0], None)
            .unwrap()
            .dense("fc", &[], (18, 1), vec![0.0; 18], None)
            .unwrap()
            .build()
            .unwrap();
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f32 - 4.0).unwrap();
        let t = forward(&g, &x, &[]).unwrap();
        assert_eq!(t.get("c").unwrap().data(), x.data());
    }

    #[test]
    fn maxpool_keeps_first_winner_on_ties() {
        let p = PoolParams {
            kernel: [2, 2],
            stride: [2, 2],
        };
        let x = Tensor::new(vec![1, 2, 4], vec![1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 1.0]).unwrap();
        let (out, idx) = maxpool_forward(&p, &x).unwrap();
        assert_eq!(out.data(), &[3.0, 2.0]);
        assert_eq!(idx, vec![1, 2]);
    }

    #[test]
    fn edits_leave_earlier_layers_alone() {
        let g = crate::fixtures::lenet_random().unwrap();
        let x = Tensor::filled(&[1, 32, 32], 0.4).unwrap();
        let clean = forward(&g, &x, &[]).unwrap();
        let edited = forward(&g, &x, &[ActivationEdit::zero_channels("conv2", [0, 3])]).unwrap();
        for layer in ["conv1", "relu1", "pool1"] {
            assert_eq!(clean.get(layer).unwrap(), edited.get(layer).unwrap());
        }
        let z = edited.get("conv2").unwrap();
        assert!(z.data()[..100].iter().all(|&v| v == 0.0));
        assert_eq!(z.data()[100..300], clean.get("conv2").unwrap().data()[100..300]);
    }

    #[test]
    fn blend_endpoints() {
        let g = crate::fixtures::lenet_random().unwrap();
        let x = Tensor::filled(&[1, 32, 32], 0.4).unwrap();
        let y = Tensor::filled(&[1, 32, 32], 0.9).unwrap();
        let clean = forward(&g, &x, &[]).unwrap();
        let donor = forward(&g, &y, &[]).unwrap();
        let mask = BooleanMask::full(&[14, 14], true).unwrap();
        let d = donor.get("pool1").unwrap().clone();
        let zero = forward(&g, &x, &[ActivationEdit::blend("pool1", mask.clone(), d.clone(), 0.0)]).unwrap();
        assert_eq!(zero.logits(), clean.logits());
        let one = forward(&g, &x, &[ActivationEdit::blend("pool1", mask, d, 1.0)]).unwrap();
        assert_eq!(one.logits(), donor.logits());
        let half = BooleanMask::rect(14, 14, 0, 0, 7, 14).unwrap();
        assert!(forward(
            &g,
            &x,
            &[ActivationEdit::blend(
                "pool1",
                half,
                donor.get("pool1").unwrap().clone(),
                1.5
            )]
        )
        .is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let g = crate::fixtures::mlp8().unwrap();
        assert!(forward(&g, &Tensor::zeros(&[5]).unwrap(), &[]).is_err());
        assert!(forward(
            &g,
            &Tensor::zeros(&[4]).unwrap(),
            &[ActivationEdit::zero_channels("nope", [0])]
        )
        .is_err());
    }
}
