// SPDX-License-Identifier: MIT OR Apache-2.0

//! Relevance decomposition rules and their per-node kernels.
//!
//! For a linear node with inputs `x_i`, weights `w_ij` and contributions
//! `z_ij = w_ij x_i` (bias excluded, `z_j = sum_i z_ij`):
//!
//! * epsilon: `R_i = sum_j z_ij / (z_j + eps * sign(z_j)) * R_j`, `sign(0) = 1`
//! * z-plus:  `R_i = sum_j (z_ij)+ / sum_i (z_ij)+ * R_j`; a neuron without
//!   positive contributions passes nothing down
//! * flat:    `R_i = sum_j R_j / n_j`, `n_j` counting every connected input
//!   including zero-padding positions, whose share is dropped

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CrpError, Result};
use crate::model_io::{ConvParams, DenseParams, ModelGraph, Op, PoolParams};
use crate::tensor::chw;

/// Stabilizer used when a rule needs one and none is given.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    Epsilon(f64),
    ZPlus,
    Flat,
    /// Identity backward pass (ReLU, flatten).
    Passthrough,
    /// Max pooling: all relevance to the recorded window winner.
    WinnerTakeAll,
    /// Add nodes: split by operand contribution, epsilon-stabilized.
    Proportional,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Epsilon(e) => write!(f, "epsilon:{e}"),
            Rule::ZPlus => f.write_str("zplus"),
            Rule::Flat => f.write_str("flat"),
            Rule::Passthrough => f.write_str("passthrough"),
            Rule::WinnerTakeAll => f.write_str("wta"),
            Rule::Proportional => f.write_str("proportional"),
        }
    }
}

impl FromStr for Rule {
    type Err = CrpError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("epsilon") {
            let eps = match rest.strip_prefix(':') {
                Some(v) => v
                    .parse::<f64>()
                    .map_err(|_| CrpError::Rule(format!("bad epsilon value {v:?}")))?,
                None if rest.is_empty() => DEFAULT_EPSILON,
                None => return Err(CrpError::Rule(format!("unknown rule {s:?}"))),
            };
            return Ok(Rule::Epsilon(eps));
        }
        match s {
            "zplus" | "z+" => Ok(Rule::ZPlus),
            "flat" => Ok(Rule::Flat),
            "passthrough" => Ok(Rule::Passthrough),
            "wta" | "winner_take_all" => Ok(Rule::WinnerTakeAll),
            "proportional" => Ok(Rule::Proportional),
            _ => Err(CrpError::Rule(format!("unknown rule {s:?}"))),
        }
    }
}

impl Serialize for Rule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Assignment of rules to graph nodes.
///
/// Resolution order per node: an explicit per-layer override, then the
/// first-linear-layer rule, then the rule for the node's kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleComposite {
    /// Rule for the first conv or dense node in topological order.
    pub first_linear: Option<Rule>,
    pub conv: Rule,
    pub dense: Rule,
    pub maxpool: Rule,
    pub avgpool: Rule,
    pub add: Rule,
    #[serde(default)]
    pub overrides: BTreeMap<String, Rule>,
}

impl Default for RuleComposite {
    fn default() -> Self {
        Self::epsilon_zplus_flat(DEFAULT_EPSILON)
    }
}

impl RuleComposite {
    /// Flat on the first linear layer, z-plus on other convs, epsilon on
    /// dense layers.
    pub fn epsilon_zplus_flat(epsilon: f64) -> Self {
        Self {
            first_linear: Some(Rule::Flat),
            conv: Rule::ZPlus,
            dense: Rule::Epsilon(epsilon),
            maxpool: Rule::WinnerTakeAll,
            avgpool: Rule::ZPlus,
            add: Rule::Proportional,
            overrides: BTreeMap::new(),
        }
    }

    /// Flat on the first linear layer and z-plus on every other one.
    pub fn zplus_flat() -> Self {
        Self {
            dense: Rule::ZPlus,
            ..Self::epsilon_zplus_flat(DEFAULT_EPSILON)
        }
    }

    /// The same rule on every linear layer.
    pub fn uniform(rule: Rule) -> Self {
        Self {
            first_linear: None,
            conv: rule,
            dense: rule,
            ..Self::epsilon_zplus_flat(DEFAULT_EPSILON)
        }
    }

    /// Flat everywhere: every connected input shares relevance equally.
    /// Used for receptive-field computation.
    pub fn flat_everywhere() -> Self {
        Self {
            first_linear: None,
            conv: Rule::Flat,
            dense: Rule::Flat,
            maxpool: Rule::Flat,
            avgpool: Rule::Flat,
            add: Rule::Flat,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, layer: impl Into<String>, rule: Rule) -> Self {
        self.overrides.insert(layer.into(), rule);
        self
    }

    /// Resolves one rule per node and checks it is applicable.
    pub fn resolve(&self, graph: &ModelGraph) -> Result<Vec<Rule>> {
        for layer in self.overrides.keys() {
            graph
                .node_index(layer)
                .map_err(|_| CrpError::Rule(format!("override for unknown layer {layer:?}")))?;
        }
        let first = graph.nodes().iter().position(|n| n.op.is_linear());
        graph
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let rule = if let Some(r) = self.overrides.get(&node.id) {
                    *r
                } else if let (true, Some(r)) = (Some(i) == first, self.first_linear) {
                    r
                } else {
                    match node.op {
                        Op::Conv(_) => self.conv,
                        Op::Dense(_) => self.dense,
                        Op::MaxPool(_) => self.maxpool,
                        Op::AvgPool(_) => self.avgpool,
                        Op::Add => self.add,
                        Op::Relu | Op::Flatten => Rule::Passthrough,
                        Op::BatchNorm(_) => {
                            return Err(CrpError::Rule(format!(
                                "layer {} is a batchnorm; canonize the model before attribution",
                                node.id
                            )))
                        }
                    }
                };
                check_applicable(&node.id, &node.op, rule)?;
                Ok(rule)
            })
            .collect()
    }
}

fn check_applicable(id: &str, op: &Op, rule: Rule) -> Result<()> {
    if let Rule::Epsilon(e) = rule {
        if !(e > 0.0) || !e.is_finite() {
            return Err(CrpError::Rule(format!(
                "epsilon must be positive and finite, got {e} for layer {id}"
            )));
        }
    }
    let ok = match op {
        Op::Conv(_) | Op::Dense(_) => matches!(rule, Rule::Epsilon(_) | Rule::ZPlus | Rule::Flat),
        Op::Relu | Op::Flatten => matches!(rule, Rule::Passthrough | Rule::Flat),
        Op::MaxPool(_) => matches!(rule, Rule::WinnerTakeAll | Rule::Flat),
        Op::AvgPool(_) => matches!(rule, Rule::ZPlus | Rule::Epsilon(_) | Rule::Flat | Rule::Proportional),
        Op::Add => matches!(rule, Rule::Proportional | Rule::Epsilon(_) | Rule::Flat),
        Op::BatchNorm(_) => false,
    };
    if ok {
        Ok(())
    } else {
        Err(CrpError::Rule(format!(
            "rule {rule} cannot be applied to {} layer {id}",
            op.kind_name()
        )))
    }
}

/// Denominator stabilizer with `sign(0) = 1`.
#[inline]
pub fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Input-side geometry of a conv node, shared by the linear kernels.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeometry {
    fn new(p: &ConvParams, in_shape: &[usize]) -> Result<Self> {
        let (c, h, w) = chw(in_shape)?;
        let [kh, kw] = p.kernel();
        let oh = (h + 2 * p.padding[0] - kh) / p.stride[0] + 1;
        let ow = (w + 2 * p.padding[1] - kw) / p.stride[1] + 1;
        Ok(Self {
            c,
            h,
            w,
            o: p.out_channels(),
            oh,
            ow,
            kh,
            kw,
            sh: p.stride[0],
            sw: p.stride[1],
            ph: p.padding[0],
            pw: p.padding[1],
        })
    }

    /// Calls `f(weight_index, input_index)` for every in-bounds connection of
    /// output neuron `(o, r, q)`.
    #[inline]
    fn connections(&self, o: usize, r: usize, q: usize, mut f: impl FnMut(usize, usize)) {
        for ci in 0..self.c {
            for u in 0..self.kh {
                let y = (r * self.sh + u) as isize - self.ph as isize;
                if y < 0 || y >= self.h as isize {
                    continue;
                }
                for v in 0..self.kw {
                    let x = (q * self.sw + v) as isize - self.pw as isize;
                    if x < 0 || x >= self.w as isize {
                        continue;
                    }
                    f(
                        ((o * self.c + ci) * self.kh + u) * self.kw + v,
                        (ci * self.h + y as usize) * self.w + x as usize,
                    );
                }
            }
        }
    }
}

/// Backward pass through a conv node. Returns input relevance.
pub fn conv_backward(p: &ConvParams, x: &[f32], in_shape: &[usize], r_out: &[f64], rule: Rule) -> Result<Vec<f64>> {
    let g = ConvGeometry::new(p, in_shape)?;
    let wd = p.weight.data();
    let mut r_in = vec![0f64; x.len()];
    let fan_in = (g.c * g.kh * g.kw) as f64;
    for o in 0..g.o {
        for r in 0..g.oh {
            for q in 0..g.ow {
                let j = (o * g.oh + r) * g.ow + q;
                let rj = r_out[j];
                if rj == 0.0 {
                    continue;
                }
                match rule {
                    Rule::Epsilon(eps) => {
                        let mut z = 0f64;
                        g.connections(o, r, q, |wi, xi| z += wd[wi] as f64 * x[xi] as f64);
                        let s = rj / stabilize(z, eps);
                        g.connections(o, r, q, |wi, xi| r_in[xi] += wd[wi] as f64 * x[xi] as f64 * s);
                    }
                    Rule::ZPlus => {
                        let mut z = 0f64;
                        g.connections(o, r, q, |wi, xi| z += (wd[wi] as f64 * x[xi] as f64).max(0.0));
                        if z > 0.0 {
                            let s = rj / z;
                            g.connections(o, r, q, |wi, xi| {
                                r_in[xi] += (wd[wi] as f64 * x[xi] as f64).max(0.0) * s
                            });
                        }
                    }
                    Rule::Flat => {
                        let s = rj / fan_in;
                        g.connections(o, r, q, |_, xi| r_in[xi] += s);
                    }
                    other => {
                        return Err(CrpError::Rule(format!("rule {other} on a conv layer")));
                    }
                }
            }
        }
    }
    Ok(r_in)
}

/// Backward pass through a dense node on the flattened input.
pub fn dense_backward(p: &DenseParams, x: &[f32], r_out: &[f64], rule: Rule) -> Result<Vec<f64>> {
    let (out_f, in_f) = (p.weight.shape()[0], p.weight.shape()[1]);
    let wd = p.weight.data();
    let mut r_in = vec![0f64; in_f];
    for (j, &rj) in r_out.iter().enumerate().take(out_f) {
        if rj == 0.0 {
            continue;
        }
        let row = &wd[j * in_f..(j + 1) * in_f];
        match rule {
            Rule::Epsilon(eps) => {
                let z: f64 = row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum();
                let s = rj / stabilize(z, eps);
                for ((ri, &w), &v) in r_in.iter_mut().zip(row).zip(x) {
                    *ri += w as f64 * v as f64 * s;
                }
            }
            Rule::ZPlus => {
                let z: f64 = row.iter().zip(x).map(|(&w, &v)| (w as f64 * v as f64).max(0.0)).sum();
                if z > 0.0 {
                    let s = rj / z;
                    for ((ri, &w), &v) in r_in.iter_mut().zip(row).zip(x) {
                        *ri += (w as f64 * v as f64).max(0.0) * s;
                    }
                }
            }
            Rule::Flat => {
                let s = rj / in_f as f64;
                r_in.iter_mut().for_each(|ri| *ri += s);
            }
            other => return Err(CrpError::Rule(format!("rule {other} on a dense layer"))),
        }
    }
    Ok(r_in)
}

/// Max pooling: winner-take-all via recorded indices, or flat over the window.
pub fn maxpool_backward(
    p: &PoolParams,
    in_shape: &[usize],
    winners: Option<&[usize]>,
    r_out: &[f64],
    rule: Rule,
) -> Result<Vec<f64>> {
    let n: usize = in_shape.iter().product();
    let mut r_in = vec![0f64; n];
    match rule {
        Rule::WinnerTakeAll => {
            let winners = winners.ok_or_else(|| CrpError::Rule("max pooling winners were not recorded".into()))?;
            for (&rj, &i) in r_out.iter().zip(winners) {
                r_in[i] += rj;
            }
        }
        Rule::Flat => pool_windows(p, in_shape, |j, window| {
            let s = r_out[j] / window.len() as f64;
            for &i in window {
                r_in[i] += s;
            }
        })?,
        other => return Err(CrpError::Rule(format!("rule {other} on a maxpool layer"))),
    }
    Ok(r_in)
}

/// Average pooling treated as a linear layer with uniform weights.
pub fn avgpool_backward(p: &PoolParams, x: &[f32], in_shape: &[usize], r_out: &[f64], rule: Rule) -> Result<Vec<f64>> {
    let mut r_in = vec![0f64; x.len()];
    let k = (p.kernel[0] * p.kernel[1]) as f64;
    pool_windows(p, in_shape, |j, window| {
        let rj = r_out[j];
        if rj == 0.0 {
            return;
        }
        match rule {
            Rule::ZPlus => {
                let z: f64 = window.iter().map(|&i| (x[i] as f64 / k).max(0.0)).sum();
                if z > 0.0 {
                    for &i in window {
                        r_in[i] += (x[i] as f64 / k).max(0.0) / z * rj;
                    }
                }
            }
            Rule::Epsilon(_) | Rule::Proportional => {
                let eps = if let Rule::Epsilon(e) = rule {
                    e
                } else {
                    DEFAULT_EPSILON
                };
                let z: f64 = window.iter().map(|&i| x[i] as f64 / k).sum();
                let s = rj / stabilize(z, eps);
                for &i in window {
                    r_in[i] += x[i] as f64 / k * s;
                }
            }
            _ => {
                for &i in window {
                    r_in[i] += rj / window.len() as f64;
                }
            }
        }
    })?;
    Ok(r_in)
}

fn pool_windows(p: &PoolParams, in_shape: &[usize], mut f: impl FnMut(usize, &[usize])) -> Result<()> {
    let (c, h, w) = chw(in_shape)?;
    let [kh, kw] = p.kernel;
    let [sh, sw] = p.stride;
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let mut window = Vec::with_capacity(kh * kw);
    for ch in 0..c {
        for r in 0..oh {
            for q in 0..ow {
                window.clear();
                for u in 0..kh {
                    for v in 0..kw {
                        window.push((ch * h + r * sh + u) * w + q * sw + v);
                    }
                }
                f((ch * oh + r) * ow + q, &window);
            }
        }
    }
    Ok(())
}

/// Splits relevance of an add node between its two operands.
pub fn add_backward(a: &[f32], b: &[f32], r_out: &[f64], rule: Rule) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ra = vec![0f64; a.len()];
    let mut rb = vec![0f64; b.len()];
    match rule {
        Rule::Flat => {
            for i in 0..r_out.len() {
                ra[i] = r_out[i] / 2.0;
                rb[i] = r_out[i] / 2.0;
            }
        }
        Rule::Proportional | Rule::Epsilon(_) => {
            let eps = if let Rule::Epsilon(e) = rule {
                e
            } else {
                DEFAULT_EPSILON
            };
            for i in 0..r_out.len() {
                let (za, zb) = (a[i] as f64, b[i] as f64);
                let s = r_out[i] / stabilize(za + zb, eps);
                ra[i] = za * s;
                rb[i] = zb * s;
            }
        }
        other => return Err(CrpError::Rule(format!("rule {other} on an add layer"))),
    }
    Ok((ra, rb))
}
