// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force conditional relevance propagation.
//!
//! Every node is expanded into an explicit list of neuron-to-neuron
//! connections with their contributions `z_ij`. Relevance messages
//! `R_{i<-j}` are then formed pair by pair and summed per lower neuron.
//! Nothing here calls into the attribution module; only the forward
//! activations are shared.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{CrpError, Result};
use crate::forward::ActivationTrace;
use crate::model_io::{NodeInput, Op};

/// Largest network (input units plus conv/dense output units) accepted.
pub const MAX_NEURONS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleRule {
    Epsilon(f64),
    ZPlus,
    /// `R_j / n_j` with `n_j` counting padded inputs.
    Flat,
    Identity,
    WinnerTakeAll,
    /// `z_ij / (z_j + eps * sign(z_j)) * R_j` over operand contributions.
    Proportional(f64),
}

/// One relevance message between neurons of adjacent tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    /// Layer the message leaves.
    pub from: String,
    /// Operand position of the receiving tensor.
    pub operand: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleAttribution {
    pub layers: BTreeMap<String, Vec<f64>>,
    pub input: Vec<f64>,
    pub messages: Vec<Message>,
}

struct Link {
    operand: usize,
    i: usize,
    j: usize,
    z: f64,
}

/// Relevance for every layer of the traced network, starting from
/// `output_relevance` at the output node.
///
/// `rules` must name every conv and dense layer; other layers default to
/// identity (relu, flatten), winner-take-all (maxpool), z-plus (avgpool)
/// and proportional with `1e-6` (add).
pub fn oracle_attribute(
    trace: &ActivationTrace<'_>,
    conditions: &BTreeMap<String, BTreeSet<usize>>,
    rules: &BTreeMap<String, OracleRule>,
    output_relevance: &[f64],
) -> Result<OracleAttribution> {
    let g = trace.graph();
    let neurons = trace.input().len()
        + g.nodes()
            .iter()
            .filter(|n| n.op.is_linear())
            .map(|n| n.output_shape.iter().product::<usize>())
            .sum::<usize>();
    if neurons > MAX_NEURONS {
        return Err(CrpError::InvalidArgument(format!(
            "oracle supports at most {MAX_NEURONS} neurons, network has {neurons}"
        )));
    }
    let out = g.output_index();
    if output_relevance.len() != trace.output(out).len() {
        return Err(CrpError::InvalidArgument("output relevance length mismatch".into()));
    }

    let mut rel: Vec<Vec<f64>> = g
        .nodes()
        .iter()
        .map(|n| vec![0.0; n.output_shape.iter().product()])
        .collect();
    let mut input = vec![0.0; trace.input().len()];
    rel[out] = output_relevance.to_vec();
    let mut messages = Vec::new();

    for n in (0..g.len()).rev() {
        let node = g.node(n);
        let len = rel[n].len();
        let channels = node.output_shape[0];
        if let Some(keep) = conditions.get(&node.id) {
            for j in 0..len {
                if !keep.contains(&(j / (len / channels))) {
                    rel[n][j] = 0.0;
                }
            }
        }
        let rule = match rules.get(&node.id) {
            Some(r) => *r,
            None => match node.op {
                Op::Relu | Op::Flatten => OracleRule::Identity,
                Op::MaxPool(_) => OracleRule::WinnerTakeAll,
                Op::AvgPool(_) => OracleRule::ZPlus,
                Op::Add => OracleRule::Proportional(1e-6),
                _ => {
                    return Err(CrpError::InvalidArgument(format!(
                        "oracle needs a rule for layer {}",
                        node.id
                    )))
                }
            },
        };
        let (links, fan_in) = expand(trace, n)?;
        let winners = if matches!(node.op, Op::MaxPool(_)) {
            Some(pool_winners(trace, n, &links))
        } else {
            None
        };

        let mut zj = vec![0.0; len];
        let mut zj_pos = vec![0.0; len];
        for l in &links {
            zj[l.j] += l.z;
            zj_pos[l.j] += l.z.max(0.0);
        }
        let r_out = rel[n].clone();
        for l in &links {
            let rj = r_out[l.j];
            let value = match rule {
                OracleRule::Epsilon(e) | OracleRule::Proportional(e) => {
                    let d = if zj[l.j] >= 0.0 { zj[l.j] + e } else { zj[l.j] - e };
                    l.z / d * rj
                }
                OracleRule::ZPlus => {
                    if zj_pos[l.j] > 0.0 {
                        l.z.max(0.0) / zj_pos[l.j] * rj
                    } else {
                        0.0
                    }
                }
                OracleRule::Flat => rj / fan_in[l.j] as f64,
                OracleRule::Identity => rj,
                OracleRule::WinnerTakeAll => {
                    if winners.as_ref().expect("pool winners")[l.j] == l.i {
                        rj
                    } else {
                        0.0
                    }
                }
            };
            match node.inputs[l.operand] {
                NodeInput::Input => input[l.i] += value,
                NodeInput::Node(k) => rel[k][l.i] += value,
            }
            messages.push(Message {
                from: node.id.clone(),
                operand: l.operand,
                i: l.i,
                j: l.j,
                value,
            });
        }
    }

    Ok(OracleAttribution {
        layers: g.nodes().iter().map(|n| n.id.clone()).zip(rel).collect(),
        input,
        messages,
    })
}

/// Connections of node `n` and the fan-in of each output neuron.
fn expand(trace: &ActivationTrace<'_>, n: usize) -> Result<(Vec<Link>, Vec<usize>)> {
    let g = trace.graph();
    let node = g.node(n);
    let x = trace.operand(n, 0);
    let out_len: usize = node.output_shape.iter().product();
    let mut links = Vec::new();
    let mut fan_in = vec![0usize; out_len];
    let dims3 = |s: &[usize]| -> (usize, usize, usize) {
        match s.len() {
            1 => (s[0], 1, 1),
            2 => (s[0], 1, s[1]),
            _ => (s[0], s[1], s[2]),
        }
    };
    match &node.op {
        Op::Dense(p) => {
            for j in 0..out_len {
                for i in 0..x.len() {
                    let w = p.weight.at(&[j, i])? as f64;
                    links.push(Link {
                        operand: 0,
                        i,
                        j,
                        z: w * x.data()[i] as f64,
                    });
                    fan_in[j] += 1;
                }
            }
        }
        Op::Conv(p) => {
            let (c, h, w) = dims3(x.shape());
            let (o_n, oh, ow) = dims3(&node.output_shape);
            let (kh, kw) = (p.weight.shape()[2], p.weight.shape()[3]);
            for o in 0..o_n {
                for r in 0..oh {
                    for q in 0..ow {
                        let j = (o * oh + r) * ow + q;
                        for ci in 0..c {
                            for u in 0..kh {
                                for v in 0..kw {
                                    fan_in[j] += 1;
                                    let y = (r * p.stride[0] + u) as i64 - p.padding[0] as i64;
                                    let xx = (q * p.stride[1] + v) as i64 - p.padding[1] as i64;
                                    if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
                                        continue;
                                    }
                                    let i = (ci * h + y as usize) * w + xx as usize;
                                    let wv = p.weight.at(&[o, ci, u, v])? as f64;
                                    links.push(Link {
                                        operand: 0,
                                        i,
                                        j,
                                        z: wv * x.data()[i] as f64,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool(p) | Op::AvgPool(p) => {
            let (c, h, w) = dims3(x.shape());
            let (_, oh, ow) = dims3(&node.output_shape);
            let k = (p.kernel[0] * p.kernel[1]) as f64;
            let avg = matches!(node.op, Op::AvgPool(_));
            for ch in 0..c {
                for r in 0..oh {
                    for q in 0..ow {
                        let j = (ch * oh + r) * ow + q;
                        for u in 0..p.kernel[0] {
                            for v in 0..p.kernel[1] {
                                let i = (ch * h + r * p.stride[0] + u) * w + q * p.stride[1] + v;
                                let xv = x.data()[i] as f64;
                                links.push(Link {
                                    operand: 0,
                                    i,
                                    j,
                                    z: if avg { xv / k } else { xv },
                                });
                                fan_in[j] += 1;
                            }
                        }
                    }
                }
            }
        }
        Op::Relu | Op::Flatten => {
            for j in 0..out_len {
                links.push(Link {
                    operand: 0,
                    i: j,
                    j,
                    z: x.data()[j] as f64,
                });
                fan_in[j] = 1;
            }
        }
        Op::Add => {
            let b = trace.operand(n, 1);
            for j in 0..out_len {
                links.push(Link {
                    operand: 0,
                    i: j,
                    j,
                    z: x.data()[j] as f64,
                });
                links.push(Link {
                    operand: 1,
                    i: j,
                    j,
                    z: b.data()[j] as f64,
                });
                fan_in[j] = 2;
            }
        }
        Op::BatchNorm(_) => return Err(CrpError::InvalidArgument("oracle requires a canonized graph".into())),
    }
    Ok((links, fan_in))
}

/// First window position holding the maximum, per pooled neuron.
fn pool_winners(trace: &ActivationTrace<'_>, n: usize, links: &[Link]) -> Vec<usize> {
    let len: usize = trace.graph().node(n).output_shape.iter().product();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; len];
    for l in links {
        match best[l.j] {
            Some((i, z)) if z > l.z || (z == l.z && i < l.i) => {}
            _ => best[l.j] = Some((l.i, l.z)),
        }
    }
    best.into_iter().map(|b| b.expect("window is nonempty").0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{mlp8, resnet_micro};
    use crate::forward::forward;
    use crate::tensor::Tensor;

    #[test]
    fn conserving_rules_conserve_exactly() {
        let g = resnet_micro().unwrap();
        let x = Tensor::from_fn(&[2, 2, 2], |i| 0.1 + 0.1 * i as f32).unwrap();
        let t = forward(&g, &x, &[]).unwrap();
        let rules: BTreeMap<_, _> = [
            ("conv1", OracleRule::Flat),
            ("conv2", OracleRule::ZPlus),
            ("fc", OracleRule::ZPlus),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let a = oracle_attribute(&t, &BTreeMap::new(), &rules, &[1.0, 0.0]).unwrap();
        let relu2: f64 = a.layers["relu2"].iter().sum();
        let total: f64 = a.input.iter().sum();
        // Flat on the padded first conv discards the padding shares, so only
        // the layers above it are checked exactly.
        assert!((relu2 - 1.0).abs() < 1e-12, "{relu2}");
        let add: f64 = a.layers["add"].iter().sum();
        assert!((add - 1.0).abs() < 1e-12);
        assert!(total.is_finite());
    }

    #[test]
    fn messages_sum_to_layer_relevance() {
        let g = mlp8().unwrap();
        let x = Tensor::new(vec![4], vec![0.3, 0.9, 0.2, 0.5]).unwrap();
        let t = forward(&g, &x, &[]).unwrap();
        let rules: BTreeMap<_, _> = [("fc1", OracleRule::Epsilon(1e-6)), ("fc2", OracleRule::Epsilon(1e-6))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let a = oracle_attribute(&t, &BTreeMap::new(), &rules, &[1.0, 0.0]).unwrap();
        let from_fc2: f64 = a.messages.iter().filter(|m| m.from == "fc2").map(|m| m.value).sum();
        let relu: f64 = a.layers["relu1"].iter().sum();
        assert!((from_fc2 - relu).abs() < 1e-15);
    }

    #[test]
    fn oversized_network_is_rejected() {
        let g = crate::fixtures::lenet_random().unwrap();
        let x = Tensor::filled(&[1, 32, 32], 0.5).unwrap();
        let t = forward(&g, &x, &[]).unwrap();
        assert!(oracle_attribute(&t, &BTreeMap::new(), &BTreeMap::new(), &[0.0; 10]).is_err());
    }
}
