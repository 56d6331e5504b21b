// SPDX-License-Identifier: MIT OR Apache-2.0

//! BatchNorm folding.
//!
//! A batchnorm node directly after a conv or dense node is merged into that
//! node's parameters:
//!
//! ```text
//! scale = gamma / sqrt(var + eps)
//! w'    = w * scale            (per output channel)
//! b'    = (b - mean) * scale + beta
//! ```
//!
//! The batchnorm node disappears and its consumers read from the linear node.

use crate::error::{CrpError, Result};
use crate::model_io::graph::{ModelGraph, Node, NodeInput, Op};
use crate::tensor::Tensor;

/// Returns a functionally equivalent graph without batchnorm nodes.
pub fn canonize(graph: &ModelGraph) -> Result<ModelGraph> {
    let old = graph.nodes();
    let mut nodes: Vec<Node> = Vec::with_capacity(old.len());
    // Old index -> new index; a folded batchnorm maps to its linear node.
    let mut remap: Vec<usize> = Vec::with_capacity(old.len());

    for (i, node) in old.iter().enumerate() {
        let Op::BatchNorm(bn) = &node.op else {
            let mut n = node.clone();
            n.inputs = n
                .inputs
                .iter()
                .map(|inp| match inp {
                    NodeInput::Input => NodeInput::Input,
                    NodeInput::Node(j) => NodeInput::Node(remap[*j]),
                })
                .collect();
            remap.push(nodes.len());
            nodes.push(n);
            continue;
        };

        let fail = |message: &str| CrpError::Canonization {
            layer: node.id.clone(),
            message: message.to_string(),
        };
        let NodeInput::Node(src) = node.inputs[0] else {
            return Err(fail(
                "batchnorm reads the graph input; only batchnorm after conv/dense can be folded",
            ));
        };
        if !old[src].op.is_linear() {
            return Err(fail(&format!(
                "batchnorm follows a {} layer; only batchnorm after conv/dense can be folded",
                old[src].op.kind_name()
            )));
        }
        if graph.consumers(src) != [i] {
            return Err(fail(&format!(
                "linear layer {} has consumers besides the batchnorm",
                old[src].id
            )));
        }

        let scale: Vec<f64> = bn
            .gamma
            .iter()
            .zip(&bn.var)
            .map(|(&g, &v)| g as f64 / (v as f64 + bn.eps).sqrt())
            .collect();
        if scale.iter().any(|s| !s.is_finite()) {
            return Err(fail("zero variance with eps = 0 gives an infinite scale"));
        }
        let target = remap[src];
        let (weight, bias) = match &mut nodes[target].op {
            Op::Conv(p) => (&mut p.weight, &mut p.bias),
            Op::Dense(p) => (&mut p.weight, &mut p.bias),
            _ => unreachable!("checked linear above"),
        };
        let out = weight.shape()[0];
        let per_out = weight.len() / out;
        for (o, chunk) in weight.data_mut().chunks_mut(per_out).enumerate() {
            for w in chunk {
                *w = (*w as f64 * scale[o]) as f32;
            }
        }
        let folded: Vec<f32> = (0..out)
            .map(|o| {
                let b = bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                ((b - bn.mean[o] as f64) * scale[o] + bn.beta[o] as f64) as f32
            })
            .collect();
        *bias = Some(Tensor::new(vec![out], folded)?);
        remap.push(target);
    }

    let mut g = ModelGraph::assemble(
        graph.name().map(str::to_string),
        graph.input_shape().to_vec(),
        nodes,
        true,
    )?;
    g.set_canonized();
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{conv_bn, GraphBuilder};
    use crate::forward::forward;

    #[test]
    fn folding_removes_batchnorm_and_keeps_outputs() {
        let g = conv_bn().unwrap();
        let f = canonize(&g).unwrap();
        assert!(f.is_canonized());
        assert_eq!(f.len(), g.len() - 1);
        let x = Tensor::from_fn(g.input_shape(), |i| ((i * 37) % 17) as f32 / 17.0 - 0.5).unwrap();
        let (a, b) = (forward(&g, &x, &[]).unwrap(), forward(&f, &x, &[]).unwrap());
        for (u, v) in a.logits().data().iter().zip(b.logits().data()) {
            assert!((u - v).abs() < 1e-5);
        }
        assert_eq!(a.get("conv").unwrap().len(), b.get("conv").unwrap().len());
    }

    #[test]
    fn batchnorm_on_the_input_cannot_be_folded() {
        let g = GraphBuilder::new(&[1, 2, 2])
            .batchnorm("bn", &[], [vec![1.0], vec![0.0], vec![0.0], vec![1.0]], 1e-5)
            .unwrap()
            .dense("fc", &[], (4, 1), vec![1.0; 4], None)
            .unwrap()
            .build()
            .unwrap();
        assert!(canonize(&g).is_err());
    }

    #[test]
    fn graphs_without_batchnorm_are_unchanged() {
        let g = crate::fixtures::lenet_random().unwrap();
        let f = canonize(&g).unwrap();
        assert_eq!(f.nodes(), g.nodes());
    }
}
