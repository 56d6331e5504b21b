// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic test models and datasets, plus a brute-force reference
//! implementation of conditional relevance propagation.
//!
//! | name           | input       | layers                                                    | samples |
//! |----------------|-------------|-----------------------------------------------------------|---------|
//! | `mlp8`         | `(4,)`      | dense 4→3, relu, dense 3→2 (hand weights)                 | 16      |
//! | `singlepath`   | `(1,4,4)`   | conv 1→3 k3, relu, dense 12→2                             | 8       |
//! | `lenet_random` | `(1,32,32)` | LeNet-5: (conv k5, relu, maxpool 2) ×2, conv k5, dense ×2 | 200     |
//! | `resnet_micro` | `(2,2,2)`   | conv, relu, conv, add with the input, relu, dense         | 16      |
//! | `conv_bn`      | `(3,8,8)`   | conv 3→4 k3 pad 1, batchnorm, relu, dense 256→3           | 100     |
//!
//! `mlp8` on `x = [1, 0, 0, 0]` gives logits `[0.8, -0.5]`: the hidden
//! pre-activations are `[1, 0.6, -1.2]`, ReLU gives `[1, 0.6, 0]`, and the
//! head computes `1 - 0.5*0.6 + 0.1 = 0.8` and `-1 + 0.6 - 0.1 = -0.5`.
//!
//! In `singlepath` only conv channel 0 (the carrier) feeds logit 0. Its conv
//! and dense weights are positive, so on positive inputs it carries all of
//! logit 0's relevance; zeroing it leaves logit 0 at its bias, 0.25.
//!
//! Random weights are drawn uniformly from `[-0.5, 0.5)` with ChaCha8 seeded
//! by the constants below; random biases from `[-0.05, 0.05)`. Samples are
//! uniform in `[0, 1)`.

mod builder;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use builder::{uniform, GraphBuilder};
pub use oracle::{oracle_attribute, OracleAttribution, OracleRule};

use crate::error::{CrpError, Result};
use crate::model_io::{DatasetContainer, ModelGraph};
use crate::tensor::Tensor;

pub const FIXTURE_NAMES: [&str; 5] = ["mlp8", "singlepath", "lenet_random", "resnet_micro", "conv_bn"];

pub const MLP8_DATA_SEED: u64 = 0x6d6c_7038;
pub const SINGLEPATH_DATA_SEED: u64 = 0x7369_6e67;
pub const LENET_WEIGHT_SEED: u64 = 0x4c65_4e65_7435;
pub const LENET_DATA_SEED: u64 = 0x4c65_4e65_7444;
pub const RESNET_SEED: u64 = 0x7265_736e_6574;
pub const CONV_BN_SEED: u64 = 0x636f_6e76_626e;

/// A model with a matching dataset.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub graph: ModelGraph,
    pub dataset: DatasetContainer,
}

/// Builds a named fixture. Every call returns identical bytes.
pub fn make_fixture(name: &str) -> Result<Fixture> {
    let (graph, dataset) = match name {
        "mlp8" => (mlp8()?, random_dataset(&[4], 16, 2, MLP8_DATA_SEED)?),
        "singlepath" => (singlepath()?, random_dataset(&[1, 4, 4], 8, 2, SINGLEPATH_DATA_SEED)?),
        "lenet_random" => (lenet_random()?, random_dataset(&[1, 32, 32], 200, 10, LENET_DATA_SEED)?),
        "resnet_micro" => (resnet_micro()?, random_dataset(&[2, 2, 2], 16, 2, RESNET_SEED ^ 1)?),
        "conv_bn" => (conv_bn()?, random_dataset(&[3, 8, 8], 100, 3, CONV_BN_SEED ^ 1)?),
        other => {
            return Err(CrpError::NotFound(format!(
                "fixture {other:?}; available: {}",
                FIXTURE_NAMES.join(", ")
            )))
        }
    };
    Ok(Fixture {
        name: name.to_string(),
        graph,
        dataset,
    })
}

/// Seeded uniform `[0, 1)` samples with seeded labels.
pub fn random_dataset(shape: &[usize], n: usize, classes: usize, seed: u64) -> Result<DatasetContainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let samples = (0..n)
        .map(|_| Tensor::new(shape.to_vec(), uniform(&mut rng, len, 0.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let names = (0..classes).map(|c| format!("class_{c}")).collect();
    Ok(DatasetContainer::new(samples, Some(labels))?.with_class_names(names))
}

pub fn mlp8() -> Result<ModelGraph> {
    #[rustfmt::skip]
    let w1 = vec![
        1.0, -1.0, 0.5, 0.0,
        0.5, 1.0, -1.0, 2.0,
        -1.0, 0.5, 1.0, 1.0,
    ];
    let w2 = vec![1.0, -0.5, 2.0, -1.0, 1.0, 0.5];
    GraphBuilder::new(&[4])
        .name("mlp8")
        .dense("fc1", &[], (4, 3), w1, Some(vec![0.0, 0.1, -0.2]))?
        .relu("relu1", &[])
        .dense("fc2", &[], (3, 2), w2, Some(vec![0.1, -0.1]))?
        .build()
}

pub fn singlepath() -> Result<ModelGraph> {
    let mut wc = Vec::with_capacity(27);
    wc.extend(std::iter::repeat_n(0.5f32, 9));
    #[rustfmt::skip]
    wc.extend([
        0.3, -0.2, 0.1, -0.4, 0.6, -0.1, 0.2, 0.0, -0.3,
        -0.5, 0.4, 0.2, 0.1, -0.2, 0.3, -0.1, 0.5, 0.0,
    ]);
    // Dense rows read the flattened (3, 2, 2) map: channel c occupies 4c..4c+4.
    let mut wd = vec![0f32; 24];
    wd[..4].fill(1.0);
    for k in 4..12 {
        wd[12 + k] = if k % 2 == 0 { 0.7 } else { -0.4 };
    }
    GraphBuilder::new(&[1, 4, 4])
        .name("singlepath")
        .conv2d("conv", &[], (1, 3), 3, 1, 0, wc, Some(vec![0.0, 0.1, -0.1]))?
        .relu("relu", &[])
        .dense("fc", &[], (12, 2), wd, Some(vec![0.25, 0.1]))?
        .build()
}

pub fn lenet_random() -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(LENET_WEIGHT_SEED);
    let mut w = |n: usize| uniform(&mut rng, n, -0.5, 0.5);
    let (w1, w2, w3, w4, w5) = (w(6 * 25), w(16 * 6 * 25), w(120 * 400), w(84 * 120), w(10 * 84));
    let mut b = |n: usize| Some(uniform(&mut rng, n, -0.05, 0.05));
    let (b1, b2, b3, b4, b5) = (b(6), b(16), b(120), b(84), b(10));
    GraphBuilder::new(&[1, 32, 32])
        .name("lenet_random")
        .conv2d("conv1", &[], (1, 6), 5, 1, 0, w1, b1)?
        .relu("relu1", &[])
        .maxpool("pool1", &[], 2, 2)
        .conv2d("conv2", &[], (6, 16), 5, 1, 0, w2, b2)?
        .relu("relu2", &[])
        .maxpool("pool2", &[], 2, 2)
        .conv2d("conv3", &[], (16, 120), 5, 1, 0, w3, b3)?
        .relu("relu3", &[])
        .dense("fc1", &[], (120, 84), w4, b4)?
        .relu("relu4", &[])
        .dense("fc2", &[], (84, 10), w5, b5)?
        .build()
}

pub fn resnet_micro() -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(RESNET_SEED);
    let mut w = |n: usize| uniform(&mut rng, n, -0.5, 0.5);
    let (w1, w2, w3) = (w(2 * 2 * 4), w(2 * 2), w(2 * 8));
    GraphBuilder::new(&[2, 2, 2])
        .name("resnet_micro")
        .conv2d("conv1", &[], (2, 2), 2, 2, 1, w1, Some(vec![0.01, -0.02]))?
        .relu("relu1", &[])
        .conv2d("conv2", &[], (2, 2), 1, 1, 0, w2, None)?
        .add("add", "conv2", "input")
        .relu("relu2", &["add"])
        .dense("fc", &[], (8, 2), w3, Some(vec![0.05, -0.05]))?
        .build()
}

pub fn conv_bn() -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(CONV_BN_SEED);
    let wc = uniform(&mut rng, 4 * 3 * 9, -0.5, 0.5);
    let bc = uniform(&mut rng, 4, -0.05, 0.05);
    let gamma = uniform(&mut rng, 4, 0.5, 1.5);
    let beta = uniform(&mut rng, 4, -0.5, 0.5);
    let mean = uniform(&mut rng, 4, -0.5, 0.5);
    let var = uniform(&mut rng, 4, 0.5, 1.5);
    let wd = uniform(&mut rng, 3 * 256, -0.5, 0.5);
    GraphBuilder::new(&[3, 8, 8])
        .name("conv_bn")
        .conv2d("conv", &[], (3, 4), 3, 1, 1, wc, Some(bc))?
        .batchnorm("bn", &[], [gamma, beta, mean, var], 1e-5)?
        .relu("relu", &[])
        .dense("fc", &[], (256, 3), wd, None)?
        .build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward;

    #[test]
    fn mlp8_hand_logits() {
        let g = mlp8().unwrap();
        let x = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let t = forward(&g, &x, &[]).unwrap();
        let l = t.logits().data();
        assert!((l[0] - 0.8).abs() < 1e-6 && (l[1] + 0.5).abs() < 1e-6, "{l:?}");
    }

    #[test]
    fn lenet_topology() {
        let g = lenet_random().unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g.node(g.node_index("conv3").unwrap()).output_shape, vec![120, 1, 1]);
        assert_eq!(g.output_shape(), &[10]);
    }

    #[test]
    fn fixtures_are_deterministic() {
        for name in FIXTURE_NAMES {
            let a = make_fixture(name).unwrap();
            let b = make_fixture(name).unwrap();
            assert_eq!(a.graph.fingerprint(), b.graph.fingerprint(), "{name}");
            assert_eq!(a.dataset.fingerprint(), b.dataset.fingerprint(), "{name}");
            a.dataset.check_compatible(&a.graph).unwrap();
        }
    }

    #[test]
    fn unknown_fixture_is_an_error() {
        assert!(make_fixture("vgg16").is_err());
    }
}
