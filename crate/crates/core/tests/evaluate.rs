// SPDX-License-Identifier: MIT OR Apache-2.0

use crp_core::attribute::{ConditionSet, InitSpec, RuleComposite};
use crp_core::evaluate::{
    blend_sweep, channel_means, flip_filters, similarity_from_references, write_flip_csv, FlipOrder,
};
use crp_core::fixtures::{make_fixture, random_dataset, GraphBuilder};
use crp_core::forward::{forward, ActivationEdit};
use crp_core::tensor::{BooleanMask, Tensor};

#[test]
fn flipping_every_channel_leaves_the_bias() {
    let f = make_fixture("singlepath").unwrap();
    let x = f.dataset.sample(2).unwrap();
    let c = flip_filters(
        &f.graph,
        x,
        "relu",
        &ConditionSet::new(),
        &InitSpec::Logit(1),
        &RuleComposite::default(),
        FlipOrder::RelevanceDesc,
        None,
    )
    .unwrap();
    let last = c.steps.last().unwrap();
    assert_eq!(last.disabled.len(), 3);
    assert!((last.logits[0] - 0.25).abs() < 1e-6 && (last.logits[1] - 0.1).abs() < 1e-6);
    assert!(c.steps[0].relative.iter().all(|&v| v == 1.0));
}

#[test]
fn random_order_is_reproducible() {
    let f = make_fixture("lenet_random").unwrap();
    let x = f.dataset.sample(0).unwrap();
    let run = |seed| {
        flip_filters(
            &f.graph,
            x,
            "conv2",
            &ConditionSet::new(),
            &InitSpec::Logit(0),
            &RuleComposite::default(),
            FlipOrder::Random(seed),
            Some(5),
        )
        .unwrap()
    };
    assert_eq!(run(3), run(3));
    assert_eq!(run(3).steps.len(), 6);
    let mut csv = Vec::new();
    write_flip_csv(&run(3), &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
}

#[test]
fn too_many_flip_steps_is_an_error() {
    let f = make_fixture("singlepath").unwrap();
    let x = f.dataset.sample(0).unwrap();
    assert!(flip_filters(
        &f.graph,
        x,
        "conv",
        &ConditionSet::new(),
        &InitSpec::Logit(0),
        &RuleComposite::default(),
        FlipOrder::RelevanceAsc,
        Some(4)
    )
    .is_err());
}

#[test]
fn zero_initial_logit_is_flagged() {
    let g = GraphBuilder::new(&[2])
        .dense("fc", &[], (2, 2), vec![1.0, 0.0, 0.0, 0.0], None)
        .unwrap()
        .build()
        .unwrap();
    let x = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    let c = flip_filters(
        &g,
        &x,
        "fc",
        &ConditionSet::new(),
        &InitSpec::Logit(1),
        &RuleComposite::default(),
        FlipOrder::RelevanceDesc,
        None,
    )
    .unwrap();
    assert!(c.zero_logit());
    assert_eq!(c.absolute_classes, vec![1]);
}

#[test]
fn blend_sweep_is_sorted_and_tracks_relevance() {
    let f = make_fixture("lenet_random").unwrap();
    let x = f.dataset.sample(4).unwrap();
    let means = channel_means(&f.graph, &f.dataset, "conv2").unwrap();
    let mask = BooleanMask::rect(10, 10, 2, 2, 5, 5).unwrap();
    let edit = ActivationEdit {
        layer: "conv2".into(),
        mode: crp_core::forward::EditMode::BlendMean {
            mask,
            donor_means: means,
            alpha: 0.0,
        },
    };
    let tracked = vec![("conv2".to_string(), 3), ("conv3".to_string(), 0)];
    let s = blend_sweep(
        &f.graph,
        x,
        &edit,
        &[1.0, 0.0, 0.5],
        &tracked,
        &ConditionSet::new(),
        &InitSpec::Logit(2),
        &RuleComposite::default(),
    )
    .unwrap();
    let alphas: Vec<f64> = s.points.iter().map(|p| p.alpha).collect();
    assert_eq!(alphas, vec![0.0, 0.5, 1.0]);
    assert!(s.points.iter().all(|p| p.tracked.len() == 2));
    let clean: Vec<f64> = forward(&f.graph, x, &[])
        .unwrap()
        .logits()
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    assert_eq!(s.points[0].logits, clean);
    assert!(blend_sweep(
        &f.graph,
        x,
        &edit,
        &[1.5],
        &[],
        &ConditionSet::new(),
        &InitSpec::Logit(2),
        &RuleComposite::default()
    )
    .is_err());
}

#[test]
fn donor_shape_mismatch_is_rejected() {
    let f = make_fixture("lenet_random").unwrap();
    let x = f.dataset.sample(0).unwrap();
    let bad = ActivationEdit::blend(
        "conv2",
        BooleanMask::full(&[10, 10], true).unwrap(),
        Tensor::zeros(&[6, 10, 10]).unwrap(),
        0.5,
    );
    assert!(forward(&f.graph, x, &[bad]).is_err());
}

#[test]
fn proportional_channels_have_unit_similarity() {
    // Channel 1 is channel 0 scaled by 2; channel 2 is its negation (dead after ReLU).
    let g = GraphBuilder::new(&[1, 2, 2])
        .conv2d("conv", &[], (1, 3), 1, 1, 0, vec![1.0, 2.0, -1.0], None)
        .unwrap()
        .relu("relu", &[])
        .dense("fc", &[], (12, 1), vec![0.1; 12], None)
        .unwrap()
        .build()
        .unwrap();
    let data = random_dataset(&[1, 2, 2], 4, 1, 5).unwrap();
    let m = similarity_from_references(&g, &data, "conv", &[vec![0, 1], vec![2, 3], vec![0, 3]]).unwrap();
    assert!((m.rho[0][1] - 1.0).abs() < 1e-12);
    assert!((m.rho[0][0] - 1.0).abs() < 1e-12);
    assert_eq!(m.rho[0][2], 0.0);
    assert_eq!(m.flagged, vec![2]);
    assert_eq!(m.distance[0][1], 1.0 - m.rho[0][1]);
}
