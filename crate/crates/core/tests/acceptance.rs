// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crp_core::attribute::{attribute, ConditionSet, InitSpec, Rule, RuleComposite};
use crp_core::concepts::{build_index, query_references, IndexConfig, MaximizationTarget};
use crp_core::evaluate::{blend_sweep, channel_similarity, flip_filters, FlipOrder};
use crp_core::fixtures::{make_fixture, oracle_attribute, random_dataset, uniform, GraphBuilder, OracleRule};
use crp_core::forward::{forward, ActivationEdit};
use crp_core::graphs::{build_graph, GraphParams};
use crp_core::localize::{build_atlas, grid_partition, receptive_field};
use crp_core::model_io::{canonize, DatasetContainer, ModelGraph};
use crp_core::tensor::{BooleanMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_input(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0)).unwrap()
}

fn oracle_equivalence() -> Check {
    let rules = [
        (Rule::Epsilon(1e-6), OracleRule::Epsilon(1e-6)),
        (Rule::ZPlus, OracleRule::ZPlus),
        (Rule::Flat, OracleRule::Flat),
    ];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for name in ["mlp8", "resnet_micro"] {
        let g = make_fixture(name).map_err(err)?.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0001);
        for (rule, orule) in rules {
            let orules: BTreeMap<String, OracleRule> =
                g.linear_layers().into_iter().map(|l| (l.to_string(), orule)).collect();
            for _ in 0..20 {
                let x = random_input(&mut rng, g.input_shape());
                let t = forward(&g, &x, &[]).map_err(err)?;
                let class = rng.random_range(0..g.num_outputs());
                let mut cond = ConditionSet::new();
                let mut ocond = BTreeMap::new();
                for node in g.nodes().iter().take(g.len() - 1) {
                    if rng.random_bool(0.5) {
                        let c = node.output_shape[0];
                        let mut set: BTreeSet<usize> = (0..c).filter(|_| rng.random_bool(0.5)).collect();
                        if set.is_empty() {
                            set.insert(rng.random_range(0..c));
                        }
                        cond.insert(node.id.as_str(), set.iter().copied());
                        ocond.insert(node.id.clone(), set);
                    }
                }
                let r = attribute(
                    &t,
                    &cond,
                    &InitSpec::OneHot(class),
                    &RuleComposite::uniform(rule),
                    false,
                )
                .map_err(err)?;
                let mut start = vec![0.0; g.num_outputs()];
                start[class] = 1.0;
                let o = oracle_attribute(&t, &ocond, &orules, &start).map_err(err)?;
                worst = worst.max(max_dev(r.input().data(), &o.input));
                for (layer, v) in &o.layers {
                    worst = worst.max(max_dev(r.get(layer).map_err(err)?.data(), v));
                }
                cases += 1;
            }
        }
    }
    let msg = format!("{cases} cases, max abs deviation {worst:.3e} (< 1e-9)");
    if worst < 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn conservation() -> Check {
    let g = make_fixture("lenet_random").map_err(err)?.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0002);
    let (mut worst_mixed, mut worst_pos) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let x = random_input(&mut rng, g.input_shape());
        let t = forward(&g, &x, &[]).map_err(err)?;
        let class = rng.random_range(0..10);
        let init = InitSpec::OneHot(class);
        let a = attribute(&t, &ConditionSet::new(), &init, &RuleComposite::default(), false).map_err(err)?;
        worst_mixed = worst_mixed.max((a.input().sum() - 1.0).abs());
        let b = attribute(&t, &ConditionSet::new(), &init, &RuleComposite::zplus_flat(), false).map_err(err)?;
        worst_pos = worst_pos.max((b.input().sum() - 1.0).abs());
    }
    let msg = format!("epsilon composite {worst_mixed:.3e} (< 1e-4), z+/flat {worst_pos:.3e} (< 1e-5)");
    if worst_mixed < 1e-4 && worst_pos < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn channel_partition() -> Check {
    let g = make_fixture("lenet_random").map_err(err)?.graph;
    let rules = RuleComposite::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0003);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_input(&mut rng, g.input_shape());
        let t = forward(&g, &x, &[]).map_err(err)?;
        let init = InitSpec::Logit(t.predicted_class());
        let full = attribute(&t, &ConditionSet::new(), &init, &rules, false)
            .map_err(err)?
            .heatmap();
        let scale = full.max_abs();
        for layer in ["conv1", "conv2"] {
            let c = g.channels(g.node_index(layer).map_err(err)?);
            let mut sum = vec![0.0; full.len()];
            for ch in 0..c {
                let h = attribute(&t, &ConditionSet::new().with(layer, [ch]), &init, &rules, false)
                    .map_err(err)?
                    .heatmap();
                sum.iter_mut().zip(h.data()).for_each(|(s, v)| *s += v);
            }
            worst = worst.max(max_dev(&sum, full.data()) / scale);
        }
    }
    let msg = format!("max deviation {worst:.3e} x max|heatmap| (< 1e-5)");
    if worst < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn atlas_consistency() -> Check {
    let f = make_fixture("lenet_random").map_err(err)?;
    let g = &f.graph;
    let rules = RuleComposite::default();
    let grid = grid_partition(g.input_shape(), 4, 4).map_err(err)?;
    let mut worst = 0.0f64;
    for id in [0, 17] {
        let t = forward(g, f.dataset.sample(id).map_err(err)?, &[]).map_err(err)?;
        let init = InitSpec::Logit(t.predicted_class());
        for layer in ["conv2", "conv3"] {
            let atlas = build_atlas(&t, &ConditionSet::new(), &init, &rules, layer, &grid, 5, true).map_err(err)?;
            let c = g.channels(g.node_index(layer).map_err(err)?);
            for ch in 0..c {
                let global = attribute(&t, &ConditionSet::new().with(layer, [ch]), &init, &rules, false)
                    .map_err(err)?
                    .input()
                    .sum();
                let regional: f64 = atlas.aggregates.iter().map(|r| r[ch]).sum();
                let rel = (regional - global).abs() / global.abs().max(1e-12);
                worst = worst.max(if global.abs() < 1e-12 {
                    (regional - global).abs()
                } else {
                    rel
                });
            }
        }
    }
    let msg = format!("max relative deviation {worst:.3e} (< 1e-5)");
    if worst < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Input indices along one axis that can reach `pos` through `layers` of
/// `(kernel, stride, pad, input_len)`, top layer last.
fn axis_field(pos: usize, layers: &[(usize, usize, usize, usize)]) -> BTreeSet<usize> {
    let mut set = BTreeSet::from([pos as i64]);
    for &(k, s, p, n) in layers.iter().rev() {
        let mut below = BTreeSet::new();
        for &i in &set {
            for t in 0..k as i64 {
                let j = i * s as i64 - p as i64 + t;
                if j >= 0 && j < n as i64 {
                    below.insert(j);
                }
            }
        }
        set = below;
    }
    set.into_iter().map(|v| v as usize).collect()
}

fn receptive_fields() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0005);
    let mut built = 0;
    let mut neurons = 0;
    while built < 25 {
        let depth = rng.random_range(1..=4usize);
        let (h0, w0) = (rng.random_range(12..=24usize), rng.random_range(12..=24usize));
        let mut b = GraphBuilder::new(&[2, h0, w0]);
        let (mut h, mut w, mut cin) = (h0, w0, 2);
        let mut geo_h = Vec::new();
        let mut geo_w = Vec::new();
        let mut ok = true;
        for d in 0..depth {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let s = rng.random_range(1..=2usize);
            let p = rng.random_range(0..=1usize);
            if h + 2 * p < k || w + 2 * p < k {
                ok = false;
                break;
            }
            let cout = rng.random_range(1..=3usize);
            let wt = uniform(&mut rng, cout * cin * k * k, -0.5, 0.5);
            b = b
                .conv2d(&format!("conv{d}"), &[], (cin, cout), k, s, p, wt, None)
                .map_err(err)?;
            b = b.relu(&format!("relu{d}"), &[]);
            geo_h.push((k, s, p, h));
            geo_w.push((k, s, p, w));
            h = (h + 2 * p - k) / s + 1;
            w = (w + 2 * p - k) / s + 1;
            cin = cout;
        }
        if !ok {
            continue;
        }
        let head = uniform(&mut rng, 2 * cin * h * w, -0.5, 0.5);
        let g = b
            .dense("head", &[], (cin * h * w, 2), head, None)
            .map_err(err)?
            .build()
            .map_err(err)?;
        built += 1;
        let top = format!("conv{}", depth - 1);
        for _ in 0..3 {
            let (c, y, x) = (rng.random_range(0..cin), rng.random_range(0..h), rng.random_range(0..w));
            let rows = axis_field(y, &geo_h);
            let cols = axis_field(x, &geo_w);
            let field = receptive_field(&g, &top, &[c, y, x]);
            if rows.is_empty() || cols.is_empty() {
                // The neuron sees only padding.
                if field.is_ok() {
                    return Err(format!(
                        "architecture {built} neuron ({c},{y},{x}) should have an empty field"
                    ));
                }
                neurons += 1;
                continue;
            }
            let field = field.map_err(err)?;
            let mask = field.mask();
            for yy in 0..h0 {
                for xx in 0..w0 {
                    let expected = rows.contains(&yy) && cols.contains(&xx);
                    if mask.bits()[yy * w0 + xx] != expected {
                        return Err(format!(
                            "architecture {built} {geo_h:?}/{geo_w:?} neuron ({c},{y},{x}) differs at ({yy},{xx})"
                        ));
                    }
                }
            }
            neurons += 1;
        }
    }
    Ok(format!("{built} architectures, {neurons} neurons, exact set equality"))
}

fn graph_conservation() -> Check {
    let f = make_fixture("lenet_random").map_err(err)?;
    let g = &f.graph;
    let rules = RuleComposite::zplus_flat();
    let mut worst = 0.0f64;
    let mut nodes = 0;
    for id in [3, 42] {
        let t = forward(g, f.dataset.sample(id).map_err(err)?, &[]).map_err(err)?;
        let init = InitSpec::Logit(t.predicted_class());
        let full = attribute(&t, &ConditionSet::new(), &init, &rules, false).map_err(err)?;
        let top = full
            .channel_relevance("conv3")
            .map_err(err)?
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(c, _)| c)
            .unwrap();
        let graphs = [
            build_graph(
                &t,
                &ConditionSet::new(),
                &init,
                &rules,
                "fc2",
                t.predicted_class(),
                GraphParams {
                    depth: 1,
                    children: 84,
                    ascending: false,
                },
            ),
            build_graph(
                &t,
                &ConditionSet::new(),
                &init,
                &rules,
                "conv3",
                top,
                GraphParams {
                    depth: 2,
                    children: 16,
                    ascending: false,
                },
            ),
        ];
        for ag in graphs {
            let ag = ag.map_err(err)?;
            let max_depth = ag.nodes.iter().map(|n| n.depth).max().unwrap_or(0);
            for n in ag.nodes.iter().filter(|n| n.depth < max_depth) {
                let kids: f64 = ag.children_of(n.id).map(|k| k.relevance).sum();
                let dev = (kids - n.relevance).abs();
                worst = worst.max(if n.relevance.abs() > 1e-12 {
                    dev / n.relevance.abs()
                } else {
                    dev
                });
                nodes += 1;
            }
        }
    }
    let msg = format!("{nodes} expanded nodes, max relative deviation {worst:.3e} (< 1e-5)");
    if worst < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn flip_fixture() -> Check {
    let f = make_fixture("singlepath").map_err(err)?;
    let g = &f.graph;
    let rules = RuleComposite::default();
    for id in 0..f.dataset.len() {
        let x = f.dataset.sample(id).map_err(err)?;
        let clean = forward(g, x, &[]).map_err(err)?;
        let floor = 0.25 / clean.logits().data()[0] as f64;
        let desc = flip_filters(
            g,
            x,
            "conv",
            &ConditionSet::new(),
            &InitSpec::Logit(0),
            &rules,
            FlipOrder::RelevanceDesc,
            None,
        )
        .map_err(err)?;
        if desc.steps[1].channel != Some(0) || (desc.steps[1].relative[0] - floor).abs() > 1e-6 {
            return Err(format!(
                "sample {id}: step 1 removed {:?} with relative {} (floor {floor})",
                desc.steps[1].channel, desc.steps[1].relative[0]
            ));
        }
        let asc = flip_filters(
            g,
            x,
            "conv",
            &ConditionSet::new(),
            &InitSpec::Logit(0),
            &rules,
            FlipOrder::RelevanceAsc,
            None,
        )
        .map_err(err)?;
        let last = asc.steps.len() - 1;
        for s in &asc.steps[..last] {
            if (s.relative[0] - 1.0).abs() > 1e-6 {
                return Err(format!("sample {id}: ascending step {} at {}", s.step, s.relative[0]));
            }
        }
        if (asc.steps[last].relative[0] - floor).abs() > 1e-6 {
            return Err(format!(
                "sample {id}: ascending final step at {}",
                asc.steps[last].relative[0]
            ));
        }
    }
    Ok(format!(
        "{} samples: descending hits the bias floor at step 1, ascending holds 1.0 until the last step",
        f.dataset.len()
    ))
}

fn index_determinism() -> Check {
    let f = make_fixture("lenet_random").map_err(err)?;
    let (g, data) = (&f.graph, &f.dataset);
    let layers = ["conv1", "conv2", "conv3"];
    let targets: Vec<MaximizationTarget> = ["act_max", "rel_sum", "rel_max@pred"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let mut cfg = IndexConfig {
        workers: Some(1),
        ..Default::default()
    };
    let one = build_index(g, data, &layers, &targets, 40, &cfg).map_err(err)?;
    cfg.workers = Some(8);
    let eight = build_index(g, data, &layers, &targets, 40, &cfg).map_err(err)?;
    let (j1, b1) = one.to_files().map_err(err)?;
    let (j8, b8) = eight.to_files().map_err(err)?;
    if j1 != j8 || b1 != b8 {
        return Err("index files differ between 1 and 8 workers".into());
    }
    // Independent recomputation, one sample at a time.
    let mut cache: BTreeMap<(usize, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (key, per_ch) in &one.rankings {
        for (ch, entries) in per_ch.iter().enumerate() {
            for e in entries {
                let scores = cache
                    .entry((e.sample, key.target.to_string()))
                    .or_insert_with(|| recompute_scores(g, data, e.sample, &key.target, &layers));
                worst = worst.max((scores[&key.layer][ch] - e.score).abs());
                checked += 1;
            }
        }
    }
    let msg = format!(
        "{} + {} bytes identical; {checked} scores recomputed, max deviation {worst:.3e} (< 1e-6)",
        j1.len(),
        b1.len()
    );
    if worst < 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn recompute_scores(
    g: &ModelGraph,
    data: &DatasetContainer,
    id: usize,
    target: &MaximizationTarget,
    layers: &[&str],
) -> BTreeMap<String, Vec<f64>> {
    let t = forward(g, data.sample(id).unwrap(), &[]).unwrap();
    let name = target.to_string();
    let rel = if name.starts_with("rel") {
        let class = if name.contains("@label") {
            data.label(id).unwrap()
        } else {
            t.predicted_class()
        };
        Some(
            attribute(
                &t,
                &ConditionSet::new(),
                &InitSpec::Logit(class),
                &RuleComposite::default(),
                false,
            )
            .unwrap(),
        )
    } else {
        None
    };
    let use_max = name.contains("_max");
    layers
        .iter()
        .map(|&l| {
            let v: Vec<f64> = match &rel {
                Some(r) => r.get(l).unwrap().data().to_vec(),
                None => t.get(l).unwrap().data().iter().map(|&x| x as f64).collect(),
            };
            let c = g.channels(g.node_index(l).unwrap());
            let plane = v.len() / c;
            let per: Vec<f64> = (0..c)
                .map(|ch| {
                    let s = &v[ch * plane..(ch + 1) * plane];
                    if use_max {
                        s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        s.iter().sum()
                    }
                })
                .collect();
            (l.to_string(), per)
        })
        .collect()
}

fn similarity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0009);
    let g = GraphBuilder::new(&[1, 4, 4])
        .conv2d("conv", &[], (1, 3), 3, 1, 0, uniform(&mut rng, 27, -0.5, 0.5), None)
        .map_err(err)?
        .relu("relu", &[])
        .dense("fc", &[], (12, 2), uniform(&mut rng, 24, -0.5, 0.5), None)
        .map_err(err)?
        .build()
        .map_err(err)?;
    let data = random_dataset(&[1, 4, 4], 12, 2, 0xacce_000a).map_err(err)?;
    let target: MaximizationTarget = "rel_sum".parse().unwrap();
    let idx = build_index(&g, &data, &["conv"], &[target], 2, &IndexConfig::default()).map_err(err)?;
    let m = channel_similarity(&g, &data, &idx, "conv", 2).map_err(err)?;

    // Direct double loop over channel pairs and reference samples.
    let refs: Vec<Vec<usize>> = (0..3)
        .map(|q| {
            query_references(&idx, "conv", q, &target, None, 2)
                .unwrap()
                .entries
                .iter()
                .map(|e| e.sample)
                .collect()
        })
        .collect();
    let act = |m: usize, ch: usize| -> Vec<f64> {
        let t = forward(&g, data.sample(m).unwrap(), &[]).unwrap();
        t.get("conv").unwrap().data()[ch * 4..(ch + 1) * 4]
            .iter()
            .map(|&v| (v as f64).max(0.0))
            .collect()
    };
    let mut cos = [[0.0f64; 3]; 3];
    for q in 0..3 {
        for p in 0..3 {
            let mut acc = 0.0;
            for &s in &refs[q] {
                let (zq, zp) = (act(s, q), act(s, p));
                let dot: f64 = zq.iter().zip(&zp).map(|(a, b)| a * b).sum();
                let nq = zq.iter().map(|v| v * v).sum::<f64>().sqrt();
                let np = zp.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nq > 0.0 && np > 0.0 {
                    acc += dot / (nq * np);
                }
            }
            cos[q][p] = acc / refs[q].len() as f64;
        }
    }
    let mut worst = 0.0f64;
    for q in 0..3 {
        for p in 0..3 {
            let rho = 0.5 * (cos[q][p] + cos[p][q]);
            worst = worst.max((m.rho[q][p] - rho).abs());
            if m.rho[q][p] != m.rho[p][q] || !(0.0..=1.0 + 1e-12).contains(&m.rho[q][p]) {
                return Err(format!("rho[{q}][{p}] = {} breaks symmetry or range", m.rho[q][p]));
            }
        }
        if !m.flagged.contains(&q) && (m.rho[q][q] - 1.0).abs() > 1e-6 {
            return Err(format!("diagonal {q} is {}", m.rho[q][q]));
        }
    }
    let msg = format!(
        "max deviation from loop oracle {worst:.3e} (< 1e-6); flagged {:?}",
        m.flagged
    );
    if worst < 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn blend_identities() -> Check {
    let f = make_fixture("lenet_random").map_err(err)?;
    let g = &f.graph;
    let rules = RuleComposite::default();
    let mut worst = 0.0f64;
    for id in [0, 9, 101] {
        let x = f.dataset.sample(id).map_err(err)?;
        let clean = forward(g, x, &[]).map_err(err)?;
        for layer in ["conv1", "pool2", "conv3"] {
            let z = clean.get(layer).map_err(err)?.clone();
            let (_, h, w) = z.chw().map_err(err)?;
            let mask = BooleanMask::full(&[h, w], true).map_err(err)?;
            let other = f.dataset.sample(id + 1).map_err(err)?;
            let donor = forward(g, other, &[]).map_err(err)?.get(layer).map_err(err)?.clone();
            let zero = forward(g, x, &[ActivationEdit::blend(layer, mask.clone(), donor, 0.0)]).map_err(err)?;
            if zero.logits().data() != clean.logits().data() {
                return Err(format!("sample {id}, {layer}: alpha 0 changed the logits"));
            }
            let sweep = blend_sweep(
                g,
                x,
                &ActivationEdit::blend(layer, mask, z, 0.0),
                &[1.0],
                &[],
                &ConditionSet::new(),
                &InitSpec::Logit(0),
                &rules,
            )
            .map_err(err)?;
            let base: Vec<f64> = clean.logits().data().iter().map(|&v| v as f64).collect();
            worst = worst.max(max_dev(&sweep.points[0].logits, &base));
        }
    }
    let msg = format!("alpha 0 bit-identical; self-donor alpha 1 max deviation {worst:.3e} (< 1e-6)");
    if worst < 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn runtime() -> Check {
    let f = make_fixture("lenet_random").map_err(err)?;
    let g = &f.graph;
    let rules = RuleComposite::default();
    let mut times = Vec::new();
    for id in 0..60 {
        let x = f.dataset.sample(id).map_err(err)?;
        let start = Instant::now();
        let t = forward(g, x, &[]).map_err(err)?;
        let r = attribute(
            &t,
            &ConditionSet::new(),
            &InitSpec::Logit(t.predicted_class()),
            &rules,
            false,
        )
        .map_err(err)?;
        std::hint::black_box(r.heatmap());
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let p95 = times[(times.len() * 95).div_ceil(100) - 1];
    let widest = g
        .linear_layers()
        .into_iter()
        .max_by_key(|l| (g.channels(g.node_index(l).unwrap()), std::cmp::Reverse(l.to_string())))
        .unwrap()
        .to_string();
    let grid = grid_partition(g.input_shape(), 4, 4).map_err(err)?;
    let t = forward(g, f.dataset.sample(0).map_err(err)?, &[]).map_err(err)?;
    let start = Instant::now();
    let atlas = build_atlas(
        &t,
        &ConditionSet::new(),
        &InitSpec::Logit(t.predicted_class()),
        &rules,
        &widest,
        &grid,
        5,
        true,
    )
    .map_err(err)?;
    let atlas_s = start.elapsed().as_secs_f64();
    let msg = format!(
        "attribution p95 {p95:.2} ms (< 50 ms); atlas over {} channels of {widest} in {atlas_s:.3} s (< 2 s)",
        atlas.global.len()
    );
    if p95 < 50.0 && atlas_s < 2.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn canonization() -> Check {
    let f = make_fixture("conv_bn").map_err(err)?;
    let folded = canonize(&f.graph).map_err(err)?;
    if folded.nodes().iter().any(|n| n.op.kind_name() == "batchnorm") {
        return Err("batchnorm left after folding".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_000c);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Tensor::from_fn(f.graph.input_shape(), |_| rng.random_range(-1.0..1.0)).unwrap();
        let a = forward(&f.graph, &x, &[]).map_err(err)?;
        let b = forward(&folded, &x, &[]).map_err(err)?;
        for (u, v) in a.logits().data().iter().zip(b.logits().data()) {
            worst = worst.max((u - v).abs() as f64);
        }
    }
    let msg = format!("100 inputs, max |logit difference| {worst:.3e} (< 1e-5)");
    if worst < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Check);
    let checks: [Criterion; 12] = [
        ("oracle equivalence", oracle_equivalence),
        ("conservation", conservation),
        ("channel partition", channel_partition),
        ("atlas consistency", atlas_consistency),
        ("receptive fields", receptive_fields),
        ("graph conservation", graph_conservation),
        ("flip fixture", flip_fixture),
        ("index determinism", index_determinism),
        ("similarity matrix", similarity),
        ("blend identities", blend_identities),
        ("runtime", runtime),
        ("canonization", canonization),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
