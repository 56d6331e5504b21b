// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand execution. Every command returns a JSON summary and writes
//! its artifacts under the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};

use crp_core::attribute::ConditionSet;
use crp_core::concepts::{build_index, IndexConfig, MaximizationTarget, ReferenceIndex};
use crp_core::evaluate::{self, FlipOrder};
use crp_core::fixtures::{make_fixture, FIXTURE_NAMES};
use crp_core::graphs::{export_graph, GraphParams};
use crp_core::localize::{grid_partition, RegionPartition};
use crp_core::model_io::{canonize, load_dataset, load_model};
use crp_core::tensor::{BooleanMask, Tensor};
use crp_core::CrpError;

use crate::analysis::{parse_grid, parse_rect, parse_tracked, Donor, Engine};
use crate::cli::{Cli, Command, TargetArgs};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// `FILE:INDEX` address of one dataset sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub path: PathBuf,
    pub index: usize,
}

impl FromStr for SampleRef {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let (path, index) = s
            .rsplit_once(':')
            .ok_or_else(|| CliError::usage(format!("expected FILE:INDEX, got {s:?}")))?;
        let index = index
            .parse()
            .map_err(|_| CliError::usage(format!("bad sample index {index:?} in {s:?}")))?;
        if path.is_empty() {
            return Err(CliError::usage(format!("missing file in {s:?}")));
        }
        Ok(Self {
            path: PathBuf::from(path),
            index,
        })
    }
}

impl SampleRef {
    pub fn load(&self) -> CliResult<Tensor<f32>> {
        let data = load_dataset(&self.path)?;
        Ok(data.sample(self.index)?.clone())
    }
}

pub fn parse_conditions(entries: &[String]) -> CliResult<ConditionSet> {
    let mut cond = ConditionSet::new();
    for e in entries {
        cond.parse_entry(e).map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(cond)
}

fn require<'a>(path: Option<&'a Path>, flag: &str) -> CliResult<&'a Path> {
    let p = path.ok_or_else(|| CliError::usage(format!("--{flag} is required")))?;
    exists(p, flag)?;
    Ok(p)
}

fn exists(p: &Path, flag: &str) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{flag}: {} does not exist", p.display())))
    }
}

/// Files a command reads, checked before anything is loaded.
struct Needs {
    model: bool,
    dataset: bool,
    index: bool,
    files: Vec<(PathBuf, &'static str)>,
}

impl Needs {
    fn model() -> Self {
        Self {
            model: true,
            dataset: false,
            index: false,
            files: Vec::new(),
        }
    }

    fn with_dataset(mut self) -> Self {
        self.dataset = true;
        self
    }

    fn with_index(mut self) -> Self {
        self.index = true;
        self.dataset = true;
        self
    }

    fn file(mut self, p: &Path, flag: &'static str) -> Self {
        self.files.push((p.to_path_buf(), flag));
        self
    }

    fn sample(self, s: &SampleRef, flag: &'static str) -> Self {
        let p = s.path.clone();
        self.file(&p, flag)
    }
}

fn validate(cfg: &RunConfig, needs: &Needs) -> CliResult<()> {
    if needs.model {
        require(cfg.model.as_deref(), "model")?;
        require(cfg.weights.as_deref(), "weights")?;
    }
    if needs.dataset {
        require(cfg.dataset.as_deref(), "dataset")?;
    }
    if needs.index {
        exists(&cfg.index_dir(), "index")?;
    }
    for (p, flag) in &needs.files {
        exists(p, flag)?;
    }
    Ok(())
}

fn load_engine(cfg: &RunConfig, needs: &Needs) -> CliResult<Engine> {
    let model = cfg.model.as_deref().expect("validated");
    let weights = cfg.weights.as_deref().expect("validated");
    let mut graph = load_model(model, weights)?;
    if !graph.is_canonized() {
        graph = canonize(&graph)?;
    }
    let mut engine = Engine::new(graph);
    engine.rules = cfg.rules.clone();
    engine.init = cfg.init;
    engine.normalize = cfg.normalize;
    engine.seed = cfg.seed;
    if needs.dataset {
        let data = load_dataset(cfg.dataset.as_deref().expect("validated"))?;
        data.check_compatible(&engine.graph)?;
        engine.dataset = Some(data);
    }
    if needs.index {
        engine.index = Some(ReferenceIndex::load_unchecked(cfg.index_dir())?);
    }
    Ok(engine)
}

/// Output directory writer that records what it wrote.
struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(CrpError::from)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(CrpError::from)?;
        }
        fs::write(&p, bytes).map_err(CrpError::from)?;
        self.written.push(p.display().to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl serde::Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(v).map_err(CrpError::from)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `summary` (with the artifact list) as `<command>_summary.json`.
    fn finish(mut self, command: &str, mut summary: Value) -> CliResult<Value> {
        let name = format!("{command}_summary.json");
        let mut files = self.written.clone();
        files.push(self.dir.join(&name).display().to_string());
        summary["files"] = json!(files);
        self.json(&name, &summary)?;
        Ok(summary)
    }
}

fn top(list: Vec<crp_core::localize::ChannelScore>, n: usize) -> Vec<crp_core::localize::ChannelScore> {
    if n == 0 {
        list
    } else {
        list.into_iter().take(n).collect()
    }
}

struct Target {
    sample: SampleRef,
    class: Option<usize>,
    cond: ConditionSet,
}

impl Target {
    fn parse(t: &TargetArgs) -> CliResult<Self> {
        Ok(Self {
            sample: t.sample.parse()?,
            class: t.class,
            cond: parse_conditions(&t.conditions)?,
        })
    }

    fn describe(&self) -> Value {
        json!({
            "sample": {"file": self.sample.path.display().to_string(), "index": self.sample.index},
            "conditions": self.cond,
        })
    }
}

/// Caps the global worker pool. Later calls keep the first setting.
pub fn init_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            tracing::debug!("worker pool already initialized");
        }
    }
}

/// Runs one parsed invocation and returns its JSON summary.
pub fn run(cli: Cli) -> CliResult<Value> {
    let cfg = RunConfig::resolve(&cli.global)?;
    init_workers(cfg.workers);
    let command = cli.command.name();
    match cli.command {
        Command::Fixtures { names } => fixtures(&cfg, &names),
        Command::Predict { sample } => {
            let s: SampleRef = sample.parse()?;
            let needs = Needs::model().sample(&s, "sample");
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let x = s.load()?;
            let p = engine.predict(&x)?;
            let summary = json!({
                "command": command,
                "sample": {"file": s.path.display().to_string(), "index": s.index},
                "prediction": p,
            });
            Artifacts::new(&cfg.output_dir)?.finish(command, summary)
        }
        Command::Attribute { target, png } => {
            let t = Target::parse(&target)?;
            let needs = Needs::model().sample(&t.sample, "sample");
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let x = t.sample.load()?;
            let a = engine.attribute(&x, t.class, &t.cond)?;
            let mut out = Artifacts::new(&cfg.output_dir)?;
            out.write("heatmap.crpw", &a.crpw()?)?;
            if png {
                out.write("heatmap.png", &a.png()?)?;
            }
            let mut summary = t.describe();
            summary["command"] = json!(command);
            summary["class"] = json!(a.class);
            summary["logit"] = json!(a.logit);
            summary["init"] = json!(engine.init);
            summary["rules"] = json!(engine.rules);
            summary["normalize"] = json!(engine.normalize);
            summary["layer_sums"] = json!(a.layer_sums);
            summary["channel_relevance"] = json!(a.channel_relevance);
            summary["heatmap_shape"] = json!(a.heatmap.shape());
            out.finish(command, summary)
        }
        Command::Index { layers, targets, k } => {
            let needs = Needs::model().with_dataset();
            validate(&cfg, &needs)?;
            let targets = targets
                .iter()
                .map(|t| {
                    t.parse::<MaximizationTarget>()
                        .map_err(|e| CliError::usage(e.to_string()))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let engine = load_engine(&cfg, &needs)?;
            let layers: Vec<String> = if layers.is_empty() {
                engine.graph.linear_layers().into_iter().map(str::to_string).collect()
            } else {
                layers
            };
            let layer_refs: Vec<&str> = layers.iter().map(String::as_str).collect();
            let config = IndexConfig {
                rules: engine.rules.clone(),
                init: engine.init,
                workers: cfg.workers,
            };
            let index = build_index(&engine.graph, engine.dataset()?, &layer_refs, &targets, k, &config)?;
            let dir = cfg.index_dir();
            index.save(&dir)?;
            let summary = json!({
                "command": command,
                "index_dir": dir.display().to_string(),
                "layers": index.layers,
                "targets": index.targets,
                "k": index.k,
                "samples": index.samples,
                "model_fingerprint": index.model_fingerprint,
                "dataset_fingerprint": index.dataset_fingerprint,
            });
            Artifacts::new(&cfg.output_dir)?.finish(command, summary)
        }
        Command::References {
            layer,
            channel,
            target,
            class,
            k,
            thumbnails,
        } => {
            let target: MaximizationTarget = target.parse().map_err(|e: CrpError| CliError::usage(e.to_string()))?;
            let needs = Needs::model().with_index();
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let refs = engine.references(&layer, channel, &target, class, k, thumbnails)?;
            let mut out = Artifacts::new(&cfg.output_dir)?;
            let mut list = Vec::new();
            for (rank, r) in refs.references.iter().enumerate() {
                let mut entry = json!({"rank": rank, "sample": r.entry.sample, "score": r.entry.score});
                if let Some(c) = r.class {
                    entry["class"] = json!(c);
                }
                if let Some(png) = &r.thumbnail {
                    let name = format!("references/{layer}_{channel}_{rank:02}_{}.png", r.entry.sample);
                    out.write(&name, png)?;
                    entry["thumbnail"] = json!(out.written.last());
                }
                list.push(entry);
            }
            let summary = json!({
                "command": command,
                "layer": refs.layer,
                "channel": refs.channel,
                "target": refs.target,
                "class": refs.class,
                "references": list,
            });
            out.finish(command, summary)
        }
        Command::Atlas {
            target,
            layer,
            grid,
            regions,
            top,
            no_threshold,
        } => {
            let t = Target::parse(&target)?;
            let grid = grid
                .as_deref()
                .map(parse_grid)
                .transpose()
                .map_err(|e| CliError::usage(e.to_string()))?;
            let mut needs = Needs::model().sample(&t.sample, "sample");
            if let Some(r) = &regions {
                needs = needs.file(r, "regions");
            }
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let partition = match (grid, &regions) {
                (Some((r, c)), _) => grid_partition(engine.graph.input_shape(), r, c)?,
                (None, Some(p)) => RegionPartition::load(p, engine.graph.input_shape())?,
                (None, None) => return Err(CliError::usage("one of --grid or --regions is required")),
            };
            let x = t.sample.load()?;
            let atlas = engine.atlas(&x, &layer, t.class, &t.cond, &partition, top, !no_threshold)?;
            let mut out = Artifacts::new(&cfg.output_dir)?;
            out.json("atlas_regions.json", &atlas)?;
            out.write("atlas.png", &atlas.to_png()?)?;
            let mut summary = t.describe();
            summary["command"] = json!(command);
            summary["layer"] = json!(layer);
            summary["regions"] = json!(atlas.regions.len());
            summary["top_n"] = json!(atlas.top_n);
            summary["flagged"] = json!(atlas
                .regions
                .iter()
                .filter(|r| r.flagged)
                .map(|r| r.id)
                .collect::<Vec<_>>());
            summary["assignment"] = json!(atlas.assignment);
            out.finish(command, summary)
        }
        Command::Local {
            target,
            layer,
            rect,
            mask,
            top: n,
        } => {
            let t = Target::parse(&target)?;
            let rect = rect
                .as_deref()
                .map(parse_rect)
                .transpose()
                .map_err(|e| CliError::usage(e.to_string()))?;
            let mut needs = Needs::model().sample(&t.sample, "sample");
            if let Some(m) = &mask {
                needs = needs.file(m, "mask");
            }
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let (_, h, w) = crp_core::tensor::chw(engine.graph.input_shape())?;
            let region = match (rect, &mask) {
                (Some([top, left, rh, rw]), _) => BooleanMask::rect(h, w, top, left, rh, rw)?,
                (None, Some(p)) => {
                    let part = RegionPartition::load(p, engine.graph.input_shape())?;
                    let labels = part.labels().to_vec();
                    BooleanMask::from_fn(&[h, w], |i| labels[i] != 0)?
                }
                (None, None) => return Err(CliError::usage("one of --rect or --mask is required")),
            };
            let x = t.sample.load()?;
            let ranking = top(engine.region(&x, &layer, t.class, &t.cond, &region)?, n);
            let mut summary = t.describe();
            summary["command"] = json!(command);
            summary["layer"] = json!(layer);
            summary["region_pixels"] = json!(region.count());
            summary["ranking"] = json!(ranking);
            Artifacts::new(&cfg.output_dir)?.finish(command, summary)
        }
        Command::Graph {
            target,
            layer,
            channel,
            depth,
            children,
            ascending,
        } => {
            let t = Target::parse(&target)?;
            let needs = Needs::model().sample(&t.sample, "sample");
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let x = t.sample.load()?;
            let params = GraphParams {
                depth,
                children,
                ascending,
            };
            let g = engine.graph(&x, &layer, channel, t.class, &t.cond, params)?;
            let mut out = Artifacts::new(&cfg.output_dir)?;
            out.write("graph.json", format!("{}\n", export_graph(&g)?).as_bytes())?;
            let mut summary = t.describe();
            summary["command"] = json!(command);
            summary["root"] = json!({"layer": layer, "channel": channel, "relevance": g.root().relevance});
            summary["nodes"] = json!(g.nodes.len());
            summary["edges"] = json!(g.edges.len());
            summary["warnings"] = json!(g.warnings);
            out.finish(command, summary)
        }
        Command::Flip {
            target,
            layer,
            order,
            steps,
        } => {
            let t = Target::parse(&target)?;
            let order: FlipOrder = if order == "random" {
                FlipOrder::Random(cfg.seed)
            } else {
                order.parse().map_err(|e: CrpError| CliError::usage(e.to_string()))?
            };
            let needs = Needs::model().sample(&t.sample, "sample");
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let x = t.sample.load()?;
            let curve = engine.flip(&x, &layer, t.class, &t.cond, order, steps)?;
            let mut out = Artifacts::new(&cfg.output_dir)?;
            let mut csv = Vec::new();
            evaluate::write_flip_csv(&curve, &mut csv)?;
            out.write("flip.csv", &csv)?;
            out.json("flip_curve.json", &curve)?;
            let last = curve.steps.last().expect("flip records step 0");
            let mut summary = t.describe();
            summary["command"] = json!(command);
            summary["layer"] = json!(layer);
            summary["order"] = json!(curve.order);
            summary["class"] = json!(curve.target);
            summary["steps"] = json!(curve.steps.len() - 1);
            summary["absolute_classes"] = json!(curve.absolute_classes);
            summary["final_relative"] = json!(last.relative[curve.target]);
            out.finish(command, summary)
        }
        Command::Blend {
            target,
            layer,
            donor,
            donor_mean,
            rect,
            alphas,
            tracked,
        } => {
            let t = Target::parse(&target)?;
            let donor_ref = donor.as_deref().map(SampleRef::from_str).transpose()?;
            let rect = rect
                .as_deref()
                .map(parse_rect)
                .transpose()
                .map_err(|e| CliError::usage(e.to_string()))?;
            let tracked = tracked
                .iter()
                .map(|s| parse_tracked(s).map_err(|e| CliError::usage(e.to_string())))
                .collect::<CliResult<Vec<_>>>()?;
            let mut needs = Needs::model().sample(&t.sample, "sample");
            if let Some(d) = &donor_ref {
                needs = needs.sample(d, "donor");
            } else if donor_mean {
                needs = needs.with_dataset();
            }
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let donor = match donor_ref {
                Some(d) => Donor::Sample(d.load()?),
                None => Donor::Mean,
            };
            let mask = match rect {
                Some([top, left, rh, rw]) => {
                    let li = engine.graph.node_index(&layer)?;
                    let (_, h, w) = crp_core::tensor::chw(&engine.graph.node(li).output_shape)?;
                    Some(BooleanMask::rect(h, w, top, left, rh, rw)?)
                }
                None => None,
            };
            let x = t.sample.load()?;
            let sweep = engine.blend(&x, &layer, &donor, mask, &alphas, &tracked, t.class, &t.cond)?;
            let mut out = Artifacts::new(&cfg.output_dir)?;
            let mut csv = Vec::new();
            evaluate::write_blend_csv(&sweep, &mut csv)?;
            out.write("blend.csv", &csv)?;
            out.json("blend_sweep.json", &sweep)?;
            let mut summary = t.describe();
            summary["command"] = json!(command);
            summary["layer"] = json!(layer);
            summary["alphas"] = json!(sweep.points.iter().map(|p| p.alpha).collect::<Vec<_>>());
            summary["tracked"] = json!(sweep.tracked);
            out.finish(command, summary)
        }
        Command::Similarity { layer, k } => {
            let needs = Needs::model().with_index();
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let m = engine.similarity(&layer, k)?;
            let mut out = Artifacts::new(&cfg.output_dir)?;
            let mut csv = Vec::new();
            evaluate::write_similarity_csv(&m, &mut csv)?;
            out.write("similarity.csv", &csv)?;
            out.json("similarity_matrix.json", &m)?;
            let summary = json!({
                "command": command,
                "layer": m.layer,
                "channels": m.channels,
                "k": m.k,
                "target": m.target,
                "flagged": m.flagged,
            });
            out.finish(command, summary)
        }
        Command::Classes { layer, channel } => {
            let needs = Needs::model().with_dataset();
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let ranking = engine.classes(&layer, channel)?;
            let summary = json!({
                "command": command,
                "layer": layer,
                "channel": channel,
                "classes": ranking,
            });
            Artifacts::new(&cfg.output_dir)?.finish(command, summary)
        }
        Command::Serve { bind, port, cache_size } => {
            let mut needs = Needs::model();
            if cfg.dataset.is_some() {
                needs = needs.with_dataset();
            }
            if cfg.index.is_some() {
                needs = needs.with_index();
            }
            validate(&cfg, &needs)?;
            let engine = load_engine(&cfg, &needs)?;
            let addr = format!("{bind}:{port}");
            crate::server::serve_blocking(engine, &addr, cache_size)?;
            Ok(json!({"command": command, "address": addr}))
        }
    }
}

/// Writes `<name>.json`, `<name>.crpw` and `<name>.crpd` per fixture.
fn fixtures(cfg: &RunConfig, names: &[String]) -> CliResult<Value> {
    let names: Vec<&str> = if names.is_empty() {
        FIXTURE_NAMES.to_vec()
    } else {
        names.iter().map(String::as_str).collect()
    };
    for n in &names {
        if !FIXTURE_NAMES.contains(n) {
            return Err(CliError::usage(format!(
                "unknown fixture {n:?}; available: {}",
                FIXTURE_NAMES.join(", ")
            )));
        }
    }
    let mut out = Artifacts::new(&cfg.output_dir)?;
    let mut list = Vec::new();
    for n in names {
        let f = make_fixture(n)?;
        let (manifest, store) = f.graph.export();
        let mut text = manifest.to_canonical_json();
        text.push('\n');
        out.write(&format!("{n}.json"), text.as_bytes())?;
        out.write(&format!("{n}.crpw"), &store.encode()?)?;
        out.write(&format!("{n}.crpd"), &f.dataset.to_store().encode()?)?;
        list.push(json!({
            "name": n,
            "model_fingerprint": f.graph.fingerprint(),
            "dataset_fingerprint": f.dataset.fingerprint(),
            "samples": f.dataset.len(),
        }));
    }
    out.finish("fixtures", json!({"command": "fixtures", "fixtures": list}))
}
