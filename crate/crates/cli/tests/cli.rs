// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use serde_json::Value;

use crp_cli::Cli;
use crp_core::model_io::{StoredTensor, TensorStore};

const SUBCOMMANDS: [&str; 13] = [
    "predict",
    "attribute",
    "index",
    "references",
    "atlas",
    "local",
    "graph",
    "flip",
    "blend",
    "similarity",
    "classes",
    "serve",
    "fixtures",
];

fn crp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crp"))
        .args(args)
        .env_remove("CRP_WORKERS")
        .env_remove("CRP_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("error is JSON")
}

/// Writes the fixtures into `dir` and returns it.
fn fixtures(dir: &Path) -> PathBuf {
    let d = dir.join("fx");
    ok_json(&crp(&["--output-dir", d.to_str().unwrap(), "fixtures"]));
    d
}

struct Lenet {
    _tmp: tempfile::TempDir,
    fx: PathBuf,
    root: PathBuf,
}

impl Lenet {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let fx = fixtures(tmp.path());
        let root = tmp.path().to_path_buf();
        Self { _tmp: tmp, fx, root }
    }

    fn model(&self) -> String {
        self.fx.join("lenet_random.json").display().to_string()
    }

    fn data(&self) -> String {
        self.fx.join("lenet_random.crpd").display().to_string()
    }

    fn sample(&self, i: usize) -> String {
        format!("{}:{i}", self.data())
    }

    fn out(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    /// Runs with model, dataset and output directory set.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        let (m, d, o) = (self.model(), self.data(), self.out(out));
        let mut all = vec!["--model", &m, "--dataset", &d, "--output-dir", &o];
        all.extend_from_slice(args);
        crp(&all)
    }
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn help_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut names = vec![None];
    names.extend(SUBCOMMANDS.iter().map(|s| Some(*s)));
    for name in names {
        let out = match name {
            Some(n) => crp(&[n, "--help"]),
            None => crp(&["--help"]),
        };
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let file = golden_dir().join(format!("{}.txt", name.unwrap_or("crp")));
        if update {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&file, &text).unwrap();
        }
        let want = fs::read_to_string(&file).unwrap_or_else(|_| panic!("missing {}", file.display()));
        assert_eq!(text, want, "help of {name:?} changed; rerun with UPDATE_GOLDEN=1");
    }
}

#[test]
fn help_documents_every_flag() {
    let mut cmd = Cli::command();
    cmd.build();
    for sub in cmd.get_subcommands().filter(|c| c.get_name() != "help") {
        let text = fs::read_to_string(golden_dir().join(format!("{}.txt", sub.get_name()))).unwrap();
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(text.contains(&format!("--{long}")), "{} lacks --{long}", sub.get_name());
                assert!(
                    arg.get_help().is_some(),
                    "{} --{long} has no description",
                    sub.get_name()
                );
            }
        }
    }
    assert_eq!(
        cmd.get_subcommands().filter(|c| c.get_name() != "help").count(),
        SUBCOMMANDS.len()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let l = Lenet::new();
    assert_eq!(crp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(crp(&["attribute"]).status.code(), Some(2));
    let out = crp(&["attribute", "--sample", "x.crpd:0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
    assert!(error_json(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("--model"));
    let out = l.run("o", &["attribute", "--sample", &l.data()]);
    assert_eq!(out.status.code(), Some(2), "sample without index");
    let out = l.run("o", &["attribute", "--sample", &l.sample(0), "--cond", "conv2"]);
    assert_eq!(out.status.code(), Some(2), "condition without channels");
    let missing = l.out("nope.crpd:0");
    let out = l.run("o", &["attribute", "--sample", &missing]);
    assert_eq!(out.status.code(), Some(2), "missing file is caught before loading");
    let out = l.run("o", &["--rules", "gamma", "predict", "--sample", &l.sample(0)]);
    assert_eq!(out.status.code(), Some(2));
    let out = l.run(
        "o",
        &["atlas", "--sample", &l.sample(0), "--layer", "conv3", "--grid", "4by4"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn format_errors_exit_with_three() {
    let l = Lenet::new();
    let bad = l.root.join("broken.json");
    fs::write(&bad, "{ not json").unwrap();
    let w = l.fx.join("lenet_random.crpw").display().to_string();
    let out = crp(&[
        "--model",
        bad.to_str().unwrap(),
        "--weights",
        &w,
        "--output-dir",
        &l.out("o"),
        "predict",
        "--sample",
        &l.sample(0),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["kind"], "format");
    let trunc = l.root.join("short.crpw");
    let bytes = fs::read(&w).unwrap();
    fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
    let out = crp(&[
        "--model",
        &l.model(),
        "--weights",
        trunc.to_str().unwrap(),
        "--output-dir",
        &l.out("o"),
        "predict",
        "--sample",
        &l.sample(0),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn compute_errors_exit_with_four() {
    let l = Lenet::new();
    let cases: [&[&str]; 4] = [
        &["attribute", "--sample", &l.sample(0), "--cond", "conv9:1"],
        &["attribute", "--sample", &l.sample(0), "--class", "10"],
        &["attribute", "--sample", &l.sample(500)],
        &["graph", "--sample", &l.sample(0), "--layer", "pool1", "--channel", "0"],
    ];
    for args in cases {
        let out = l.run("o", args);
        assert_eq!(
            out.status.code(),
            Some(4),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(error_json(&out)["error"]["kind"], "compute");
    }
}

#[test]
fn attribute_writes_exact_heatmap_and_layer_sums() {
    let l = Lenet::new();
    let args = [
        "attribute",
        "--sample",
        &l.sample(0),
        "--class",
        "3",
        "--cond",
        "conv2:5,12",
        "--png",
    ];
    let s = ok_json(&l.run("a", &args));
    assert_eq!(s["class"], 3);
    assert_eq!(s["conditions"]["conv2"], serde_json::json!([5, 12]));
    let sums = s["layer_sums"].as_object().unwrap();
    assert!(sums.contains_key("input") && sums.contains_key("conv2"));
    let store = TensorStore::read(l.root.join("a/heatmap.crpw")).unwrap();
    let Some(StoredTensor::F64(h)) = store.get("heatmap") else {
        panic!("heatmap tensor")
    };
    assert_eq!(h.shape(), &[32, 32]);
    let input = sums["input"].as_f64().unwrap();
    assert!((h.sum() - input).abs() <= 1e-12 * (1.0 + input.abs()));
    assert!(fs::read(l.root.join("a/heatmap.png")).unwrap().starts_with(b"\x89PNG"));
    let z: f64 = s["channel_relevance"]["conv2"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .filter(|(c, _)| ![5, 12].contains(c))
        .map(|(_, v)| v.as_f64().unwrap().abs())
        .sum();
    assert_eq!(z, 0.0, "unselected channels carry no relevance");
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn runs_are_byte_reproducible() {
    let l = Lenet::new();
    let runs: [&[&str]; 5] = [
        &["attribute", "--sample", &l.sample(4), "--png"],
        &[
            "flip",
            "--sample",
            &l.sample(4),
            "--layer",
            "conv2",
            "--order",
            "random",
        ],
        &["atlas", "--sample", &l.sample(4), "--layer", "conv2", "--grid", "2x3"],
        &["graph", "--sample", &l.sample(4), "--layer", "conv3", "--channel", "0"],
        &[
            "blend",
            "--sample",
            &l.sample(4),
            "--layer",
            "conv1",
            "--donor-mean",
            "--track",
            "conv2:1",
        ],
    ];
    for args in runs {
        for out in ["r1", "r2"] {
            let mut a = vec!["--seed", "11"];
            a.extend_from_slice(args);
            let o = l.run(out, &a);
            ok_json(&o);
        }
        let (a, b) = (dir_bytes(&l.root.join("r1")), dir_bytes(&l.root.join("r2")));
        assert_eq!(a.len(), b.len());
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            if na.ends_with("_summary.json") {
                continue;
            }
            assert!(ba == bb, "{na} differs between runs of {args:?}");
        }
        fs::remove_dir_all(l.root.join("r1")).unwrap();
        fs::remove_dir_all(l.root.join("r2")).unwrap();
    }
}

#[test]
fn index_twice_is_byte_identical_and_serves_references() {
    let l = Lenet::new();
    let args = [
        "index",
        "--layers",
        "conv2,conv3",
        "--targets",
        "rel_sum,act_max",
        "--k",
        "40",
    ];
    let s = ok_json(&l.run("i1", &args));
    assert_eq!(s["k"], 40);
    ok_json(&l.run(
        "i2",
        &[
            "--workers",
            "1",
            args[0],
            args[1],
            args[2],
            args[3],
            args[4],
            args[5],
            args[6],
        ],
    ));
    for f in ["index.json", "index.crpw"] {
        assert!(
            fs::read(l.root.join("i1/index").join(f)).unwrap() == fs::read(l.root.join("i2/index").join(f)).unwrap(),
            "{f}"
        );
    }
    let r = ok_json(&l.run(
        "i1",
        &[
            "references",
            "--layer",
            "conv3",
            "--channel",
            "7",
            "--k",
            "5",
            "--thumbnails",
        ],
    ));
    let refs = r["references"].as_array().unwrap();
    assert_eq!(refs.len(), 5);
    let scores: Vec<f64> = refs.iter().map(|e| e["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    for e in refs {
        let png = fs::read(e["thumbnail"].as_str().unwrap()).unwrap();
        assert!(png.starts_with(b"\x89PNG"));
    }
    let act = ok_json(&l.run(
        "i1",
        &[
            "references",
            "--layer",
            "conv2",
            "--channel",
            "0",
            "--target",
            "act_max",
            "--k",
            "3",
        ],
    ));
    assert_eq!(act["target"], "act_max");
    let out = l.run(
        "i1",
        &[
            "references",
            "--layer",
            "conv2",
            "--channel",
            "0",
            "--target",
            "rel_max",
        ],
    );
    assert_eq!(out.status.code(), Some(4), "missing target");
    let sim = ok_json(&l.run("i1", &["similarity", "--layer", "conv2", "--k", "10"]));
    assert_eq!(sim["channels"], 16);
    let csv = fs::read_to_string(l.root.join("i1/similarity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn atlas_grid_lists_top_channels_per_region() {
    let l = Lenet::new();
    ok_json(&l.run(
        "at",
        &[
            "atlas",
            "--grid",
            "4x4",
            "--layer",
            "conv3",
            "--top",
            "5",
            "--sample",
            &l.sample(0),
        ],
    ));
    let doc: Value = serde_json::from_slice(&fs::read(l.root.join("at/atlas_regions.json")).unwrap()).unwrap();
    let regions = doc["regions"].as_array().unwrap();
    assert_eq!(regions.len(), 16);
    for r in regions {
        let ranking = r["ranking"].as_array().unwrap();
        assert_eq!(ranking.len(), 5);
        let shares: f64 = ranking.iter().map(|c| c["share"].as_f64().unwrap()).sum();
        assert!(shares <= 1.0 + 1e-12);
    }
    assert!(fs::read(l.root.join("at/atlas.png")).unwrap().starts_with(b"\x89PNG"));
}

#[test]
fn local_rect_over_everything_matches_atlas_global() {
    let l = Lenet::new();
    let s = ok_json(&l.run(
        "lo",
        &[
            "local",
            "--sample",
            &l.sample(2),
            "--layer",
            "conv2",
            "--rect",
            "0,0,32,32",
        ],
    ));
    ok_json(&l.run(
        "lo",
        &["atlas", "--sample", &l.sample(2), "--layer", "conv2", "--grid", "1x1"],
    ));
    let doc: Value = serde_json::from_slice(&fs::read(l.root.join("lo/atlas_regions.json")).unwrap()).unwrap();
    let global = doc["global"].as_array().unwrap();
    for e in s["ranking"].as_array().unwrap() {
        let c = e["channel"].as_u64().unwrap() as usize;
        let a = e["relevance"].as_f64().unwrap();
        let b = global[c].as_f64().unwrap();
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{c}: {a} vs {b}");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let l = Lenet::new();
    let cfg = l.root.join("run.toml");
    fs::write(
        &cfg,
        "model = \"fx/lenet_random.json\"\ndataset = \"fx/lenet_random.crpd\"\noutput_dir = \"from-file\"\nrules = \"zplus-flat\"\n",
    )
    .unwrap();
    let c = cfg.display().to_string();
    let s = ok_json(&crp(&["--config", &c, "attribute", "--sample", &l.sample(1)]));
    assert!(s["files"][0].as_str().unwrap().contains("from-file"));
    assert_eq!(s["rules"]["dense"], "zplus");
    let s = ok_json(&crp(&[
        "--config",
        &c,
        "--output-dir",
        &l.out("flag"),
        "--rules",
        "flat",
        "attribute",
        "--sample",
        &l.sample(1),
    ]));
    assert!(s["files"][0].as_str().unwrap().contains("flag"));
    assert_eq!(s["rules"]["dense"], "flat");
    fs::write(&cfg, "colour = 3\n").unwrap();
    assert_eq!(
        crp(&["--config", &c, "predict", "--sample", &l.sample(0)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn output_dir_falls_back_to_environment() {
    let l = Lenet::new();
    let out = Command::new(env!("CARGO_BIN_EXE_crp"))
        .args(["--model", &l.model(), "predict", "--sample", &l.sample(0)])
        .env("CRP_OUTPUT_DIR", l.out("env"))
        .env("CRP_WORKERS", "2")
        .output()
        .unwrap();
    ok_json(&out);
    assert!(l.root.join("env/predict_summary.json").exists());
}

#[test]
fn flip_and_blend_write_csv() {
    let l = Lenet::new();
    let s = ok_json(&l.run(
        "e",
        &["flip", "--sample", &l.sample(0), "--layer", "conv2", "--steps", "4"],
    ));
    assert_eq!(s["steps"], 4);
    let csv = fs::read_to_string(l.root.join("e/flip.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("step,channel,relative_0"));
    let s = ok_json(&l.run(
        "e",
        &[
            "blend",
            "--sample",
            &l.sample(0),
            "--layer",
            "conv2",
            "--donor",
            &l.sample(1),
            "--rect",
            "0,0,5,5",
            "--alphas",
            "1,0,0.5",
            "--track",
            "conv3:0",
        ],
    ));
    assert_eq!(s["alphas"], serde_json::json!([0.0, 0.5, 1.0]));
    let csv = fs::read_to_string(l.root.join("e/blend.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').next_back(), Some("conv3:0"));
    assert_eq!(
        l.run(
            "e",
            &[
                "blend",
                "--sample",
                &l.sample(0),
                "--layer",
                "conv2",
                "--donor-mean",
                "--alphas",
                "1.5"
            ]
        )
        .status
        .code(),
        Some(4)
    );
}

#[test]
fn shipped_fixtures_match_the_generator() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let tmp = tempfile::tempdir().unwrap();
    let fresh = fixtures(tmp.path());
    for name in crp_core::fixtures::FIXTURE_NAMES {
        for ext in ["json", "crpw", "crpd"] {
            let f = format!("{name}.{ext}");
            let a = fs::read(shipped.join(&f)).unwrap_or_else(|_| panic!("fixtures/{f} is not shipped"));
            assert!(a == fs::read(fresh.join(&f)).unwrap(), "fixtures/{f} is stale");
        }
    }
}
