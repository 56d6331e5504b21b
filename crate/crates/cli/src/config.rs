// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: flags layered over an optional TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crp_core::attribute::{Rule, RuleComposite, DEFAULT_EPSILON};
use crp_core::concepts::OutputInit;

use crate::analysis::composite_by_name;
use crate::cli::GlobalArgs;
use crate::error::{CliError, CliResult};

pub const DEFAULT_OUTPUT_DIR: &str = "crp-out";

/// Contents of a `--config` file. Relative paths resolve against the
/// file's directory.
///
/// ```toml
/// model = "models/lenet.json"
/// dataset = "data/val.crpd"
/// rules = "epsilon-zplus-flat"
/// epsilon = 1e-6
/// workers = 4
///
/// [overrides]
/// fc3 = "epsilon:0.01"
/// ```
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub rules: Option<String>,
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    pub normalize: Option<bool>,
    pub init: Option<String>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.model,
            &mut cfg.weights,
            &mut cfg.dataset,
            &mut cfg.index,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub rules: RuleComposite,
    pub normalize: bool,
    pub init: OutputInit,
    pub workers: Option<usize>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn resolve(args: &GlobalArgs) -> CliResult<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Self::merge(args, file)
    }

    pub fn merge(args: &GlobalArgs, file: FileConfig) -> CliResult<Self> {
        let epsilon = args.epsilon.or(file.epsilon).unwrap_or(DEFAULT_EPSILON);
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(CliError::usage(format!("epsilon must be positive, got {epsilon}")));
        }
        let name = args
            .rules
            .as_deref()
            .or(file.rules.as_deref())
            .unwrap_or("epsilon-zplus-flat");
        let mut rules = composite_by_name(name, epsilon).map_err(|e| CliError::usage(e.to_string()))?;
        let mut overrides = file.overrides;
        for o in &args.rule_overrides {
            let (layer, rule) = o
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("expected LAYER=RULE, got {o:?}")))?;
            overrides.insert(layer.to_string(), rule.to_string());
        }
        for (layer, rule) in overrides {
            let rule: Rule = rule
                .parse()
                .map_err(|e: crp_core::CrpError| CliError::usage(e.to_string()))?;
            rules = rules.with_override(layer, rule);
        }
        let init = match args.init.as_deref().or(file.init.as_deref()) {
            Some(s) => s
                .parse()
                .map_err(|e: crp_core::CrpError| CliError::usage(e.to_string()))?,
            None => OutputInit::default(),
        };
        let workers = args.workers.or(file.workers);
        if workers == Some(0) {
            return Err(CliError::usage("workers must be at least 1"));
        }
        let model = args.model.clone().or(file.model);
        let weights = args
            .weights
            .clone()
            .or(file.weights)
            .or_else(|| model.as_ref().map(|m| m.with_extension("crpw")));
        Ok(Self {
            model,
            weights,
            dataset: args.dataset.clone().or(file.dataset),
            index: args.index.clone().or(file.index),
            rules,
            normalize: args.normalize || file.normalize.unwrap_or(false),
            init,
            workers,
            output_dir: args
                .output_dir
                .clone()
                .or(file.output_dir)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
            seed: args.seed.or(file.seed).unwrap_or(0),
        })
    }

    pub fn index_dir(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.output_dir.join("index"))
    }
}
