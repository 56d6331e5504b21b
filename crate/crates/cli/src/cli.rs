// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "crp",
    version,
    about = "Concept-conditional relevance analysis for feed-forward networks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML file with defaults for the options below
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Model manifest (JSON)
    #[arg(long, global = true, value_name = "FILE")]
    pub model: Option<PathBuf>,

    /// Weight blob (CRPW); defaults to the manifest path with a .crpw extension
    #[arg(long, global = true, value_name = "FILE")]
    pub weights: Option<PathBuf>,

    /// Dataset container (CRPD)
    #[arg(long, global = true, value_name = "FILE")]
    pub dataset: Option<PathBuf>,

    /// Reference index directory; defaults to <output-dir>/index
    #[arg(long, global = true, value_name = "DIR")]
    pub index: Option<PathBuf>,

    /// Rule composite: epsilon-zplus-flat, zplus-flat, epsilon, zplus or flat
    #[arg(long, global = true, value_name = "NAME")]
    pub rules: Option<String>,

    /// Stabilizer for epsilon rules
    #[arg(long, global = true, value_name = "EPS")]
    pub epsilon: Option<f64>,

    /// Per-layer rule override LAYER=RULE (repeatable)
    #[arg(long = "rule", global = true, value_name = "LAYER=RULE")]
    pub rule_overrides: Vec<String>,

    /// Normalize relevance per layer to unit absolute sum
    #[arg(long, global = true)]
    pub normalize: bool,

    /// Output relevance at the start of the backward pass: logit or one_hot
    #[arg(long, global = true, value_name = "INIT")]
    pub init: Option<String>,

    /// Worker threads; defaults to the available parallelism
    #[arg(long, global = true, env = "CRP_WORKERS", hide_env_values = true, value_name = "N")]
    pub workers: Option<usize>,

    /// Directory for written artifacts [default: crp-out]
    #[arg(
        long,
        global = true,
        env = "CRP_OUTPUT_DIR",
        hide_env_values = true,
        value_name = "DIR"
    )]
    pub output_dir: Option<PathBuf>,

    /// Seed for randomized orders
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,
}

/// Sample, class and channel conditions of one attribution.
#[derive(Debug, Clone, Args)]
pub struct TargetArgs {
    /// Sample as FILE.crpd:INDEX
    #[arg(long, value_name = "FILE:INDEX")]
    pub sample: String,

    /// Output class to explain; defaults to the predicted class
    #[arg(long, value_name = "CLASS")]
    pub class: Option<usize>,

    /// Channel condition LAYER:CH[,CH...] (repeatable)
    #[arg(long = "cond", value_name = "LAYER:CHANNELS")]
    pub conditions: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the model on one sample and print its logits
    Predict {
        /// Sample as FILE.crpd:INDEX
        #[arg(long, value_name = "FILE:INDEX")]
        sample: String,
    },

    /// Conditional heatmap of one sample
    Attribute {
        #[command(flatten)]
        target: TargetArgs,

        /// Also write heatmap.png
        #[arg(long)]
        png: bool,
    },

    /// Rank dataset samples for every channel of the given layers
    Index {
        /// Comma-separated layers; defaults to every convolution and dense layer
        #[arg(long, value_delimiter = ',', value_name = "LAYERS")]
        layers: Vec<String>,

        /// Comma-separated targets such as rel_sum, act_max, rel_max@each
        #[arg(
            long,
            value_delimiter = ',',
            value_name = "TARGETS",
            default_value = "rel_sum,act_max"
        )]
        targets: Vec<String>,

        /// References kept per channel
        #[arg(long, default_value_t = 40)]
        k: usize,
    },

    /// Print the top reference samples of one channel
    References {
        /// Layer id
        #[arg(long)]
        layer: String,

        /// Channel index
        #[arg(long)]
        channel: usize,

        /// Ranking target
        #[arg(long, default_value = "rel_sum")]
        target: String,

        /// Class of a per-class ranking
        #[arg(long)]
        class: Option<usize>,

        /// Number of references
        #[arg(long, default_value_t = 8)]
        k: usize,

        /// Write masked thumbnails as PNG
        #[arg(long)]
        thumbnails: bool,
    },

    /// Concept atlas: channel rankings per input region
    Atlas {
        #[command(flatten)]
        target: TargetArgs,

        /// Layer id
        #[arg(long)]
        layer: String,

        /// Regular grid ROWSxCOLS
        #[arg(
            long,
            value_name = "ROWSxCOLS",
            conflicts_with = "regions",
            required_unless_present = "regions"
        )]
        grid: Option<String>,

        /// Region label map (PNG or CRPW)
        #[arg(long, value_name = "FILE")]
        regions: Option<PathBuf>,

        /// Channels listed per region
        #[arg(long, default_value_t = 5)]
        top: usize,

        /// Do not flag low-density regions
        #[arg(long)]
        no_threshold: bool,
    },

    /// Channel ranking inside one input region
    Local {
        #[command(flatten)]
        target: TargetArgs,

        /// Layer id
        #[arg(long)]
        layer: String,

        /// Region TOP,LEFT,HEIGHT,WIDTH in input pixels
        #[arg(
            long,
            value_name = "T,L,H,W",
            conflicts_with = "mask",
            required_unless_present = "mask"
        )]
        rect: Option<String>,

        /// Region mask: nonzero labels of a PNG or CRPW label map
        #[arg(long, value_name = "FILE")]
        mask: Option<PathBuf>,

        /// Channels listed; 0 lists all
        #[arg(long, default_value_t = 0)]
        top: usize,
    },

    /// Attribution graph below one channel
    Graph {
        #[command(flatten)]
        target: TargetArgs,

        /// Layer id
        #[arg(long)]
        layer: String,

        /// Channel index
        #[arg(long)]
        channel: usize,

        /// Levels below the root
        #[arg(long, default_value_t = 2)]
        depth: usize,

        /// Children kept per node
        #[arg(long, default_value_t = 3)]
        children: usize,

        /// Keep the most negative children
        #[arg(long)]
        ascending: bool,
    },

    /// Switch channels off in relevance order and record the logits
    Flip {
        #[command(flatten)]
        target: TargetArgs,

        /// Layer id
        #[arg(long)]
        layer: String,

        /// relevance_desc, relevance_asc, random or random:SEED
        #[arg(long, default_value = "relevance_desc")]
        order: String,

        /// Channels to switch off; defaults to all
        #[arg(long)]
        steps: Option<usize>,
    },

    /// Blend a layer's activations towards a donor and record the effect
    Blend {
        #[command(flatten)]
        target: TargetArgs,

        /// Layer id
        #[arg(long)]
        layer: String,

        /// Donor sample as FILE.crpd:INDEX
        #[arg(
            long,
            value_name = "FILE:INDEX",
            conflicts_with = "donor_mean",
            required_unless_present = "donor_mean"
        )]
        donor: Option<String>,

        /// Use per-channel dataset means as the donor
        #[arg(long)]
        donor_mean: bool,

        /// Blended area TOP,LEFT,HEIGHT,WIDTH in layer coordinates; defaults to all
        #[arg(long, value_name = "T,L,H,W")]
        rect: Option<String>,

        /// Comma-separated blend factors in [0, 1]
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,

        /// Channel whose relevance is recorded, LAYER:CH (repeatable)
        #[arg(long = "track", value_name = "LAYER:CH")]
        tracked: Vec<String>,
    },

    /// Pairwise channel similarity over reference samples
    Similarity {
        /// Layer id
        #[arg(long)]
        layer: String,

        /// References per channel
        #[arg(long, default_value_t = 40)]
        k: usize,
    },

    /// Mean relevance of one channel for every output class
    Classes {
        /// Layer id
        #[arg(long)]
        layer: String,

        /// Channel index
        #[arg(long)]
        channel: usize,
    },

    /// Serve the analysis over HTTP
    Serve {
        /// Bind address
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,

        /// Port
        #[arg(long, default_value_t = 8760)]
        port: u16,

        /// Cached responses; 0 disables the cache
        #[arg(long, default_value_t = 256)]
        cache_size: usize,
    },

    /// Write the built-in fixture models and datasets
    Fixtures {
        /// Fixture names; defaults to all
        #[arg(long = "name", value_name = "NAME")]
        names: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Predict { .. } => "predict",
            Command::Attribute { .. } => "attribute",
            Command::Index { .. } => "index",
            Command::References { .. } => "references",
            Command::Atlas { .. } => "atlas",
            Command::Local { .. } => "local",
            Command::Graph { .. } => "graph",
            Command::Flip { .. } => "flip",
            Command::Blend { .. } => "blend",
            Command::Similarity { .. } => "similarity",
            Command::Classes { .. } => "classes",
            Command::Serve { .. } => "serve",
            Command::Fixtures { .. } => "fixtures",
        }
    }
}
