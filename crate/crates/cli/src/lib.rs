//! Command-line front end for building OSM industry classification datasets,
//! running model pipelines over them and scoring the results.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nacekit::fetch::FetchMode;

use config::{Effective, FetchSetup, Layer};

#[derive(Debug, Parser)]
#[command(name = "nacekit", version, about = "Multimodal NACE section classification of OSM elements")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Upper bound on concurrent work items.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Serve every network request from a recorded store; fail on misses.
    #[arg(long, global = true, value_name = "DIR", conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Perform requests live and record them into a store.
    #[arg(long, global = true, value_name = "DIR")]
    pub record: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render tag-mapping prompts from guideline extracts and compile the
    /// reviewed responses into a mapping file.
    Map(MapArgs),
    /// Label, filter and sample OSM elements, then fetch images and sources.
    Build(BuildArgs),
    /// Run a classification pipeline over a dataset.
    Classify(ClassifyArgs),
    /// Compute accuracy and clue metrics for a records file.
    Score(ScoreArgs),
    /// Per-section counts and resource statistics of a dataset.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// Directory of guideline extract JSON files with reviewed `.tags` responses.
    #[arg(long)]
    pub guidelines: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only write the prompts.
    #[arg(long)]
    pub prompts_only: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Element stream (JSON lines) or Overpass JSON export.
    #[arg(long)]
    pub elements: PathBuf,
    /// Tag mapping file; the bundled mapping when omitted.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub per_section: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// zero-shot or multi-turn
    #[arg(long)]
    pub pipeline: Option<String>,
    /// Input configuration: none, satellite, external, satellite+osm,
    /// satellite+external or all.
    #[arg(long)]
    pub inputs: Option<String>,
    /// simple or extended
    #[arg(long)]
    pub variant: Option<String>,
    /// text or json
    #[arg(long)]
    pub output_mode: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl Cli {
    /// Flag layer on top of which nothing else applies.
    fn flag_layer(&self) -> Layer {
        let mut layer = Layer { workers: self.workers, seed: self.seed, ..Layer::default() };
        match &self.command {
            Command::Build(a) => layer.build.per_section = a.per_section,
            Command::Classify(a) => {
                layer.classify.pipeline = a.pipeline.clone();
                layer.classify.inputs = a.inputs.clone();
                layer.classify.variant = a.variant.clone();
                layer.classify.output_mode = a.output_mode.clone();
                layer.gateway.model = a.model.clone();
                layer.gateway.endpoint = a.endpoint.clone();
            }
            _ => {}
        }
        layer
    }

    fn fetch_setup(&self) -> FetchSetup {
        match (&self.replay, &self.record) {
            (Some(dir), _) => FetchSetup { mode: FetchMode::Replay, store: Some(dir.clone()) },
            (None, Some(dir)) => FetchSetup { mode: FetchMode::Record, store: Some(dir.clone()) },
            (None, None) => FetchSetup { mode: FetchMode::Live, store: None },
        }
    }

    pub fn effective(&self, env: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<Effective> {
        let mut layer = Layer::from_env(env)?;
        if let Some(path) = &self.config {
            layer = layer.overlay(&Layer::load(path)?);
        }
        layer = layer.overlay(&self.flag_layer());
        Effective::resolve(&layer, self.fetch_setup())
    }
}

/// Execute a parsed command line. `env` supplies environment variables.
pub fn run(cli: &Cli, env: &dyn Fn(&str) -> Option<String>) -> anyhow::Result<()> {
    let eff = cli.effective(env)?;
    let api_key = env(config::API_KEY_ENV).filter(|k| !k.is_empty());
    match &cli.command {
        Command::Map(a) => commands::map(a, &eff),
        Command::Build(a) => commands::build(a, &eff, cli.config.as_deref()),
        Command::Classify(a) => commands::classify(a, &eff, api_key, cli.config.as_deref()),
        Command::Score(a) => commands::score(a, &eff),
        Command::Summarize(a) => commands::summarize(a, &eff),
    }
}
