//! `webcp`: mine web calibration data and build conformal prediction sets.
//!
//! Exit status is 0 on success, 2 for invalid arguments or configuration,
//! and 3 when a stage fails while running.

mod commands;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Failure;

#[derive(Parser)]
#[command(name = "webcp", version, about = "Conformal prediction calibrated on mined web data")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine image/context pairs for every class.
    Mine(MineArgs),
    /// Convert a JSON dump or a service response into a .wcpe store.
    EmbedImport(EmbedImportArgs),
    /// Validate a .wcpe store and print its shape.
    EmbedCheck(EmbedCheckArgs),
    /// Write the embedding requests a pipeline config needs, one per store.
    EmbedRequests(EmbedRequestsArgs),
    /// Turn a mined corpus into plausibility vectors.
    Plausibility(PlausibilityArgs),
    /// Classifier nonconformity scores for a set of images.
    Score(ScoreArgs),
    /// Select a conformal threshold.
    Calibrate(CalibrateArgs),
    /// Build prediction sets from scores and a threshold.
    Predict(PredictArgs),
    /// Coverage and efficiency report for WebCP and the baselines.
    Evaluate(EvaluateArgs),
    /// Write a self-contained synthetic task directory.
    Synth(SynthArgs),
    /// Run pipeline stages from one config file.
    Run(RunArgs),
}

#[derive(Args)]
struct MineArgs {
    /// JSON list of {"id", "display_name"}.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, default_value = "An image of <category>")]
    template: String,
    #[arg(long)]
    per_class: usize,
    /// Search endpoint URL, or a fixture directory.
    #[arg(long)]
    provider: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "webcp")]
    task_name: String,
    #[arg(long, default_value_t = 15.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 2)]
    retries: u32,
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
    /// Fetch pages even where robots.txt disallows it.
    #[arg(long)]
    ignore_robots: bool,
}

#[derive(Args)]
struct EmbedImportArgs {
    /// JSON dump of the form {"dim", "vectors": {id: [..]}}.
    #[arg(required_unless_present = "service", conflicts_with = "service")]
    input: Option<PathBuf>,
    /// Embedding service endpoint; requires --request.
    #[arg(long, requires = "request")]
    service: Option<String>,
    /// Request body to send to the service.
    #[arg(long)]
    request: Option<PathBuf>,
    /// Reject vectors whose dimension differs.
    #[arg(long)]
    expect_dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedCheckArgs {
    store: PathBuf,
    #[arg(long)]
    expect_dim: Option<usize>,
}

#[derive(Args)]
struct EmbedRequestsArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlausibilityArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding sentences, queries, content_images and
    /// content_prompts stores.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    pseudo_map: PathBuf,
    /// Temperatures, aggregation and prompts; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    images: PathBuf,
    /// Label embeddings keyed by class id.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, default_value_t = 0.07)]
    temperature: f64,
    /// JSON lines with an `example_id` field; every image when omitted.
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Webcp,
    Standard,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Strict,
    Conservative,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, required_unless_present = "labels")]
    plausibilities: Option<PathBuf>,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "webcp")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "strict")]
    rule: RuleArg,
    /// For --method standard: labelled calibration items instead of the
    /// queried classes of the web examples.
    #[arg(long, conflicts_with = "plausibilities")]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    threshold: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    /// CSV report; a JSON copy is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Fixture spec; defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset, e.g. `calibrate,predict`.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    task_name: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.quiet);
    let result = match cli.command {
        Command::Mine(a) => commands::mine(a),
        Command::EmbedImport(a) => commands::embed_import(a),
        Command::EmbedCheck(a) => commands::embed_check(a),
        Command::EmbedRequests(a) => commands::embed_requests(a),
        Command::Plausibility(a) => commands::plausibility(a),
        Command::Score(a) => commands::score(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Run(a) => commands::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("webcp: configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("webcp: {e:#}");
            ExitCode::from(3)
        }
    }
}
