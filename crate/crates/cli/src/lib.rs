//! The `vidinstruct` command line.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Overrides;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vidinstruct", version, about = "Video instruction data factory")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every subcommand. Each overrides the matching
/// `VIDINSTRUCT_*` environment variable and config file entry.
#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// TOML config file [env: VIDINSTRUCT_CONFIG]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Emit logs as JSON lines on stderr
    #[arg(long, global = true)]
    pub json_logs: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base URL for every model service
    #[arg(long, global = true)]
    pub models_url: Option<String>,
    #[arg(long, global = true)]
    pub encoder_url: Option<String>,
    #[arg(long, global = true)]
    pub captioner_url: Option<String>,
    #[arg(long, global = true)]
    pub dense_captioner_url: Option<String>,
    #[arg(long, global = true)]
    pub tagger_url: Option<String>,
    #[arg(long, global = true)]
    pub llm_url: Option<String>,
    #[arg(long, global = true, alias = "judge-endpoint")]
    pub judge_url: Option<String>,
    #[arg(long, global = true)]
    pub llm_model: Option<String>,
    #[arg(long, global = true)]
    pub judge_model: Option<String>,
    #[arg(long, global = true)]
    pub caption_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub region_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub tag_threshold: Option<f64>,
    /// Key frames per video
    #[arg(short = 'k', long, global = true)]
    pub keyframes: Option<usize>,
    #[arg(long, global = true)]
    pub max_attempts: Option<u32>,
    /// Base retry delay in milliseconds
    #[arg(long, global = true)]
    pub retry_base_ms: Option<u64>,
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            config: self.config.clone(),
            seed: self.seed,
            models_url: self.models_url.clone(),
            encoder_url: self.encoder_url.clone(),
            captioner_url: self.captioner_url.clone(),
            dense_captioner_url: self.dense_captioner_url.clone(),
            tagger_url: self.tagger_url.clone(),
            llm_url: self.llm_url.clone(),
            judge_url: self.judge_url.clone(),
            llm_model: self.llm_model.clone(),
            judge_model: self.judge_model.clone(),
            api_key: None,
            caption_threshold: self.caption_threshold,
            region_threshold: self.region_threshold,
            tag_threshold: self.tag_threshold,
            keyframes: self.keyframes,
            max_attempts: self.max_attempts,
            retry_base_ms: self.retry_base_ms,
            max_in_flight: self.max_in_flight,
            output_dir: self.output_dir.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a frame directory or decode a video into numbered PNG frames
    Ingest(IngestArgs),
    /// Select diverse key frames from a frame directory
    Keyframes(KeyframesArgs),
    /// Build semi-automatic enriched captions for a list of videos
    Enrich(EnrichArgs),
    /// Generate instruction pairs from enriched captions
    Genqa(GenqaArgs),
    /// Score generative predictions on the five-aspect benchmark
    EvalGen(EvalGenArgs),
    /// Score open-ended QA predictions for accuracy and quality
    EvalQa(EvalQaArgs),
    /// Run the annotation REST service
    Serve(ServeArgs),
    /// Export approved and semi-automatic captions from an annotation store
    Export(ExportArgs),
    /// Run deterministic mock model services from a fixture directory
    MockModels(MockModelsArgs),
    /// Run the feature adapter on echo embeddings and check its gradients
    AdapterDemo(AdapterDemoArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Frame directory or video file
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub video_id: Option<String>,
    /// Keep every n-th frame
    #[arg(long, conflicts_with = "fps")]
    pub stride: Option<usize>,
    /// Resample to this many frames per second
    #[arg(long)]
    pub fps: Option<f64>,
    /// Frame rate of a frame directory
    #[arg(long, default_value_t = 1.0)]
    pub source_fps: f64,
    /// Decoder command with {input}, {output_dir} and {fps} placeholders
    #[arg(long)]
    pub decoder: Option<String>,
}

#[derive(Debug, Args)]
pub struct KeyframesArgs {
    /// Frame directory
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub video_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct EnrichArgs {
    /// JSONL of {video_id, base_caption, frames}; `frames` is relative to this file
    #[arg(long)]
    pub videos: PathBuf,
    /// Defaults to <output-dir>/enriched.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also record results in this annotation store
    #[arg(long)]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenqaArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Defaults to <output-dir>/pairs.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pairs requested in every category, replacing the configured counts
    #[arg(long)]
    pub per_category: Option<usize>,
    /// Write per-video generation reports here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalGenArgs {
    /// JSONL or JSON array of samples
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_tag: String,
    #[arg(long)]
    pub dataset: Option<String>,
    /// What to print on stdout
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct EvalQaArgs {
    /// JSONL or JSON array of {question, ground_truth, prediction}
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_tag: String,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    /// Mark submissions approved immediately
    #[arg(long)]
    pub auto_approve: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated sources: human, semi_automatic
    #[arg(long, default_value = "human,semi_automatic")]
    pub include: String,
}

#[derive(Debug, Args)]
pub struct MockModelsArgs {
    #[arg(long)]
    pub fixtures: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8700")]
    pub listen: String,
}

#[derive(Debug, Args)]
pub struct AdapterDemoArgs {
    /// Frames
    #[arg(long = "T")]
    pub frames: Option<usize>,
    /// Visual embedding width
    #[arg(long = "D")]
    pub embed_dim: Option<usize>,
    /// Decoder embedding width
    #[arg(long = "K")]
    pub output_dim: Option<usize>,
    #[arg(long)]
    pub instruction: Option<String>,
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    commands::init_logging(cli.global.json_logs);
    let env = match Overrides::from_env(std::env::vars()) {
        Ok(env) => env,
        Err(e) => return commands::report_usage(&e, cli.global.json_logs),
    };
    let cfg = match config::load(&env, &cli.global.overrides()) {
        Ok(cfg) => cfg,
        Err(e) => return commands::report_usage(&e, cli.global.json_logs),
    };
    match commands::dispatch(&cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => commands::report_runtime(&e, cli.global.json_logs),
    }
}
