use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidinstruct_annotation::{ExportInclude, ServerHandle, Store, StoreConfig};
use vidinstruct_core::adapter::{
    build_prompt, gradient_check, project, video_features, FrameEmbeddingTensor, LinearProjection,
};
use vidinstruct_core::enrichment::{self, enrich_video, EnrichConfig, EnrichmentClients, MergeSettings};
use vidinstruct_core::eval::{
    evaluate_generative, evaluate_zeroshot, read_generative_samples, read_qa_records, render_report, BenchmarkReport,
    EvalSettings, JudgeSettings, ReportFormat,
};
use vidinstruct_core::instruction::{
    generate_instruction_pairs, pairs_to_jsonl, GenerationReport, GenerationSpec, InstructionError, LlmParams,
};
use vidinstruct_core::keyframe::{
    ingest_frames, select_keyframes, DecoderCommand, Frame, FrameBatch, IngestOptions, Sampling,
};
use vidinstruct_core::services::FrameEncoder;
use vidinstruct_core::Projection;
use vidinstruct_gateway::{EchoEncoder, Gateway, MockFixtures, MockServer};

use crate::config::{ConfigError, PipelineConfig};
use crate::{
    AdapterDemoArgs, Command, EnrichArgs, EvalGenArgs, EvalQaArgs, ExportArgs, GenqaArgs, IngestArgs, KeyframesArgs,
    MockModelsArgs, OutputFormat, ServeArgs, EXIT_RUNTIME, EXIT_USAGE,
};

pub fn init_logging(json: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal());
    let _ = if json { builder.json().try_init() } else { builder.try_init() };
}

pub fn report_usage(e: &ConfigError, json: bool) -> i32 {
    if json {
        tracing::error!(kind = "usage", error = %e, "invalid configuration");
    } else {
        eprintln!("error: {e}");
    }
    EXIT_USAGE
}

pub fn report_runtime(e: &anyhow::Error, json: bool) -> i32 {
    if json {
        tracing::error!(kind = "runtime", error = %format!("{e:#}"), "command failed");
    } else {
        eprintln!("error: {e:#}");
    }
    EXIT_RUNTIME
}

pub fn dispatch(command: &Command, cfg: &PipelineConfig) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Keyframes(a) => keyframes(a, cfg),
        Command::Enrich(a) => enrich(a, cfg),
        Command::Genqa(a) => genqa(a, cfg),
        Command::EvalGen(a) => eval_gen(a, cfg),
        Command::EvalQa(a) => eval_qa(a, cfg),
        Command::Serve(a) => serve(a),
        Command::Export(a) => export(a),
        Command::MockModels(a) => mock_models(a),
        Command::AdapterDemo(a) => adapter_demo(a, cfg).map(|line| println!("{line}")),
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn print_line(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct IngestManifest {
    video_id: String,
    frames: Vec<String>,
    timestamps: Vec<f64>,
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let options = IngestOptions {
        video_id: a.video_id.clone(),
        sampling: match (a.stride, a.fps) {
            (_, Some(fps)) => Sampling::Fps(fps),
            (Some(stride), None) => Sampling::Stride(stride),
            (None, None) => Sampling::default(),
        },
        source_fps: a.source_fps,
        decoder: a.decoder.clone().map(DecoderCommand).unwrap_or_default(),
    };
    let batch = ingest_frames(&a.input, &options)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut files = Vec::with_capacity(batch.len());
    for (i, frame) in batch.frames().iter().enumerate() {
        let name = format!("frame_{i:06}.png");
        std::fs::write(a.out.join(&name), frame.to_png()?)?;
        files.push(name);
    }
    let manifest = IngestManifest {
        video_id: batch.video_id().to_string(),
        frames: files,
        timestamps: batch.timestamps().to_vec(),
    };
    write_atomic(&a.out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    tracing::info!(video_id = %manifest.video_id, frames = manifest.frames.len(), "ingested");
    print_line(&format!("{} frames -> {}", manifest.frames.len(), a.out.display()))
}

fn keyframes(a: &KeyframesArgs, cfg: &PipelineConfig) -> Result<()> {
    let options = IngestOptions {
        video_id: a.video_id.clone(),
        ..IngestOptions::default()
    };
    let batch = ingest_frames(&a.frames, &options)?;
    let set = select_keyframes(&batch, cfg.keyframes.k)?;
    let manifest = set.write_to(&a.out)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&a.out.join("manifest.json"), format!("{json}\n").as_bytes())?;
    print_line(&json)
}

/// One line of the `enrich` input.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    pub base_caption: String,
    /// Frame directory, relative to the input file.
    pub frames: PathBuf,
}

pub fn read_video_entries(path: &Path) -> Result<Vec<VideoEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: VideoEntry =
            serde_json::from_str(line).with_context(|| format!("{}:{}: bad video entry", path.display(), i + 1))?;
        if e.frames.is_relative() {
            e.frames = base.join(&e.frames);
        }
        entries.push(e);
    }
    entries.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if let Some(w) = entries.windows(2).find(|w| w[0].video_id == w[1].video_id) {
        bail!("video `{}` is listed twice", w[0].video_id);
    }
    Ok(entries)
}

fn enrich(a: &EnrichArgs, cfg: &PipelineConfig) -> Result<()> {
    let entries = read_video_entries(&a.videos)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.join("enriched.jsonl"));
    let gateway = Gateway::new(&cfg.gateway())?;
    let clients = EnrichmentClients {
        captioner: &gateway.captioner,
        dense_captioner: &gateway.dense_captioner,
        tagger: &gateway.tagger,
        llm: &gateway.llm,
    };
    let settings = EnrichConfig {
        thresholds: cfg.thresholds(),
        merge: MergeSettings {
            seed: cfg.seed,
            ..MergeSettings::default()
        },
        ..EnrichConfig::default()
    };

    let mut records = Vec::with_capacity(entries.len());
    let mut failed = Vec::new();
    for entry in &entries {
        let result = (|| -> Result<_> {
            let options = IngestOptions {
                video_id: Some(entry.video_id.clone()),
                ..IngestOptions::default()
            };
            let batch = ingest_frames(&entry.frames, &options)?;
            let keyframes = select_keyframes(&batch, cfg.keyframes.k)?;
            Ok(enrich_video(&entry.video_id, &entry.base_caption, &keyframes, &clients, &settings)?)
        })();
        match result {
            Ok(record) => {
                tracing::info!(
                    video_id = %record.video_id,
                    fallback = record.provenance.fallback,
                    degraded = record.provenance.degraded_frames.len(),
                    "enriched"
                );
                records.push(record);
            }
            Err(e) => {
                tracing::error!(video_id = %entry.video_id, error = %format!("{e:#}"), "enrichment failed");
                failed.push(entry.video_id.clone());
            }
        }
    }

    write_atomic(&out, enrichment::to_jsonl(&records).as_bytes())?;
    if let Some(dir) = &a.store {
        let store = Store::open(dir, StoreConfig::default())?;
        let mut added = 0;
        for r in &records {
            added += store.add_semi_automatic(r.clone())? as usize;
        }
        tracing::info!(added, store = %dir.display(), "recorded in annotation store");
    }
    print_line(&format!("{} of {} videos enriched -> {}", records.len(), entries.len(), out.display()))?;
    if !failed.is_empty() {
        bail!("enrichment failed for {}", failed.join(", "));
    }
    Ok(())
}

fn genqa(a: &GenqaArgs, cfg: &PipelineConfig) -> Result<()> {
    let records = enrichment::read_jsonl(&read_text(&a.input)?).with_context(|| format!("bad {}", a.input.display()))?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output.dir.join("pairs.jsonl"));
    let mut spec = match a.per_category {
        Some(n) => GenerationSpec::uniform(n),
        None => GenerationSpec {
            pairs_per_category: cfg.genqa.pairs_per_category.clone(),
            ..GenerationSpec::default()
        },
    };
    spec.llm_params = LlmParams {
        seed: cfg.seed,
        max_tokens: cfg.genqa.max_tokens,
        ..LlmParams::default()
    };
    let gateway = Gateway::new(&cfg.gateway())?;

    let mut pairs = Vec::new();
    let mut reports: Vec<GenerationReport> = Vec::new();
    for record in &records {
        match generate_instruction_pairs(&gateway.llm, record, &spec) {
            Ok(report) => {
                pairs.extend(report.pairs.iter().cloned());
                reports.push(report);
            }
            Err(InstructionError::NoPairs { video_id, report }) => {
                tracing::warn!(%video_id, "no pairs produced");
                reports.push(report);
            }
            Err(InstructionError::InvalidCaption(video_id, reason)) => {
                tracing::warn!(%video_id, %reason, "caption skipped");
            }
            Err(e) => return Err(e.into()),
        }
    }
    let shortfall: usize = reports.iter().map(GenerationReport::shortfall).sum();
    if shortfall > 0 {
        tracing::warn!(shortfall, "fewer pairs than requested");
    }
    write_atomic(&out, pairs_to_jsonl(&pairs).as_bytes())?;
    if let Some(path) = &a.report {
        write_atomic(path, format!("{}\n", serde_json::to_string_pretty(&reports)?).as_bytes())?;
    }
    print_line(&format!("{} pairs from {} captions -> {}", pairs.len(), records.len(), out.display()))
}

fn eval_settings(cfg: &PipelineConfig, model_tag: &str, dataset: &Option<String>) -> EvalSettings {
    EvalSettings {
        model_tag: model_tag.to_string(),
        dataset: dataset.clone(),
        judge: JudgeSettings {
            max_tokens: cfg.eval.max_tokens,
            seed: cfg.seed,
        },
        max_in_flight: cfg.eval.max_in_flight,
    }
}

fn emit_report(report: &BenchmarkReport, out: &Option<PathBuf>, format: OutputFormat) -> Result<()> {
    if let Some(path) = out {
        write_atomic(path, render_report(report, ReportFormat::Json).as_bytes())?;
    }
    let text = match format {
        OutputFormat::Table => render_report(report, ReportFormat::TableText),
        OutputFormat::Json => render_report(report, ReportFormat::Json),
    };
    print!("{text}");
    std::io::stdout().flush()?;
    Ok(())
}

fn eval_gen(a: &EvalGenArgs, cfg: &PipelineConfig) -> Result<()> {
    let samples = read_generative_samples(&read_text(&a.samples)?)?;
    let judge = Gateway::new(&cfg.judge_gateway())?.llm;
    let report = evaluate_generative(&judge, &samples, &eval_settings(cfg, &a.model_tag, &a.dataset))?;
    emit_report(&report, &a.out, a.format)
}

fn eval_qa(a: &EvalQaArgs, cfg: &PipelineConfig) -> Result<()> {
    let records = read_qa_records(&read_text(&a.records)?)?;
    let judge = Gateway::new(&cfg.judge_gateway())?.llm;
    let report = evaluate_zeroshot(&judge, &records, &eval_settings(cfg, &a.model_tag, &a.dataset))?;
    emit_report(&report, &a.out, a.format)
}

fn serve(a: &ServeArgs) -> Result<()> {
    let config = StoreConfig {
        auto_approve: a.auto_approve,
        ..StoreConfig::default()
    };
    let store = Store::open(&a.store, config).with_context(|| format!("cannot open store {}", a.store.display()))?;
    let handle = ServerHandle::start(Arc::new(store), &a.listen).with_context(|| format!("cannot listen on {}", a.listen))?;
    print_line(&format!("listening on {}", handle.url()))?;
    handle.wait()?;
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let include = ExportInclude::from_str(&a.include)?;
    let store = Store::open(&a.store, StoreConfig::default())?;
    let n = store.export_to(include, &a.out)?;
    print_line(&format!("exported {n} records -> {}", a.out.display()))
}

fn mock_models(a: &MockModelsArgs) -> Result<()> {
    let fixtures = MockFixtures::load(&a.fixtures).with_context(|| format!("cannot load fixtures from {}", a.fixtures.display()))?;
    let server = MockServer::start(fixtures, &a.listen).with_context(|| format!("cannot listen on {}", a.listen))?;
    print_line(&format!("listening on {}", server.url()))?;
    server.wait();
    Ok(())
}

const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Echo-encodes `T` synthetic frames, pools, concatenates, projects and lays
/// out the prompt, then checks adapter gradients on a small instance of the
/// same kind. Returns the summary line.
pub fn adapter_demo(a: &AdapterDemoArgs, cfg: &PipelineConfig) -> Result<String> {
    let mut settings = cfg.adapter.clone();
    settings.frames = a.frames.unwrap_or(settings.frames);
    settings.embed_dim = a.embed_dim.unwrap_or(settings.embed_dim);
    settings.output_dim = a.output_dim.unwrap_or(settings.output_dim);
    let dims = settings.dims();
    if dims.frames == 0 || dims.embed_dim == 0 || dims.output_dim == 0 {
        bail!("T, D and K must be positive");
    }
    let encoder = settings.encoder();
    let side = settings.input_side;
    let frames: Vec<Frame> = (0..dims.frames)
        .map(|i| Frame::solid(format!("demo/frame_{i:06}"), side, side, 3, (i % 256) as u8))
        .collect();
    let batch = FrameBatch::from_frames("demo", frames)?;
    let x = EchoEncoder.encode_frames(&encoder, &batch)?;
    let v = video_features(&x)?;
    let projection = Projection::init(dims.embed_dim, dims.output_dim, cfg.seed)?;
    let q = project(&v, &projection)?;
    let instruction = a.instruction.as_deref().unwrap_or("Describe this video in detail.");
    let prompt = build_prompt(instruction, q.nrows())?;
    tracing::info!(prompt = %prompt.rendered_text(), "prompt layout");

    // Every gradient entry costs two forward passes, so the check runs on a
    // capped instance with random inputs.
    let (t, n, d, k) = (dims.frames.min(3), dims.tokens.min(4), dims.embed_dim.min(4), dims.output_dim.min(3));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let small = FrameEmbeddingTensor::new(Array3::from_shape_simple_fn((t, n, d), || rng.random_range(-1.0..1.0)))?;
    let small_projection = LinearProjection::<f64>::init(d, k, cfg.seed)?;
    let upstream = Array2::from_shape_simple_fn((t + n, k), || rng.random_range(-1.0..1.0));
    let check = gradient_check(&small, &small_projection, &upstream, GRAD_CHECK_STEP)?;
    let status = if check.passes(GRAD_CHECK_TOLERANCE) { "PASS" } else { "FAIL" };
    tracing::info!(max_rel_error = check.max_rel_error, entries = check.entries, "gradient check");

    let line = format!(
        "v: {}x{}, Q_v: {}x{}, grad-check: {status}",
        v.row_count(),
        v.embed_dim(),
        q.nrows(),
        q.ncols()
    );
    if status == "FAIL" {
        println!("{line}");
        bail!("gradient check failed: max relative error {:.3e}", check.max_rel_error);
    }
    Ok(line)
}
