//! Pipeline configuration.
//!
//! Values are layered: command-line flags override `VIDINSTRUCT_*`
//! environment variables, which override the TOML config file, which
//! overrides the built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vidinstruct_core::adapter::{AdapterDims, TrainConfig};
use vidinstruct_core::enrichment::Thresholds;
use vidinstruct_core::instruction::{GenerationSpec, TaskCategory};
use vidinstruct_core::keyframe::DEFAULT_KEYFRAME_COUNT;
use vidinstruct_core::services::EncoderConfig;
use vidinstruct_gateway::{GatewayConfig, RetryPolicy};

pub const ENV_PREFIX: &str = "VIDINSTRUCT_";
pub const DEFAULT_MODELS_URL: &str = "http://127.0.0.1:8700";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config file: {0}")]
    Parse(String),
    #[error("environment variable {var}={value:?}: {reason}")]
    Env {
        var: String,
        value: String,
        reason: String,
    },
    #[error("unknown environment variable {0}")]
    UnknownEnv(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub encoder: String,
    pub captioner: String,
    pub dense_captioner: String,
    pub tagger: String,
    pub llm: String,
    pub judge: String,
    pub llm_model: String,
    pub judge_model: String,
    pub api_key: Option<String>,
}

impl Default for Endpoints {
    fn default() -> Self {
        let url = DEFAULT_MODELS_URL.to_string();
        Self {
            encoder: url.clone(),
            captioner: url.clone(),
            dense_captioner: url.clone(),
            tagger: url.clone(),
            llm: url.clone(),
            judge: url,
            llm_model: "gpt-3.5-turbo".into(),
            judge_model: "gpt-3.5-turbo".into(),
            api_key: None,
        }
    }
}

impl Endpoints {
    fn set_all(&mut self, url: &str) {
        for slot in [
            &mut self.encoder,
            &mut self.captioner,
            &mut self.dense_captioner,
            &mut self.tagger,
            &mut self.llm,
            &mut self.judge,
        ] {
            *slot = url.to_string();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSettings {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub jitter: bool,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for ClientSettings {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        Self {
            max_attempts: retry.max_attempts,
            base_delay_ms: retry.base_delay_ms,
            jitter: retry.jitter,
            max_in_flight: 8,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSettings {
    pub caption: f64,
    pub region: f64,
    pub tag: f64,
}

impl Default for ThresholdSettings {
    fn default() -> Self {
        let t = Thresholds::default();
        Self {
            caption: t.caption_min,
            region: t.region_min,
            tag: t.tag_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeSettings {
    pub k: usize,
}

impl Default for KeyframeSettings {
    fn default() -> Self {
        Self { k: DEFAULT_KEYFRAME_COUNT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSettings {
    pub frames: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    pub patch_size: u32,
    pub input_side: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        let dims = AdapterDims::default();
        let enc = EncoderConfig::default();
        let train = TrainConfig::default();
        Self {
            frames: dims.frames,
            embed_dim: dims.embed_dim,
            output_dim: dims.output_dim,
            patch_size: enc.patch_size,
            input_side: enc.input_side,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
        }
    }
}

impl AdapterSettings {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            input_side: self.input_side,
            embed_dim: self.embed_dim,
        }
    }

    /// Token count follows from the patch grid.
    pub fn dims(&self) -> AdapterDims {
        AdapterDims {
            frames: self.frames,
            tokens: self.encoder().token_count(),
            embed_dim: self.embed_dim,
            output_dim: self.output_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenqaSettings {
    pub pairs_per_category: BTreeMap<TaskCategory, usize>,
    pub max_tokens: u32,
}

impl Default for GenqaSettings {
    fn default() -> Self {
        let spec = GenerationSpec::default();
        Self {
            pairs_per_category: spec.pairs_per_category,
            max_tokens: spec.llm_params.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_in_flight: usize,
    pub max_tokens: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: PathBuf,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub endpoints: Endpoints,
    pub client: ClientSettings,
    pub thresholds: ThresholdSettings,
    pub keyframes: KeyframeSettings,
    pub adapter: AdapterSettings,
    pub genqa: GenqaSettings,
    pub eval: EvalSection,
    pub output: OutputSettings,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.thresholds;
        for (name, v) in [("caption", t.caption), ("region", t.region), ("tag", t.tag)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} threshold {v} is outside [0, 1]")));
            }
        }
        if self.keyframes.k == 0 {
            return Err(ConfigError::Invalid("keyframe count must be at least 1".into()));
        }
        if self.client.max_attempts == 0 {
            return Err(ConfigError::Invalid("max_attempts must be at least 1".into()));
        }
        if self.client.max_in_flight == 0 || self.eval.max_in_flight == 0 {
            return Err(ConfigError::Invalid("max_in_flight must be at least 1".into()));
        }
        self.adapter
            .encoder()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("adapter: {e}")))?;
        let a = &self.adapter;
        if a.frames == 0 || a.output_dim == 0 || a.batch_size == 0 {
            return Err(ConfigError::Invalid("adapter frames, output_dim and batch_size must be positive".into()));
        }
        let e = &self.endpoints;
        for (name, url) in [
            ("encoder", &e.encoder),
            ("captioner", &e.captioner),
            ("dense_captioner", &e.dense_captioner),
            ("tagger", &e.tagger),
            ("llm", &e.llm),
            ("judge", &e.judge),
        ] {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(ConfigError::Invalid(format!("{name} endpoint {url:?} is not an http(s) URL")));
            }
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            caption_min: self.thresholds.caption,
            region_min: self.thresholds.region,
            tag_min: self.thresholds.tag,
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.client.max_attempts,
            base_delay_ms: self.client.base_delay_ms,
            jitter: self.client.jitter,
        }
    }

    /// Gateway for the data pipeline services.
    pub fn gateway(&self) -> GatewayConfig {
        let e = &self.endpoints;
        GatewayConfig {
            encoder_url: e.encoder.clone(),
            captioner_url: e.captioner.clone(),
            dense_captioner_url: e.dense_captioner.clone(),
            tagger_url: e.tagger.clone(),
            llm_url: e.llm.clone(),
            llm_model: e.llm_model.clone(),
            api_key: e.api_key.clone(),
            retry: self.retry(),
            max_in_flight: self.client.max_in_flight,
            timeout_secs: self.client.timeout_secs,
        }
    }

    /// Gateway whose LLM is the judge.
    pub fn judge_gateway(&self) -> GatewayConfig {
        GatewayConfig {
            llm_url: self.endpoints.judge.clone(),
            llm_model: self.endpoints.judge_model.clone(),
            max_in_flight: self.eval.max_in_flight.max(self.client.max_in_flight),
            ..self.gateway()
        }
    }
}

/// Partial settings from one layer (environment or flags).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub models_url: Option<String>,
    pub encoder_url: Option<String>,
    pub captioner_url: Option<String>,
    pub dense_captioner_url: Option<String>,
    pub tagger_url: Option<String>,
    pub llm_url: Option<String>,
    pub judge_url: Option<String>,
    pub llm_model: Option<String>,
    pub judge_model: Option<String>,
    pub api_key: Option<String>,
    pub caption_threshold: Option<f64>,
    pub region_threshold: Option<f64>,
    pub tag_threshold: Option<f64>,
    pub keyframes: Option<usize>,
    pub max_attempts: Option<u32>,
    pub retry_base_ms: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

/// Environment variable names, without the `VIDINSTRUCT_` prefix.
pub const ENV_KEYS: &[&str] = &[
    "CONFIG",
    "SEED",
    "MODELS_URL",
    "ENCODER_URL",
    "CAPTIONER_URL",
    "DENSE_CAPTIONER_URL",
    "TAGGER_URL",
    "LLM_URL",
    "JUDGE_URL",
    "LLM_MODEL",
    "JUDGE_MODEL",
    "API_KEY",
    "CAPTION_THRESHOLD",
    "REGION_THRESHOLD",
    "TAG_THRESHOLD",
    "KEYFRAMES",
    "MAX_ATTEMPTS",
    "RETRY_BASE_MS",
    "MAX_IN_FLIGHT",
    "OUTPUT_DIR",
];

fn parse_env<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Env {
        var: var.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl Overrides {
    /// Collects `VIDINSTRUCT_*` variables; other variables are ignored and
    /// unknown `VIDINSTRUCT_*` names are rejected.
    pub fn from_env<I, K, V>(vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut o = Self::default();
        for (k, v) in vars {
            let (var, value) = (k.as_ref(), v.as_ref());
            let Some(key) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let text = || Some(value.to_string());
            match key {
                "CONFIG" => o.config = Some(PathBuf::from(value)),
                "SEED" => o.seed = Some(parse_env(var, value)?),
                "MODELS_URL" => o.models_url = text(),
                "ENCODER_URL" => o.encoder_url = text(),
                "CAPTIONER_URL" => o.captioner_url = text(),
                "DENSE_CAPTIONER_URL" => o.dense_captioner_url = text(),
                "TAGGER_URL" => o.tagger_url = text(),
                "LLM_URL" => o.llm_url = text(),
                "JUDGE_URL" => o.judge_url = text(),
                "LLM_MODEL" => o.llm_model = text(),
                "JUDGE_MODEL" => o.judge_model = text(),
                "API_KEY" => o.api_key = text(),
                "CAPTION_THRESHOLD" => o.caption_threshold = Some(parse_env(var, value)?),
                "REGION_THRESHOLD" => o.region_threshold = Some(parse_env(var, value)?),
                "TAG_THRESHOLD" => o.tag_threshold = Some(parse_env(var, value)?),
                "KEYFRAMES" => o.keyframes = Some(parse_env(var, value)?),
                "MAX_ATTEMPTS" => o.max_attempts = Some(parse_env(var, value)?),
                "RETRY_BASE_MS" => o.retry_base_ms = Some(parse_env(var, value)?),
                "MAX_IN_FLIGHT" => o.max_in_flight = Some(parse_env(var, value)?),
                "OUTPUT_DIR" => o.output_dir = Some(PathBuf::from(value)),
                // Unrelated variables sharing the prefix, e.g. test harness knobs.
                _ if key.starts_with('_') => {}
                _ => return Err(ConfigError::UnknownEnv(var.to_string())),
            }
        }
        Ok(o)
    }

    /// Applies this layer on top of `cfg`. A blanket models URL is applied
    /// before the per-service URLs of the same layer.
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        set(&mut cfg.seed, &self.seed);
        if let Some(url) = &self.models_url {
            cfg.endpoints.set_all(url);
        }
        let e = &mut cfg.endpoints;
        set(&mut e.encoder, &self.encoder_url);
        set(&mut e.captioner, &self.captioner_url);
        set(&mut e.dense_captioner, &self.dense_captioner_url);
        set(&mut e.tagger, &self.tagger_url);
        set(&mut e.llm, &self.llm_url);
        set(&mut e.judge, &self.judge_url);
        set(&mut e.llm_model, &self.llm_model);
        set(&mut e.judge_model, &self.judge_model);
        if self.api_key.is_some() {
            e.api_key = self.api_key.clone();
        }
        set(&mut cfg.thresholds.caption, &self.caption_threshold);
        set(&mut cfg.thresholds.region, &self.region_threshold);
        set(&mut cfg.thresholds.tag, &self.tag_threshold);
        set(&mut cfg.keyframes.k, &self.keyframes);
        set(&mut cfg.client.max_attempts, &self.max_attempts);
        set(&mut cfg.client.base_delay_ms, &self.retry_base_ms);
        set(&mut cfg.client.max_in_flight, &self.max_in_flight);
        set(&mut cfg.output.dir, &self.output_dir);
    }
}

/// Layers defaults, config file text, environment and flags, then validates.
pub fn resolve(file: Option<&str>, env: &Overrides, flags: &Overrides) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match file {
        Some(text) => PipelineConfig::from_toml(text)?,
        None => PipelineConfig::default(),
    };
    env.apply(&mut cfg);
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`resolve`], reading the config file named by the flags or, failing
/// that, by the environment.
pub fn load(env: &Overrides, flags: &Overrides) -> Result<PipelineConfig, ConfigError> {
    let path: Option<&Path> = flags.config.as_deref().or(env.config.as_deref());
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
            path: p.to_path_buf(),
            source,
        })?),
        None => None,
    };
    resolve(text.as_deref(), env, flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.thresholds.tag, 0.7);
        assert_eq!(cfg.keyframes.k, 8);
        assert_eq!(cfg.adapter.dims().tokens, 256);
        assert_eq!(cfg.adapter.learning_rate, 2e-5);
        assert_eq!(cfg.adapter.batch_size, 32);
        assert_eq!(cfg.adapter.epochs, 3);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[thresholds]\ntags = 0.5\n").is_err());
        assert!(matches!(
            Overrides::from_env([("VIDINSTRUCT_SEEED", "1")]),
            Err(ConfigError::UnknownEnv(_))
        ));
    }

    #[test]
    fn bad_env_value() {
        let err = Overrides::from_env([("VIDINSTRUCT_KEYFRAMES", "many")]).unwrap_err();
        assert!(err.to_string().contains("VIDINSTRUCT_KEYFRAMES"));
    }
}
