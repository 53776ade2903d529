//! Semi-automatic caption enrichment: confidence thresholds, the
//! tag-vocabulary filter, and LLM merging of per-frame context into one
//! video-level caption.

mod filter;
mod merge;
mod pipeline;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::services::{FrameCaption, RegionCaption, TagSet};

pub use filter::{
    content_words, tag_vocabulary, tag_vocabulary_filter, threshold_filter, CaptionCandidate, CaptionKind,
    DroppedCaption, StopwordPolicy, Thresholds, VocabularyOutcome, STOPWORDS_VERSION,
};
pub use merge::{fallback_caption, merge_prompt, merge_to_video_caption, MergeSettings, MERGE_PROMPT_VERSION};
pub use pipeline::{enrich_video, EnrichConfig, EnrichmentClients};

#[derive(Debug, Error, PartialEq)]
pub enum EnrichmentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("caption refers to frame {0}, which has no tag set")]
    MissingFrame(usize),
    #[error("invalid input: {0}")]
    Validation(String),
}

pub type Result<T, E = EnrichmentError> = std::result::Result<T, E>;

/// Model outputs gathered for one key frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotations {
    pub frame_index: usize,
    pub caption: Option<FrameCaption>,
    pub region_captions: Vec<RegionCaption>,
    pub tags: TagSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    SemiAutomatic,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Threshold,
    Vocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Caption,
    Region,
    Tag,
}

/// Items entering and leaving one filter stage for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: Stage,
    pub stream: Stream,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
}

impl StageCount {
    pub fn new(stage: Stage, stream: Stream) -> Self {
        Self {
            stage,
            stream,
            input: 0,
            kept: 0,
            dropped: 0,
        }
    }

    pub fn record(&mut self, input: usize, kept: usize) {
        self.input += input;
        self.kept += kept;
        self.dropped += input - kept;
    }

    pub fn is_consistent(&self) -> bool {
        self.kept + self.dropped == self.input
    }
}

/// What went into the merge call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeInputs {
    pub frames: usize,
    pub captions: usize,
    pub region_captions: usize,
    pub tags: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: Vec<StageCount>,
    pub merge_inputs: MergeInputs,
    pub llm_model: Option<String>,
    /// Merge retried without region captions after a truncated or failed call.
    pub reduced_context: bool,
    /// The LLM never produced a usable caption; text was assembled locally.
    pub fallback: bool,
    /// Key frames whose caption services failed and contributed tags only.
    pub degraded_frames: Vec<usize>,
}

impl Provenance {
    pub fn is_consistent(&self) -> bool {
        self.stages.iter().all(StageCount::is_consistent)
    }

    pub fn stage(&self, stage: Stage, stream: Stream) -> Option<&StageCount> {
        self.stages.iter().find(|s| s.stage == stage && s.stream == stream)
    }
}

/// One video-level description, from either pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedCaption {
    pub video_id: String,
    pub base_caption: String,
    pub enriched_text: String,
    pub source: CaptionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl EnrichedCaption {
    pub fn validate(&self) -> Result<()> {
        if self.enriched_text.trim().is_empty() {
            return Err(EnrichmentError::Validation("enriched text is empty".into()));
        }
        if !self.provenance.is_consistent() {
            return Err(EnrichmentError::Validation("provenance counts do not add up".into()));
        }
        Ok(())
    }

    pub fn offending_words(dropped: &[DroppedCaption]) -> BTreeSet<String> {
        dropped.iter().flat_map(|d| d.offending.iter().cloned()).collect()
    }
}

/// Reads one `EnrichedCaption` per non-blank line.
pub fn read_jsonl(text: &str) -> std::result::Result<Vec<EnrichedCaption>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// One `EnrichedCaption` per line, newline-terminated.
pub fn to_jsonl(records: &[EnrichedCaption]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("caption serializes"));
        out.push('\n');
    }
    out
}
