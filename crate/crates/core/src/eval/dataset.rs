//! Readers for benchmark inputs.
//!
//! QA records use a neutral `{question, ground_truth, prediction}` layout;
//! the field aliases cover the common MSVD-QA / MSRVTT-QA / TGIF-QA /
//! ActivityNet-QA prediction dumps (`answer`/`a`, `pred`, `q`).

use serde::{Deserialize, Serialize};

use super::{EvalError, GenerativeSample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "question_id")]
    pub id: Option<serde_json::Value>,
    #[serde(alias = "q")]
    pub question: String,
    #[serde(alias = "answer", alias = "a")]
    pub ground_truth: String,
    #[serde(default, alias = "pred")]
    pub prediction: String,
}

fn read_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, EvalError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| EvalError::Dataset(e.to_string()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Dataset(format!("line {}: {e}", i + 1))))
        .collect()
}

/// JSONL, or a single JSON array.
pub fn read_qa_records(text: &str) -> Result<Vec<QaRecord>, EvalError> {
    read_lines(text)
}

pub fn read_generative_samples(text: &str) -> Result<Vec<GenerativeSample>, EvalError> {
    read_lines(text)
}
