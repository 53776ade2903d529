//! Judge prompts and strict parsing of judge replies.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Aspect, EvalError, GenerativeSample};
use crate::services::{LlmRequest, TextLlm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeSettings {
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectScore {
    pub aspect: Aspect,
    pub score: u8,
    pub judge_rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAJudgment {
    #[serde(rename = "match")]
    pub matched: bool,
    pub score: u8,
}

/// Result of one judged item: the value, or the reason it stays unscored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Judged<T> {
    pub outcome: Result<T, String>,
    /// Judge calls made, including the re-ask.
    pub attempts: u32,
}

impl<T> Judged<T> {
    pub fn retried(&self) -> bool {
        self.attempts > 1
    }
}

const SCORE_CONTRACT: &str =
    "Rate the predicted answer on this aspect with an integer from 1 (very poor) to 5 (excellent).\nReply with only a JSON object: {\"score\": <integer 1-5>, \"reason\": \"<one sentence>\"}";

pub fn aspect_prompt(sample: &GenerativeSample, aspect: Aspect) -> String {
    format!(
        "You are grading the output of a video conversation model.\n\
         Evaluation aspect: {}\n\
         Rubric: {}\n\n\
         Question: {}\n\
         Reference answer: {}\n\
         Predicted answer: {}\n\n\
         {SCORE_CONTRACT}",
        aspect.display_name(),
        aspect.rubric(),
        sample.question.trim(),
        sample.reference_answer.trim(),
        sample.prediction.trim(),
    )
}

pub fn consistency_prompt(a: &GenerativeSample, b: &GenerativeSample) -> String {
    format!(
        "You are grading the output of a video conversation model.\n\
         Evaluation aspect: {}\n\
         Rubric: {}\n\n\
         Reference answer: {}\n\
         Question 1: {}\n\
         Predicted answer 1: {}\n\
         Question 2: {}\n\
         Predicted answer 2: {}\n\n\
         Rate how consistent the two predicted answers are with each other and with the reference, with an integer from 1 (contradictory) to 5 (fully consistent).\n\
         Reply with only a JSON object: {{\"score\": <integer 1-5>, \"reason\": \"<one sentence>\"}}",
        Aspect::Consistency.display_name(),
        Aspect::Consistency.rubric(),
        a.reference_answer.trim(),
        a.question.trim(),
        a.prediction.trim(),
        b.question.trim(),
        b.prediction.trim(),
    )
}

pub fn qa_prompt(question: &str, ground_truth: &str, prediction: &str) -> String {
    format!(
        "You are checking answers to questions about videos.\n\
         Question: {}\n\
         Correct answer: {}\n\
         Predicted answer: {}\n\n\
         Decide whether the predicted answer means the same as the correct answer, and rate its quality with an integer from 1 (wrong) to 5 (perfect match).\n\
         Reply with only a JSON object: {{\"match\": \"yes\" or \"no\", \"score\": <integer 1-5>}}",
        question.trim(),
        ground_truth.trim(),
        prediction.trim(),
    )
}

fn reask(prompt: &str, problem: &str) -> String {
    format!("{prompt}\n\nYour previous reply was rejected ({problem}). Reply again with only the JSON object.")
}

/// First JSON object embedded in `raw`.
fn extract_object(raw: &str) -> Option<Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(o))) => Some(o),
            _ => None,
        }
    })
}

/// Integer score in 1..=5. Fractions and out-of-range values are protocol
/// errors, never clamped.
fn strict_score(o: &Map<String, Value>) -> Result<u8, String> {
    let v = o.get("score").ok_or("missing `score`")?;
    let n = v.as_u64().ok_or_else(|| format!("score {v} is not a positive integer"))?;
    if (1..=5).contains(&n) {
        Ok(n as u8)
    } else {
        Err(format!("score {n} outside 1-5"))
    }
}

pub fn parse_aspect_reply(raw: &str, aspect: Aspect) -> Result<AspectScore, String> {
    let o = extract_object(raw).ok_or("no JSON object in reply")?;
    let score = strict_score(&o)?;
    let judge_rationale = match o.get("reason") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => return Err(format!("reason {other} is not a string")),
    };
    Ok(AspectScore {
        aspect,
        score,
        judge_rationale,
    })
}

pub fn parse_qa_reply(raw: &str) -> Result<QAJudgment, String> {
    let o = extract_object(raw).ok_or("no JSON object in reply")?;
    let matched = match o.get("match").or_else(|| o.get("pred")) {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("yes") => true,
        Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("no") => false,
        Some(other) => return Err(format!("match {other} is not yes/no")),
        None => return Err("missing `match`".into()),
    };
    Ok(QAJudgment {
        matched,
        score: strict_score(&o)?,
    })
}

/// Asks once, re-asks once on any failure, then gives up.
pub(crate) fn ask_with_reask<T>(
    judge: &dyn TextLlm,
    prompt: String,
    settings: &JudgeSettings,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Judged<T> {
    let mut current = prompt.clone();
    let mut last_problem = String::new();
    for attempt in 1..=2u32 {
        let req = LlmRequest::deterministic(current.clone(), settings.max_tokens, settings.seed);
        let result = judge
            .complete_text(&req)
            .map_err(|e| format!("judge call failed: {e}"))
            .and_then(|resp| parse(&resp.text));
        match result {
            Ok(v) => {
                return Judged {
                    outcome: Ok(v),
                    attempts: attempt,
                }
            }
            Err(problem) => {
                tracing::debug!(attempt, %problem, "judge reply rejected");
                current = reask(&prompt, &problem);
                last_problem = problem;
            }
        }
    }
    Judged {
        outcome: Err(last_problem),
        attempts: 2,
    }
}

pub fn score_aspect(
    judge: &dyn TextLlm,
    sample: &GenerativeSample,
    aspect: Aspect,
    settings: &JudgeSettings,
) -> Result<Judged<AspectScore>, EvalError> {
    if aspect == Aspect::Consistency {
        return Err(EvalError::Validation(
            "consistency is scored over a pair of samples".into(),
        ));
    }
    Ok(ask_with_reask(judge, aspect_prompt(sample, aspect), settings, |raw| {
        parse_aspect_reply(raw, aspect)
    }))
}

pub fn score_consistency(
    judge: &dyn TextLlm,
    a: &GenerativeSample,
    b: &GenerativeSample,
    settings: &JudgeSettings,
) -> Result<Judged<AspectScore>, EvalError> {
    match (&a.consistency_group, &b.consistency_group) {
        (Some(ga), Some(gb)) if ga == gb => {}
        _ => {
            return Err(EvalError::Validation(
                "consistency needs two samples from the same group".into(),
            ))
        }
    }
    if a.pair_id == b.pair_id {
        return Err(EvalError::Validation("consistency needs two distinct samples".into()));
    }
    Ok(ask_with_reask(judge, consistency_prompt(a, b), settings, |raw| {
        parse_aspect_reply(raw, Aspect::Consistency)
    }))
}

pub fn judge_qa(
    judge: &dyn TextLlm,
    question: &str,
    ground_truth: &str,
    prediction: &str,
    settings: &JudgeSettings,
) -> Judged<QAJudgment> {
    ask_with_reask(judge, qa_prompt(question, ground_truth, prediction), settings, parse_qa_reply)
}
