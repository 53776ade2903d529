//! Question-answer instruction pairs generated from enriched captions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::enrichment::{CaptionSource, EnrichedCaption};
use crate::services::{LlmRequest, TextLlm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    DetailedDescription,
    Summarization,
    QuestionAnswer,
    CreativeGenerative,
    Conversational,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 5] = [
        TaskCategory::DetailedDescription,
        TaskCategory::Summarization,
        TaskCategory::QuestionAnswer,
        TaskCategory::CreativeGenerative,
        TaskCategory::Conversational,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::DetailedDescription => "detailed_description",
            TaskCategory::Summarization => "summarization",
            TaskCategory::QuestionAnswer => "question_answer",
            TaskCategory::CreativeGenerative => "creative_generative",
            TaskCategory::Conversational => "conversational",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            TaskCategory::DetailedDescription => include_str!("../assets/instruction/detailed_description.txt"),
            TaskCategory::Summarization => include_str!("../assets/instruction/summarization.txt"),
            TaskCategory::QuestionAnswer => include_str!("../assets/instruction/question_answer.txt"),
            TaskCategory::CreativeGenerative => include_str!("../assets/instruction/creative_generative.txt"),
            TaskCategory::Conversational => include_str!("../assets/instruction/conversational.txt"),
        }
    }

    /// Prompt asking for `count` pairs about `caption`.
    pub fn render_prompt(self, caption: &str, count: usize) -> String {
        self.template()
            .replace("{caption}", caption.trim())
            .replace("{count}", &count.to_string())
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown task category `{s}`"))
    }
}

pub const INSTRUCTION_PROMPTS_VERSION: &str = "instruction/v1";

/// One line of the instruction dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub video_id: String,
    pub question: String,
    pub answer: String,
    pub category: TaskCategory,
    pub source: CaptionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlmParams {
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl Default for LlmParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            seed: 0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub pairs_per_category: BTreeMap<TaskCategory, usize>,
    pub llm_params: LlmParams,
    #[serde(default)]
    pub lint: LintConfig,
}

impl Default for GenerationSpec {
    /// About ten pairs per caption.
    fn default() -> Self {
        Self {
            pairs_per_category: [
                (TaskCategory::DetailedDescription, 2),
                (TaskCategory::Summarization, 2),
                (TaskCategory::QuestionAnswer, 3),
                (TaskCategory::CreativeGenerative, 1),
                (TaskCategory::Conversational, 2),
            ]
            .into(),
            llm_params: LlmParams::default(),
            lint: LintConfig::default(),
        }
    }
}

impl GenerationSpec {
    pub fn uniform(count: usize) -> Self {
        Self {
            pairs_per_category: TaskCategory::ALL.into_iter().map(|c| (c, count)).collect(),
            ..Self::default()
        }
    }

    pub fn only(category: TaskCategory, count: usize) -> Self {
        Self {
            pairs_per_category: [(category, count)].into(),
            ..Self::default()
        }
    }

    pub fn requested_total(&self) -> usize {
        self.pairs_per_category.values().sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum InstructionError {
    #[error("no JSON array found in LLM output")]
    Parse { raw: String },
    #[error("generation spec requests no pairs")]
    EmptySpec,
    #[error("enriched caption for `{0}` is invalid: {1}")]
    InvalidCaption(String, String),
    #[error("no pairs produced for `{video_id}`")]
    NoPairs { video_id: String, report: GenerationReport },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedPairs {
    pub pairs: Vec<RawPair>,
    /// Array elements that were not `{"q": string, "a": string}`.
    pub malformed: usize,
}

/// Extracts `{"q", "a"}` objects from the first JSON array in `raw`,
/// ignoring any prose around it.
pub fn parse_llm_pairs(raw: &str) -> Result<ParsedPairs, InstructionError> {
    let array = raw
        .match_indices('[')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Array(items))) => Some(items),
                _ => None,
            }
        })
        .ok_or_else(|| InstructionError::Parse { raw: raw.to_string() })?;

    let mut parsed = ParsedPairs::default();
    for item in array {
        let pair = item.as_object().and_then(|o| {
            let q = o.get("q")?.as_str()?.trim();
            let a = o.get("a")?.as_str()?.trim();
            (!q.is_empty() && !a.is_empty()).then(|| RawPair {
                question: q.to_string(),
                answer: a.to_string(),
            })
        });
        match pair {
            Some(p) => parsed.pairs.push(p),
            None => parsed.malformed += 1,
        }
    }
    Ok(parsed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LintConfig {
    pub max_answer_chars: usize,
    /// Warn when a question neither ends with `?` nor opens with an imperative verb.
    pub question_form: bool,
}

impl Default for LintConfig {
    fn default() -> Self {
        Self {
            max_answer_chars: 4000,
            question_form: true,
        }
    }
}

const IMPERATIVE_VERBS: &[&str] = &[
    "describe", "summarize", "summarise", "write", "create", "compose", "imagine", "explain", "tell", "give",
    "list", "suggest", "provide", "generate", "draft", "invent", "propose", "narrate", "outline", "come",
    "pretend", "design", "share", "discuss",
];

pub fn validate_pair(pair: &InstructionPair, lint: &LintConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut error = |m: &str| v.push(Violation { severity: Severity::Error, message: m.to_string() });
    let question = pair.question.trim();
    let answer = pair.answer.trim();
    if pair.video_id.trim().is_empty() {
        error("empty video_id");
    }
    if question.is_empty() {
        error("empty question");
    }
    if answer.is_empty() {
        error("empty answer");
    }
    if !question.is_empty() && question == answer {
        error("question equals answer");
    }
    let answer_chars = answer.chars().count();
    if answer_chars > lint.max_answer_chars {
        error(&format!("answer has {answer_chars} characters, limit is {}", lint.max_answer_chars));
    }
    if lint.question_form && !question.is_empty() && !question.ends_with('?') {
        let first = question
            .split_whitespace()
            .next()
            .unwrap_or("")
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        if !IMPERATIVE_VERBS.contains(&first.as_str()) {
            v.push(Violation {
                severity: Severity::Warning,
                message: "question neither ends with `?` nor starts with an imperative verb".into(),
            });
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: TaskCategory,
    pub requested: usize,
    pub produced: usize,
    pub malformed: usize,
    pub invalid: usize,
    /// Parsed pairs beyond the requested count, discarded.
    pub surplus: usize,
    pub error: Option<String>,
}

impl CategoryReport {
    pub fn shortfall(&self) -> usize {
        self.requested.saturating_sub(self.produced)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub video_id: String,
    pub pairs: Vec<InstructionPair>,
    pub categories: Vec<CategoryReport>,
}

impl GenerationReport {
    pub fn shortfall(&self) -> usize {
        self.categories.iter().map(CategoryReport::shortfall).sum()
    }
}

/// One LLM call per requested category; never emits more pairs per
/// category than requested, and never invents pairs the LLM did not return.
pub fn generate_instruction_pairs(
    llm: &dyn TextLlm,
    enriched: &EnrichedCaption,
    spec: &GenerationSpec,
) -> Result<GenerationReport, InstructionError> {
    if spec.requested_total() == 0 {
        return Err(InstructionError::EmptySpec);
    }
    enriched
        .validate()
        .map_err(|e| InstructionError::InvalidCaption(enriched.video_id.clone(), e.to_string()))?;

    let mut report = GenerationReport {
        video_id: enriched.video_id.clone(),
        pairs: Vec::new(),
        categories: Vec::new(),
    };
    for (&category, &requested) in spec.pairs_per_category.iter().filter(|(_, &n)| n > 0) {
        let mut cat = CategoryReport {
            category,
            requested,
            produced: 0,
            malformed: 0,
            invalid: 0,
            surplus: 0,
            error: None,
        };
        let req = LlmRequest {
            prompt: category.render_prompt(&enriched.enriched_text, requested),
            max_tokens: spec.llm_params.max_tokens,
            temperature: spec.llm_params.temperature,
            seed: spec.llm_params.seed,
        };
        let parsed = llm
            .complete_text(&req)
            .map_err(|e| e.to_string())
            .and_then(|resp| parse_llm_pairs(&resp.text).map_err(|_| "reply contained no JSON array".to_string()));
        match parsed {
            Err(e) => {
                tracing::warn!(video_id = %enriched.video_id, %category, error = %e, "category skipped");
                cat.error = Some(e);
            }
            Ok(parsed) => {
                cat.malformed = parsed.malformed;
                for raw in parsed.pairs {
                    let pair = InstructionPair {
                        video_id: enriched.video_id.clone(),
                        question: raw.question,
                        answer: raw.answer,
                        category,
                        source: enriched.source,
                    };
                    let violations = validate_pair(&pair, &spec.lint);
                    if violations.iter().any(|v| v.severity == Severity::Error) {
                        cat.invalid += 1;
                        continue;
                    }
                    if cat.produced == requested {
                        cat.surplus += 1;
                        continue;
                    }
                    cat.produced += 1;
                    report.pairs.push(pair);
                }
            }
        }
        report.categories.push(cat);
    }

    if report.pairs.is_empty() {
        return Err(InstructionError::NoPairs {
            video_id: enriched.video_id.clone(),
            report,
        });
    }
    Ok(report)
}

pub fn pairs_to_jsonl(pairs: &[InstructionPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enrichment::Provenance;
    use crate::services::ScriptedLlm;

    fn caption() -> EnrichedCaption {
        EnrichedCaption {
            video_id: "v7".into(),
            base_caption: "A man cooks.".into(),
            enriched_text: "A man in a red apron cooks pasta in a small kitchen.".into(),
            source: CaptionSource::SemiAutomatic,
            task_id: None,
            annotator_id: None,
            provenance: Provenance::default(),
        }
    }

    fn pair(q: &str, a: &str, category: TaskCategory) -> InstructionPair {
        InstructionPair { video_id: "v".into(), question: q.into(), answer: a.into(), category, source: CaptionSource::Human }
    }

    #[test]
    fn parse_plain_array() {
        let p = parse_llm_pairs(r#"[{"q":"What is shown?","a":"A man cooking."}]"#).unwrap();
        assert_eq!(p.pairs, vec![RawPair { question: "What is shown?".into(), answer: "A man cooking.".into() }]);
        assert_eq!(p.malformed, 0);
    }

    #[test]
    fn parse_tolerates_prose_and_brackets() {
        let raw = "Sure [draft]! Here you go:\n[{\"q\":\"Who?\",\"a\":\"A chef.\"}, {\"q\": 3}, \"x\"]\nHope it helps.";
        let p = parse_llm_pairs(raw).unwrap();
        assert_eq!(p.pairs.len(), 1);
        assert_eq!(p.malformed, 2);
    }

    #[test]
    fn parse_failure_carries_raw() {
        assert_eq!(parse_llm_pairs("not json"), Err(InstructionError::Parse { raw: "not json".into() }));
    }

    #[test]
    fn validation_rules() {
        let lint = LintConfig::default();
        assert!(validate_pair(&pair("What is cooking?", "Pasta.", TaskCategory::QuestionAnswer), &lint).is_empty());
        let v = validate_pair(&pair("What is cooking?", " ", TaskCategory::QuestionAnswer), &lint);
        assert!(v.iter().any(|v| v.message == "empty answer" && v.severity == Severity::Error));
        assert!(validate_pair(&pair("Write a poem about it", "Steam.", TaskCategory::CreativeGenerative), &lint).is_empty());
        let v = validate_pair(&pair("The kitchen", "Small.", TaskCategory::QuestionAnswer), &lint);
        assert_eq!(v[0].severity, Severity::Warning);
        let v = validate_pair(&pair("Same?", "Same?", TaskCategory::QuestionAnswer), &lint);
        assert!(v.iter().any(|v| v.message == "question equals answer"));
    }

    #[test]
    fn unknown_category_rejected_at_deserialization() {
        let raw = r#"{"video_id":"v","question":"q?","answer":"a","category":"trivia","source":"human"}"#;
        assert!(serde_json::from_str::<InstructionPair>(raw).is_err());
    }

    #[test]
    fn three_question_answer_pairs() {
        let llm = ScriptedLlm::default();
        llm.push_text(r#"[{"q":"Who cooks?","a":"A man."},{"q":"What?","a":"Pasta."},{"q":"Where?","a":"A kitchen."}]"#);
        let report = generate_instruction_pairs(&llm, &caption(), &GenerationSpec::only(TaskCategory::QuestionAnswer, 3)).unwrap();
        assert_eq!(report.pairs.len(), 3);
        assert!(report.pairs.iter().all(|p| p.category == TaskCategory::QuestionAnswer && p.video_id == "v7"));
        assert!(llm.calls()[0].starts_with("TASK: question_answer"));
        assert!(llm.calls()[0].contains("red apron"));
    }

    #[test]
    fn only_requested_categories_are_called() {
        let llm = ScriptedLlm::default();
        llm.push_text(r#"[{"q":"Summarize the video.","a":"A man cooks pasta."}]"#);
        let mut spec = GenerationSpec::uniform(0);
        spec.pairs_per_category.insert(TaskCategory::Summarization, 1);
        let report = generate_instruction_pairs(&llm, &caption(), &spec).unwrap();
        assert_eq!(report.pairs.len(), 1);
        assert_eq!(llm.call_count(), 1);
    }

    #[test]
    fn malformed_element_is_a_shortfall() {
        let llm = ScriptedLlm::default();
        llm.push_text(r#"[{"q":"Who?","a":"A man."},{"q":"What?"},{"q":"Where?","a":"Kitchen."}]"#);
        let report = generate_instruction_pairs(&llm, &caption(), &GenerationSpec::only(TaskCategory::QuestionAnswer, 3)).unwrap();
        assert_eq!(report.pairs.len(), 2);
        assert_eq!(report.shortfall(), 1);
        assert_eq!(report.categories[0].malformed, 1);
    }

    #[test]
    fn surplus_is_discarded() {
        let llm = ScriptedLlm::default();
        llm.push_text(r#"[{"q":"A?","a":"1"},{"q":"B?","a":"2"}]"#);
        let report = generate_instruction_pairs(&llm, &caption(), &GenerationSpec::only(TaskCategory::QuestionAnswer, 1)).unwrap();
        assert_eq!(report.pairs.len(), 1);
        assert_eq!(report.categories[0].surplus, 1);
    }

    #[test]
    fn failures_skip_categories() {
        let llm = ScriptedLlm::default();
        llm.push_text("no array here");
        llm.push_text(r#"[{"q":"Summarize.","a":"Cooking."}]"#);
        let mut spec = GenerationSpec::uniform(0);
        spec.pairs_per_category.insert(TaskCategory::DetailedDescription, 1);
        spec.pairs_per_category.insert(TaskCategory::Summarization, 1);
        let report = generate_instruction_pairs(&llm, &caption(), &spec).unwrap();
        assert!(report.categories[0].error.is_some());
        assert_eq!(report.pairs.len(), 1);

        let silent = ScriptedLlm::default();
        let err = generate_instruction_pairs(&silent, &caption(), &spec).unwrap_err();
        assert!(matches!(err, InstructionError::NoPairs { .. }));
        assert_eq!(generate_instruction_pairs(&silent, &caption(), &GenerationSpec::uniform(0)), Err(InstructionError::EmptySpec));
    }
}
