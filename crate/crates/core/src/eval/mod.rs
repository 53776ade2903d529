//! LLM-judged evaluation: the five-aspect generative benchmark and zero-shot
//! open-ended question answering.

mod dataset;
mod judge;
mod report;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::services::TextLlm;

pub use dataset::{read_generative_samples, read_qa_records, QaRecord};
pub use judge::{
    aspect_prompt, consistency_prompt, judge_qa, parse_aspect_reply, parse_qa_reply, qa_prompt, score_aspect,
    score_consistency, AspectScore, JudgeSettings, Judged, QAJudgment,
};
pub use report::{
    render_report, render_reports, round_half_up, AspectSummary, BenchmarkReport, ReportFormat, ReportKind,
    ZeroShotSummary, REPORT_SCHEMA,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("no record could be judged ({excluded} excluded)")]
    NothingJudged { excluded: usize },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("cannot read records: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Correctness,
    DetailOrientation,
    ContextualUnderstanding,
    TemporalUnderstanding,
    Consistency,
}

impl Aspect {
    /// Table order.
    pub const ALL: [Aspect; 5] = [
        Aspect::Correctness,
        Aspect::DetailOrientation,
        Aspect::ContextualUnderstanding,
        Aspect::TemporalUnderstanding,
        Aspect::Consistency,
    ];

    pub const PER_SAMPLE: [Aspect; 4] = [
        Aspect::Correctness,
        Aspect::DetailOrientation,
        Aspect::ContextualUnderstanding,
        Aspect::TemporalUnderstanding,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Aspect::Correctness => "Correctness of Information",
            Aspect::DetailOrientation => "Detail Orientation",
            Aspect::ContextualUnderstanding => "Contextual Understanding",
            Aspect::TemporalUnderstanding => "Temporal Understanding",
            Aspect::Consistency => "Consistency",
        }
    }

    pub fn rubric(self) -> &'static str {
        match self {
            Aspect::Correctness => {
                "Judge factual accuracy. The prediction must agree with the video content as given by the reference answer; penalize statements that are wrong, misread the video, or could mislead."
            }
            Aspect::DetailOrientation => {
                "Judge depth. Reward completeness (every major point of the reference is covered) and specificity (concrete details instead of generic remarks)."
            }
            Aspect::ContextualUnderstanding => {
                "Judge fit with the overall situation of the video. The prediction should read as an answer given by someone who understood the whole scene, not only isolated objects."
            }
            Aspect::TemporalUnderstanding => {
                "Judge the handling of time. Events must be placed in the right order and the prediction must not confuse what happens before and after."
            }
            Aspect::Consistency => {
                "Judge agreement between answers. Two questions that ask about the same content in different words, or about different parts of the same video, must receive compatible answers."
            }
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// One benchmark question with a model's prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerativeSample {
    pub video_id: String,
    pub pair_id: String,
    pub question: String,
    pub reference_answer: String,
    /// Empty predictions are scored, not skipped.
    #[serde(default)]
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub model_tag: String,
    pub dataset: Option<String>,
    pub judge: JudgeSettings,
    /// Upper bound on concurrent judge calls.
    pub max_in_flight: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            model_tag: "model".into(),
            dataset: None,
            judge: JudgeSettings::default(),
            max_in_flight: 4,
        }
    }
}

fn run_bounded<J, T, F>(jobs: &[J], max_in_flight: usize, f: F) -> Vec<T>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| jobs.par_iter().map(&f).collect())
}

enum GenJob<'a> {
    Single(&'a GenerativeSample, Aspect),
    Pair(&'a GenerativeSample, &'a GenerativeSample),
}

/// Scores four aspects per sample and consistency per consecutive pair inside
/// each consistency group, then averages each aspect over its scored items.
pub fn evaluate_generative(
    judge: &dyn TextLlm,
    samples: &[GenerativeSample],
    settings: &EvalSettings,
) -> Result<BenchmarkReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted: Vec<&GenerativeSample> = samples.iter().collect();
    sorted.sort_by(|a, b| (&a.pair_id, &a.video_id).cmp(&(&b.pair_id, &b.video_id)));
    for w in sorted.windows(2) {
        if w[0].pair_id == w[1].pair_id && w[0].video_id == w[1].video_id {
            return Err(EvalError::Validation(format!("duplicate sample `{}`", w[0].pair_id)));
        }
    }

    let mut groups: BTreeMap<&str, Vec<&GenerativeSample>> = BTreeMap::new();
    for s in &sorted {
        if let Some(g) = &s.consistency_group {
            groups.entry(g.as_str()).or_default().push(s);
        }
    }

    let mut jobs = Vec::new();
    for s in &sorted {
        for aspect in Aspect::PER_SAMPLE {
            jobs.push(GenJob::Single(s, aspect));
        }
    }
    for members in groups.values() {
        for w in members.windows(2) {
            jobs.push(GenJob::Pair(w[0], w[1]));
        }
    }

    let results = run_bounded(&jobs, settings.max_in_flight, |job| match job {
        GenJob::Single(s, aspect) => score_aspect(judge, s, *aspect, &settings.judge).map(|j| (*aspect, j)),
        GenJob::Pair(a, b) => score_consistency(judge, a, b, &settings.judge).map(|j| (Aspect::Consistency, j)),
    });

    let mut summaries: BTreeMap<Aspect, AspectSummary> =
        Aspect::ALL.into_iter().map(|a| (a, AspectSummary::empty(a))).collect();
    for result in results {
        let (aspect, judged) = result?;
        let s = summaries.get_mut(&aspect).expect("every aspect present");
        s.total += 1;
        if judged.retried() {
            s.retries += 1;
        }
        match judged.outcome {
            Ok(score) => {
                s.judged += 1;
                s.score_sum += score.score as u64;
            }
            Err(_) => s.excluded += 1,
        }
    }

    Ok(BenchmarkReport::generative(
        &settings.model_tag,
        settings.dataset.clone(),
        samples.len(),
        summaries.into_values().map(AspectSummary::finish).collect(),
    ))
}

/// Judges every record for match and quality; accuracy and mean score are
/// computed over judged records only.
pub fn evaluate_zeroshot(
    judge: &dyn TextLlm,
    records: &[QaRecord],
    settings: &EvalSettings,
) -> Result<BenchmarkReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let results = run_bounded(records, settings.max_in_flight, |r| {
        judge_qa(judge, &r.question, &r.ground_truth, &r.prediction, &settings.judge)
    });
    let mut z = ZeroShotSummary::default();
    for judged in results {
        z.total += 1;
        if judged.retried() {
            z.retries += 1;
        }
        match judged.outcome {
            Ok(j) => {
                z.judged += 1;
                z.matches += j.matched as usize;
                z.score_sum += j.score as u64;
            }
            Err(_) => z.excluded += 1,
        }
    }
    if z.judged == 0 {
        return Err(EvalError::NothingJudged { excluded: z.excluded });
    }
    Ok(BenchmarkReport::zeroshot(
        &settings.model_tag,
        settings.dataset.clone(),
        records.len(),
        z.finish(),
    ))
}
