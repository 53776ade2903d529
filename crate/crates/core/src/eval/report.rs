use serde::{Deserialize, Serialize};

use super::Aspect;

pub const REPORT_SCHEMA: &str = "vidinstruct.report/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Generative,
    ZeroshotQa,
}

/// `numerator / denominator` rounded half-up to `decimals` places, computed
/// exactly in integers. Returns the rounded value scaled by `10^decimals`.
pub fn round_half_up(numerator: u64, denominator: u64, decimals: u32) -> u64 {
    assert!(denominator > 0, "denominator must be positive");
    let scale = 10u128.pow(decimals);
    let num = numerator as u128 * scale * 2 + denominator as u128;
    (num / (2 * denominator as u128)) as u64
}

fn scaled_to_string(scaled: u64, decimals: u32) -> String {
    let scale = 10u64.pow(decimals);
    format!("{}.{:0width$}", scaled / scale, scaled % scale, width = decimals as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSummary {
    pub aspect: Aspect,
    /// Two-decimal mean over judged items; absent when nothing was judged.
    pub mean: Option<f64>,
    pub judged: usize,
    pub excluded: usize,
    pub total: usize,
    pub retries: usize,
    pub score_sum: u64,
}

impl AspectSummary {
    pub(crate) fn empty(aspect: Aspect) -> Self {
        Self {
            aspect,
            mean: None,
            judged: 0,
            excluded: 0,
            total: 0,
            retries: 0,
            score_sum: 0,
        }
    }

    pub(crate) fn finish(mut self) -> Self {
        self.mean = (self.judged > 0).then(|| round_half_up(self.score_sum, self.judged as u64, 2) as f64 / 100.0);
        self
    }

    pub fn mean_text(&self) -> String {
        match self.judged {
            0 => "-".into(),
            n => scaled_to_string(round_half_up(self.score_sum, n as u64, 2), 2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSummary {
    /// matches / judged, unrounded.
    pub accuracy: f64,
    /// Percentage, one decimal.
    pub accuracy_pct: f64,
    /// Mean judge score, one decimal.
    pub mean_score: f64,
    pub matches: usize,
    pub judged: usize,
    pub excluded: usize,
    pub total: usize,
    pub retries: usize,
    pub score_sum: u64,
}

impl ZeroShotSummary {
    pub(crate) fn finish(mut self) -> Self {
        if self.judged > 0 {
            let n = self.judged as u64;
            self.accuracy = self.matches as f64 / self.judged as f64;
            self.accuracy_pct = round_half_up(self.matches as u64 * 100, n, 1) as f64 / 10.0;
            self.mean_score = round_half_up(self.score_sum, n, 1) as f64 / 10.0;
        }
        self
    }

    pub fn accuracy_text(&self) -> String {
        match self.judged {
            0 => "-".into(),
            n => scaled_to_string(round_half_up(self.matches as u64 * 100, n as u64, 1), 1),
        }
    }

    pub fn score_text(&self) -> String {
        match self.judged {
            0 => "-".into(),
            n => scaled_to_string(round_half_up(self.score_sum, n as u64, 1), 1),
        }
    }
}

/// Aggregated benchmark outcome for one model (and optionally one dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema: String,
    pub kind: ReportKind,
    pub model_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_aspect: Vec<AspectSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeroshot: Option<ZeroShotSummary>,
}

impl BenchmarkReport {
    pub fn generative(model_tag: &str, dataset: Option<String>, sample_count: usize, per_aspect: Vec<AspectSummary>) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            kind: ReportKind::Generative,
            model_tag: model_tag.into(),
            dataset,
            sample_count,
            per_aspect,
            zeroshot: None,
        }
    }

    pub fn zeroshot(model_tag: &str, dataset: Option<String>, sample_count: usize, summary: ZeroShotSummary) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            kind: ReportKind::ZeroshotQa,
            model_tag: model_tag.into(),
            dataset,
            sample_count,
            per_aspect: Vec::new(),
            zeroshot: Some(summary),
        }
    }

    pub fn aspect(&self, aspect: Aspect) -> Option<&AspectSummary> {
        self.per_aspect.iter().find(|s| s.aspect == aspect)
    }

    /// Means in [1,5], accuracy in [0,1], and judged + excluded = total everywhere.
    pub fn is_consistent(&self) -> bool {
        let aspects_ok = self.per_aspect.iter().all(|s| {
            s.judged + s.excluded == s.total && s.mean.is_none_or(|m| (1.0..=5.0).contains(&m))
        });
        let zs_ok = self.zeroshot.as_ref().is_none_or(|z| {
            z.judged + z.excluded == z.total
                && (0.0..=1.0).contains(&z.accuracy)
                && (z.judged == 0 || (1.0..=5.0).contains(&z.mean_score))
        });
        aspects_ok && zs_ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TableText,
    Json,
}

pub fn render_report(report: &BenchmarkReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::TableText => render_reports(std::slice::from_ref(report)),
    }
}

fn table(rows: &[Vec<String>], right_align_from: usize) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = (0..cols)
            .map(|c| {
                let cell = row.get(c).map(String::as_str).unwrap_or("");
                if c >= right_align_from {
                    format!("{cell:>w$}", w = widths[c])
                } else {
                    format!("{cell:<w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

/// Text tables: generative reports become one column per model with the
/// aspects as rows; zero-shot reports become one row per model with an
/// accuracy/score column pair per dataset.
pub fn render_reports(reports: &[BenchmarkReport]) -> String {
    let generative: Vec<&BenchmarkReport> = reports.iter().filter(|r| r.kind == ReportKind::Generative).collect();
    let zeroshot: Vec<&BenchmarkReport> = reports.iter().filter(|r| r.kind == ReportKind::ZeroshotQa).collect();
    let mut out = String::new();

    if !generative.is_empty() {
        let mut rows = vec![std::iter::once("Evaluation Aspect".to_string())
            .chain(generative.iter().map(|r| r.model_tag.clone()))
            .collect::<Vec<_>>()];
        for aspect in Aspect::ALL {
            let mut row = vec![aspect.display_name().to_string()];
            for r in &generative {
                row.push(r.aspect(aspect).map(AspectSummary::mean_text).unwrap_or_else(|| "-".into()));
            }
            rows.push(row);
        }
        out.push_str(&table(&rows, 1));
    }

    if !zeroshot.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        let mut datasets: Vec<String> = Vec::new();
        let mut models: Vec<String> = Vec::new();
        for r in &zeroshot {
            let d = r.dataset.clone().unwrap_or_else(|| "QA".into());
            if !datasets.contains(&d) {
                datasets.push(d);
            }
            if !models.contains(&r.model_tag) {
                models.push(r.model_tag.clone());
            }
        }
        let mut header = vec!["Model".to_string()];
        for d in &datasets {
            header.push(format!("{d} Accuracy"));
            header.push(format!("{d} Score"));
        }
        let mut rows = vec![header];
        for m in &models {
            let mut row = vec![m.clone()];
            for d in &datasets {
                let found = zeroshot
                    .iter()
                    .find(|r| &r.model_tag == m && r.dataset.clone().unwrap_or_else(|| "QA".into()) == *d)
                    .and_then(|r| r.zeroshot.as_ref());
                match found {
                    Some(z) => {
                        row.push(z.accuracy_text());
                        row.push(z.score_text());
                    }
                    None => {
                        row.push("--".into());
                        row.push("--".into());
                    }
                }
            }
            rows.push(row);
        }
        out.push_str(&table(&rows, 1));
    }
    out
}
