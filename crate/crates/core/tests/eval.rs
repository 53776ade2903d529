use vidinstruct_core::eval::{
    aspect_prompt, evaluate_generative, evaluate_zeroshot, render_report, render_reports, Aspect, EvalError,
    EvalSettings, GenerativeSample, QaRecord, ReportFormat,
};
use vidinstruct_core::services::{LlmResponse, ScriptedLlm, ServiceError};

fn question_index(prompt: &str) -> usize {
    let line = prompt
        .lines()
        .find(|l| l.starts_with("Question: ") || l.starts_with("Question 1: "))
        .expect("prompt has a question");
    line.rsplit('Q').next().unwrap().trim().parse().unwrap()
}

fn aspect_of(prompt: &str) -> Aspect {
    let name = prompt.lines().find_map(|l| l.strip_prefix("Evaluation aspect: ")).unwrap();
    Aspect::ALL.into_iter().find(|a| a.display_name() == name).unwrap()
}

/// Score for item `i` of `n` so that the scores sum to `total`.
fn spread(total: u64, n: usize, i: usize) -> u64 {
    let (q, r) = (total / n as u64, (total % n as u64) as usize);
    q + (i < r) as u64
}

fn benchmark(count: usize) -> Vec<GenerativeSample> {
    (0..count)
        .map(|i| GenerativeSample {
            video_id: format!("v{:03}", i / 2),
            pair_id: format!("p{i:03}"),
            question: format!("Q{i}"),
            reference_answer: format!("reference {i}"),
            prediction: format!("prediction {i}"),
            consistency_group: Some(format!("g{:03}", i / 2)),
        })
        .collect()
}

/// A judge whose score for each item is fixed so that the aspect sums hit
/// `sums` (four per-sample aspects over 100 items, consistency over 50 pairs).
fn table_judge(sums: [u64; 5]) -> ScriptedLlm {
    ScriptedLlm::new("judge").with_responder(move |prompt| {
        let aspect = aspect_of(prompt);
        let i = question_index(prompt);
        let score = match aspect {
            Aspect::Consistency => spread(sums[4], 50, i / 2),
            a => spread(sums[Aspect::PER_SAMPLE.iter().position(|x| *x == a).unwrap()], 100, i),
        };
        Some(Ok(LlmResponse::complete(format!("{{\"score\": {score}, \"reason\": \"fixture\"}}"))))
    })
}

fn means(report: &vidinstruct_core::eval::BenchmarkReport) -> Vec<String> {
    Aspect::ALL.iter().map(|a| report.aspect(*a).unwrap().mean_text()).collect()
}

#[test]
fn generative_columns_reproduce() {
    let samples = benchmark(100);
    for (sums, want) in [
        ([250, 257, 269, 216, 110], ["2.50", "2.57", "2.69", "2.16", "2.20"]),
        ([225, 250, 254, 198, 92], ["2.25", "2.50", "2.54", "1.98", "1.84"]),
    ] {
        let judge = table_judge(sums);
        let report = evaluate_generative(&judge, &samples, &EvalSettings::default()).unwrap();
        assert_eq!(means(&report), want);
        assert_eq!(judge.call_count(), 450);
        assert_eq!(report.aspect(Aspect::Consistency).unwrap().total, 50);
        assert!(report.is_consistent());
    }
}

#[test]
fn generative_report_independent_of_parallelism() {
    let samples = benchmark(40);
    let mut reversed = samples.clone();
    reversed.reverse();
    let serial = evaluate_generative(&table_judge([250, 257, 269, 216, 110]), &samples, &EvalSettings { max_in_flight: 1, ..Default::default() }).unwrap();
    let wide = evaluate_generative(&table_judge([250, 257, 269, 216, 110]), &reversed, &EvalSettings { max_in_flight: 16, ..Default::default() }).unwrap();
    assert_eq!(render_report(&serial, ReportFormat::Json), render_report(&wide, ReportFormat::Json));
}

#[test]
fn reask_and_exclusion_accounting() {
    let samples = benchmark(10);
    let judge = ScriptedLlm::new("judge").with_responder(|prompt| {
        let i = question_index(prompt);
        let reasked = prompt.contains("previous reply was rejected");
        let reply = match (i, reasked) {
            (3, false) => Ok(LlmResponse::complete("{\"score\": 7}")),
            (3, true) => Ok(LlmResponse::complete("{\"score\": 3}")),
            (5, _) => Ok(LlmResponse::complete("The answer is pretty good, I would give it a four.")),
            (6, false) => Err(ServiceError::Network("connection reset".into())),
            _ => Ok(LlmResponse::complete("{\"score\": 4}")),
        };
        Some(reply)
    });
    let report = evaluate_generative(&judge, &samples, &EvalSettings::default()).unwrap();
    let correctness = report.aspect(Aspect::Correctness).unwrap();
    assert_eq!((correctness.total, correctness.judged, correctness.excluded), (10, 9, 1));
    // 8 fours + the re-asked 3; item 6 recovers on the re-ask with 4.
    assert_eq!(correctness.score_sum, 8 * 4 + 3);
    assert_eq!(correctness.retries, 3);
    assert_eq!(correctness.mean_text(), "3.89");
    // Pair (4,5) is keyed by sample 4's question; pair (2,3) by 2. All pairs judged.
    let consistency = report.aspect(Aspect::Consistency).unwrap();
    assert_eq!((consistency.total, consistency.judged, consistency.excluded), (5, 5, 0));
    for s in &report.per_aspect {
        assert_eq!(s.judged + s.excluded, s.total);
    }

    let first = &judge.calls()[..];
    let rejected = aspect_prompt(&samples[3], Aspect::Correctness);
    assert!(first.iter().filter(|p| p.starts_with(&rejected)).count() == 2);
}

#[test]
fn consistency_skips_singletons_and_ungrouped() {
    let mut samples = benchmark(5);
    samples[4].consistency_group = None;
    samples[2].consistency_group = Some("solo".into());
    let report = evaluate_generative(&table_judge([300, 300, 300, 300, 100]), &samples, &EvalSettings::default()).unwrap();
    assert_eq!(report.aspect(Aspect::Consistency).unwrap().total, 1);
    assert_eq!(report.aspect(Aspect::Consistency).unwrap().mean_text(), "2.00");

    let mut dup = benchmark(2);
    dup[1].pair_id = dup[0].pair_id.clone();
    dup[1].video_id = dup[0].video_id.clone();
    assert!(matches!(evaluate_generative(&table_judge([0; 5]), &dup, &EvalSettings::default()), Err(EvalError::Validation(_))));
    assert_eq!(evaluate_generative(&table_judge([0; 5]), &[], &EvalSettings::default()), Err(EvalError::Empty));
}

fn qa_records(n: usize) -> Vec<QaRecord> {
    (0..n)
        .map(|i| QaRecord { id: None, question: format!("Q{i}"), ground_truth: "a".into(), prediction: "b".into() })
        .collect()
}

#[test]
fn zeroshot_row_reproduces() {
    let judge = ScriptedLlm::new("judge").with_responder(|prompt| {
        let i = question_index(prompt);
        let verdict = if i < 649 { "yes" } else { "no" };
        let score = spread(3300, 1000, i);
        Some(Ok(LlmResponse::complete(format!("{{\"match\": \"{verdict}\", \"score\": {score}}}"))))
    });
    let settings = EvalSettings { model_tag: "Video-ChatGPT".into(), dataset: Some("MSVD-QA".into()), ..Default::default() };
    let report = evaluate_zeroshot(&judge, &qa_records(1000), &settings).unwrap();
    let z = report.zeroshot.as_ref().unwrap();
    assert_eq!(z.accuracy_text(), "64.9");
    assert_eq!(z.score_text(), "3.3");
    assert_eq!(z.accuracy_pct, 64.9);
    assert_eq!(z.mean_score, 3.3);
    let table = render_reports(&[report]);
    let cells: Vec<&str> = table.lines().nth(2).unwrap().split('|').map(str::trim).collect();
    assert_eq!(cells, ["Video-ChatGPT", "64.9", "3.3"]);
}

#[test]
fn zeroshot_fault_injection() {
    let judge = ScriptedLlm::new("judge").with_responder(|prompt| {
        let i = question_index(prompt);
        let reasked = prompt.contains("previous reply was rejected");
        Some(match i % 4 {
            0 => Ok(LlmResponse::complete("{\"match\": \"yes\", \"score\": 5}")),
            1 if !reasked => Ok(LlmResponse::complete("{\"match\": \"yes\", \"score\": 4.5}")),
            1 => Ok(LlmResponse::complete("{\"match\": \"no\", \"score\": 2}")),
            2 => Err(ServiceError::RateLimited("slow down".into())),
            _ => Ok(LlmResponse::complete("no idea")),
        })
    });
    let report = evaluate_zeroshot(&judge, &qa_records(20), &EvalSettings::default()).unwrap();
    let z = report.zeroshot.unwrap();
    assert_eq!((z.total, z.judged, z.excluded, z.retries), (20, 10, 10, 15));
    assert_eq!(z.judged + z.excluded, z.total);
    assert_eq!(z.accuracy_text(), "50.0");
    assert_eq!(z.score_text(), "3.5");

    let dead = ScriptedLlm::new("judge").with_responder(|_| Some(Ok(LlmResponse::complete("prose"))));
    assert_eq!(
        evaluate_zeroshot(&dead, &qa_records(3), &EvalSettings::default()),
        Err(EvalError::NothingJudged { excluded: 3 })
    );
}
