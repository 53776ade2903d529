use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use proptest::prelude::*;
use serde_json::Value;
use vidinstruct_cli::config::{resolve, Overrides, PipelineConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vidinstruct"));
    c.env("RUST_LOG", "off");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn flags_beat_env_beat_file_beat_defaults() {
    let file = r#"
seed = 1
[endpoints]
llm = "http://file:1"
tagger = "http://file:2"
[thresholds]
tag = 0.5
caption = 0.6
"#;
    let env = Overrides::from_env([
        ("VIDINSTRUCT_SEED", "2"),
        ("VIDINSTRUCT_MODELS_URL", "http://env:9"),
        ("VIDINSTRUCT_CAPTION_THRESHOLD", "0.8"),
        ("PATH", "/usr/bin"),
    ])
    .unwrap();
    let flags = Overrides { seed: Some(3), llm_url: Some("http://flag:7".into()), ..Overrides::default() };
    let cfg = resolve(Some(file), &env, &flags).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.endpoints.llm, "http://flag:7");
    // The blanket URL from the environment replaces the file's tagger.
    assert_eq!(cfg.endpoints.tagger, "http://env:9");
    assert_eq!(cfg.thresholds.caption, 0.8);
    assert_eq!(cfg.thresholds.tag, 0.5);
    assert_eq!(cfg.thresholds.region, 0.7);
    assert_eq!(cfg.keyframes.k, 8);

    let only_file = resolve(Some(file), &Overrides::default(), &Overrides::default()).unwrap();
    assert_eq!((only_file.seed, only_file.endpoints.llm.as_str()), (1, "http://file:1"));
}

#[test]
fn invalid_layers_are_rejected() {
    let none = Overrides::default();
    assert!(resolve(Some("[thresholds]\ntag = 1.5\n"), &none, &none).is_err());
    assert!(resolve(Some("seed = \"x\"\n"), &none, &none).is_err());
    let k0 = Overrides { keyframes: Some(0), ..Overrides::default() };
    assert!(resolve(None, &none, &k0).is_err());
    let bad_url = Overrides { models_url: Some("ftp://x".into()), ..Overrides::default() };
    assert!(resolve(None, &bad_url, &none).is_err());
}

proptest! {
    #[test]
    fn seed_precedence(file in proptest::option::of(0u64..100), env in proptest::option::of(0u64..100), flag in proptest::option::of(0u64..100)) {
        let text = file.map(|s| format!("seed = {s}\n"));
        let env_layer = Overrides { seed: env, ..Overrides::default() };
        let flag_layer = Overrides { seed: flag, ..Overrides::default() };
        let cfg = resolve(text.as_deref(), &env_layer, &flag_layer).unwrap();
        prop_assert_eq!(cfg.seed, flag.or(env).or(file).unwrap_or(PipelineConfig::default().seed));
    }
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = bin().arg("transcode").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_environment_exits_2() {
    let out = bin().args(["adapter-demo", "--T", "2"]).env("VIDINSTRUCT_TAG_THRESHOLD", "1.5").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["adapter-demo", "--T", "2"]).env("VIDINSTRUCT_NOPE", "1").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let out = bin().args(["enrich", "--videos", "/nonexistent/videos.jsonl"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn adapter_demo_reference_and_layered_dims() {
    let out = bin().args(["adapter-demo", "--T", "8", "--D", "1024", "--K", "4096"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(stdout(&out), "v: 264x1024, Q_v: 264x4096, grad-check: PASS\n");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[adapter]\nframes = 3\nembed_dim = 16\noutput_dim = 8\npatch_size = 7\ninput_side = 14\n").unwrap();
    let out = bin().args(["--config", cfg.to_str().unwrap(), "adapter-demo", "--K", "5"]).output().unwrap();
    assert_eq!(stdout(&out), "v: 7x16, Q_v: 7x5, grad-check: PASS\n");
}

#[test]
fn json_logs_are_json_lines() {
    let out = bin()
        .args(["--json-logs", "adapter-demo", "--T", "2", "--D", "4", "--K", "4"])
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert!(!lines.is_empty());
    for l in lines {
        let v: Value = serde_json::from_str(l).unwrap_or_else(|e| panic!("{e}: {l}"));
        assert!(v["level"].is_string());
    }

    let out = bin().args(["--json-logs", "enrich", "--videos", "/nonexistent"]).env("RUST_LOG", "error").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["fields"]["kind"], "runtime");
}

#[test]
fn ingest_then_keyframes() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    let out = bin()
        .args(["ingest", fixtures().join("frames/v_cooking").to_str().unwrap(), "--out", frames.to_str().unwrap(), "--stride", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_slice(&std::fs::read(frames.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 6);

    let keys = dir.path().join("keys");
    let out = bin().args(["keyframes", frames.to_str().unwrap(), "--out", keys.to_str().unwrap(), "-k", "4"]).output().unwrap();
    assert!(out.status.success());
    let selected: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(selected["indices"], serde_json::json!([0, 3]));
    assert!(keys.join("frame_000003.png").exists());
}

struct Mock(std::process::Child, String);

impl Drop for Mock {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn mock_models(dir: &Path) -> Mock {
    let mut child = bin()
        .args(["mock-models", "--fixtures", dir.to_str().unwrap(), "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();
    Mock(child, url)
}

#[test]
fn eval_commands_against_mock_judge() {
    let dir = tempfile::tempdir().unwrap();
    let models = dir.path().join("models");
    std::fs::create_dir(&models).unwrap();
    std::fs::write(
        models.join("completions.json"),
        r#"{"rules": [{"contains": ["Question 1:"], "reply": "{\"score\": 3}"},
                      {"contains": ["Evaluation aspect:"], "reply": "{\"score\": 4}"}],
            "default": {"reply": "{\"match\": \"yes\", \"score\": 4}"}}"#,
    )
    .unwrap();
    let mock = mock_models(&models);

    let records = dir.path().join("r.jsonl");
    std::fs::write(&records, "{\"question\":\"q1\",\"answer\":\"a\",\"pred\":\"a\"}\n{\"q\":\"q2\",\"a\":\"b\",\"pred\":\"b\"}\n").unwrap();
    let report = dir.path().join("qa.json");
    let out = bin()
        .args(["--judge-url", &mock.1, "eval-qa", "--records", records.to_str().unwrap(), "--dataset", "MSVD-QA"])
        .args(["--model-tag", "m", "--out", report.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let row: Vec<String> = stdout(&out).lines().nth(2).unwrap().split('|').map(|c| c.trim().to_string()).collect();
    assert_eq!(row, ["m", "100.0", "4.0"]);
    let json: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["schema"], "vidinstruct.report/v1");

    let samples = dir.path().join("s.jsonl");
    std::fs::write(
        &samples,
        "{\"video_id\":\"v\",\"pair_id\":\"p1\",\"question\":\"Q1\",\"reference_answer\":\"r\",\"prediction\":\"x\",\"consistency_group\":\"g\"}\n\
         {\"video_id\":\"v\",\"pair_id\":\"p2\",\"question\":\"Q2\",\"reference_answer\":\"r\",\"prediction\":\"y\",\"consistency_group\":\"g\"}\n",
    )
    .unwrap();
    let out = bin()
        .args(["--judge-endpoint", &mock.1, "eval-gen", "--samples", samples.to_str().unwrap(), "--format", "json"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let means: Vec<&str> = json["per_aspect"].as_array().unwrap().iter().map(|a| a["aspect"].as_str().unwrap()).collect();
    assert_eq!(means.len(), 5);
    let consistency = json["per_aspect"].as_array().unwrap().iter().find(|a| a["aspect"] == "consistency").unwrap();
    assert_eq!(consistency["mean"], 3.0);
}

#[test]
fn enrich_into_store_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let mock = mock_models(&fixtures().join("models"));
    let store = dir.path().join("store");
    let cfg = fixtures().join("pipeline.toml");
    let enrich = |out: &Path| {
        bin()
            .args(["--config", cfg.to_str().unwrap(), "--models-url", &mock.1, "enrich"])
            .args(["--videos", fixtures().join("videos.jsonl").to_str().unwrap()])
            .args(["--out", out.to_str().unwrap(), "--store", store.to_str().unwrap()])
            .output()
            .unwrap()
    };
    assert!(enrich(&dir.path().join("e1.jsonl")).status.success());
    // A second run records nothing new.
    assert!(enrich(&dir.path().join("e2.jsonl")).status.success());
    let export = dir.path().join("export.jsonl");
    let out = bin()
        .args(["export", "--store", store.to_str().unwrap(), "--out", export.to_str().unwrap(), "--include", "semi_automatic"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), format!("exported 3 records -> {}", export.display()));
    let ids: Vec<String> = std::fs::read_to_string(&export)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["video_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["v_cooking", "v_dog", "v_guitar"]);

    let bad = bin().args(["export", "--store", store.to_str().unwrap(), "--out", "x", "--include", "robots"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
