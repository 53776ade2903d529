use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};
use vidinstruct_annotation::{ServerHandle, Store, StoreConfig};

struct Env {
    _dir: tempfile::TempDir,
    server: ServerHandle,
    http: reqwest::blocking::Client,
}

impl Env {
    fn new(config: StoreConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(Store::open(dir.path(), config).unwrap());
        let server = ServerHandle::start(store, "127.0.0.1:0").unwrap();
        Self { _dir: dir, server, http: reqwest::blocking::Client::new() }
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.server.url())).send().unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.server.url())).json(&body).send().unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap())
    }
}

#[test]
fn annotator_workflow() {
    let env = Env::new(StoreConfig::default());
    let png = b"\x89PNG\r\n\x1a\nnot really".to_vec();
    let (status, created) = env.post(
        "/tasks",
        json!({"video_id": "v_abc", "base_caption": "A man plays guitar.",
               "keyframes": [{"index": 0, "image_b64": STANDARD.encode(&png)}]}),
    );
    assert_eq!(status, 201);
    let id = created["task_id"].as_str().unwrap().to_string();
    let (status, again) = env.post("/tasks", json!({"video_id": "v_abc", "base_caption": "A man plays guitar."}));
    assert_eq!((status, again["task_id"].as_str().unwrap()), (200, id.as_str()));

    let (_, task) = env.get(&format!("/tasks/{id}"));
    assert_eq!(task["status"], "open");
    assert_eq!(task["base_caption"], "A man plays guitar.");
    let url = task["keyframe_refs"][0]["url"].as_str().unwrap().to_string();
    let frame = env.http.get(format!("{}{url}", env.server.url())).send().unwrap();
    assert_eq!(frame.headers()["content-type"], "image/png");
    assert_eq!(frame.bytes().unwrap().to_vec(), png);

    let text = "A young man in a red shirt sits on a stool and strums an acoustic guitar, then smiles at the camera.";
    let (status, out) = env.post(&format!("/tasks/{id}/enrichment"), json!({"annotator_id": "a7", "enriched_text": text}));
    assert_eq!(status, 200);
    assert_eq!(out["task"]["status"], "submitted");
    assert_eq!(out["task"]["history"][0]["enriched_text"], text);

    let (_, page) = env.get("/tasks?status=submitted");
    assert_eq!(page["total"], 1);
    let (status, _) = env.post(&format!("/tasks/{id}/approve"), json!({}));
    assert_eq!(status, 200);

    let (status, err) = env.post(&format!("/tasks/{id}/enrichment"), json!({"annotator_id": "a7", "enriched_text": "x"}));
    assert_eq!((status, err["code"].as_str().unwrap()), (409, "immutable"));

    let export = env.http.get(format!("{}/export?include=human", env.server.url())).send().unwrap().text().unwrap();
    let line: Value = serde_json::from_str(export.trim()).unwrap();
    assert_eq!(line["enriched_text"], text);
    assert_eq!(line["source"], "human");
    let again = env.http.get(format!("{}/export?include=human", env.server.url())).send().unwrap().text().unwrap();
    assert_eq!(export, again);
}

#[test]
fn error_bodies() {
    let env = Env::new(StoreConfig::default());
    let (status, err) = env.get("/tasks/t_missing");
    assert_eq!((status, err["code"].as_str().unwrap()), (404, "not_found"));
    assert!(err["message"].as_str().unwrap().contains("t_missing"));

    let (status, err) = env.post("/tasks", json!({"video_id": "v", "base_caption": ""}));
    assert_eq!((status, err["code"].as_str().unwrap()), (400, "validation"));
    let (status, err) = env.post("/tasks", json!({"video": "v"}));
    assert_eq!((status, err["code"].as_str().unwrap()), (400, "validation"));

    let (_, created) = env.post("/tasks", json!({"video_id": "v", "base_caption": "c"}));
    let id = created["task_id"].as_str().unwrap();
    let (status, err) = env.post(&format!("/tasks/{id}/approve"), json!({}));
    assert_eq!((status, err["code"].as_str().unwrap()), (409, "invalid_transition"));
    let (status, _) = env.get("/tasks?status=bogus");
    assert_eq!(status, 400);
    let (status, _) = env.get("/export?include=robots");
    assert_eq!(status, 400);
    let (status, _) = env.get(&format!("/frames/{}", "0".repeat(64)));
    assert_eq!(status, 404);
}

#[test]
fn pagination_and_idempotent_retries() {
    let env = Env::new(StoreConfig { auto_approve: true, ..Default::default() });
    for i in 0..3 {
        env.post("/tasks", json!({"video_id": format!("v{i}"), "base_caption": "c"}));
    }
    let (_, p1) = env.get("/tasks?page_size=2");
    let (_, p2) = env.get("/tasks?page_size=2&page=2");
    assert_eq!((p1["items"].as_array().unwrap().len(), p2["items"].as_array().unwrap().len()), (2, 1));
    assert_eq!(p1["total"], 3);

    let id = p1["items"][0]["task_id"].as_str().unwrap().to_string();
    let send = || {
        env.http
            .post(format!("{}/tasks/{id}/enrichment", env.server.url()))
            .header("Idempotency-Key", "retry-1")
            .json(&json!({"annotator_id": "a", "enriched_text": "A longer caption text."}))
            .send()
            .unwrap()
            .json::<Value>()
            .unwrap()
    };
    let first = send();
    let second = send();
    assert_eq!(first["task"]["status"], "approved");
    assert_eq!(second["replayed"], true);
    assert_eq!(second["task"]["history"].as_array().unwrap().len(), 1);
}
