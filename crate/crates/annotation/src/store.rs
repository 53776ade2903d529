//! File-backed task store: an append-only JSONL journal replayed into an
//! in-memory index on open, plus content-addressed keyframe files.
//!
//! Layout of a store directory:
//!
//! - `journal.jsonl`: one event per line, fsynced before a write returns
//! - `frames/<sha256>`: keyframe images, named by the hash of their bytes

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use vidinstruct_core::enrichment::{to_jsonl, CaptionSource, EnrichedCaption};

const JOURNAL: &str = "journal.jsonl";
const FRAMES: &str = "frames";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("task `{0}` not found")]
    NotFound(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("task `{0}` is approved and can no longer change")]
    Immutable(String),
    #[error("task `{task_id}` is {status:?}; {action} needs a submitted task")]
    InvalidTransition {
        task_id: String,
        status: TaskStatus,
        action: &'static str,
    },
    #[error("journal line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::NotFound(_) => "not_found",
            StoreError::Validation(_) => "validation",
            StoreError::Immutable(_) => "immutable",
            StoreError::InvalidTransition { .. } => "invalid_transition",
            StoreError::Corrupt { .. } | StoreError::Io(_) => "storage",
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// Submissions are approved immediately (single-step annotation).
    pub auto_approve: bool,
    /// Rewrite the journal as a snapshot after this many appended events.
    pub compact_every: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            auto_approve: false,
            compact_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Submitted,
    Approved,
}

impl std::str::FromStr for TaskStatus {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(TaskStatus::Open),
            "submitted" => Ok(TaskStatus::Submitted),
            "approved" => Ok(TaskStatus::Approved),
            other => Err(StoreError::Validation(format!("unknown status `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeRef {
    pub index: usize,
    pub hash: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator_id: String,
    pub enriched_text: String,
    pub submitted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub video_id: String,
    pub base_caption: String,
    pub keyframe_refs: Vec<KeyframeRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_context: Option<EnrichedCaption>,
    pub status: TaskStatus,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Every submission in order; the last one is current.
    #[serde(default)]
    pub history: Vec<Submission>,
}

impl AnnotationTask {
    pub fn current(&self) -> Option<&Submission> {
        self.history.last()
    }
}

/// A keyframe to attach to a new task, inline or as a local file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KeyframeInput {
    Inline {
        #[serde(default)]
        index: Option<usize>,
        image_b64: String,
    },
    Path {
        #[serde(default)]
        index: Option<usize>,
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewTask {
    pub video_id: String,
    pub base_caption: String,
    #[serde(default)]
    pub keyframes: Vec<KeyframeInput>,
    #[serde(default)]
    pub auto_context: Option<EnrichedCaption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRequest {
    pub annotator_id: String,
    pub enriched_text: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub task: AnnotationTask,
    /// The idempotency key was seen before; nothing new was written.
    pub replayed: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFilter {
    pub status: Option<TaskStatus>,
    pub video_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportInclude {
    pub human: bool,
    pub semi_automatic: bool,
}

impl Default for ExportInclude {
    fn default() -> Self {
        Self {
            human: true,
            semi_automatic: true,
        }
    }
}

impl std::str::FromStr for ExportInclude {
    type Err = StoreError;

    /// Comma-separated `human`, `semi_automatic`.
    fn from_str(s: &str) -> Result<Self> {
        let mut inc = Self {
            human: false,
            semi_automatic: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "human" => inc.human = true,
                "semi_automatic" | "semi-automatic" => inc.semi_automatic = true,
                other => return Err(StoreError::Validation(format!("unknown export source `{other}`"))),
            }
        }
        if !(inc.human || inc.semi_automatic) {
            return Err(StoreError::Validation("export needs at least one source".into()));
        }
        Ok(inc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    TaskCreated {
        task: AnnotationTask,
    },
    Submitted {
        task_id: String,
        submission: Submission,
        approve: bool,
    },
    Approved {
        task_id: String,
        at: DateTime<Utc>,
    },
    SemiAutomatic {
        key: String,
        record: EnrichedCaption,
    },
}

#[derive(Default)]
struct State {
    tasks: BTreeMap<String, AnnotationTask>,
    semi_automatic: BTreeMap<String, EnrichedCaption>,
    idempotency: HashMap<String, String>,
    appended: usize,
}

impl State {
    fn apply(&mut self, event: Event) -> Result<(), String> {
        match event {
            Event::TaskCreated { task } => {
                for s in &task.history {
                    if let Some(k) = &s.idempotency_key {
                        self.idempotency.insert(k.clone(), task.task_id.clone());
                    }
                }
                self.tasks.insert(task.task_id.clone(), task);
            }
            Event::Submitted {
                task_id,
                submission,
                approve,
            } => {
                let task = self.tasks.get_mut(&task_id).ok_or_else(|| format!("unknown task {task_id}"))?;
                if let Some(k) = &submission.idempotency_key {
                    self.idempotency.insert(k.clone(), task_id.clone());
                }
                task.updated_at = submission.submitted_at;
                task.status = if approve { TaskStatus::Approved } else { TaskStatus::Submitted };
                task.history.push(submission);
            }
            Event::Approved { task_id, at } => {
                let task = self.tasks.get_mut(&task_id).ok_or_else(|| format!("unknown task {task_id}"))?;
                task.status = TaskStatus::Approved;
                task.updated_at = at;
            }
            Event::SemiAutomatic { key, record } => {
                self.semi_automatic.insert(key, record);
            }
        }
        Ok(())
    }
}

fn content_key(prefix: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    format!("{prefix}{}", &hex::encode(h.finalize())[..20])
}

/// Task id for a `(video_id, base_caption)` pair.
pub fn task_id_for(video_id: &str, base_caption: &str) -> String {
    content_key("t_", &[video_id, base_caption])
}

fn sync_dir(dir: &Path) -> std::io::Result<()> {
    File::open(dir)?.sync_all()
}

pub struct Store {
    dir: PathBuf,
    config: StoreConfig,
    state: RwLock<State>,
    journal: Mutex<File>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).field("config", &self.config).finish()
    }
}

impl Store {
    /// Opens (creating if needed) the store at `dir` and replays its journal.
    /// A torn final line from an interrupted write is discarded.
    pub fn open(dir: &Path, config: StoreConfig) -> Result<Self> {
        std::fs::create_dir_all(dir.join(FRAMES))?;
        let path = dir.join(JOURNAL);
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut state = State::default();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            reader.seek(SeekFrom::Start(0))?;
            let mut line = String::new();
            let mut number = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                number += 1;
                let complete = line.ends_with('\n');
                if line.trim().is_empty() {
                    good_len += n as u64;
                    continue;
                }
                match serde_json::from_str::<Event>(line.trim_end()) {
                    Ok(event) => {
                        state.apply(event).map_err(|reason| StoreError::Corrupt { line: number, reason })?;
                        good_len += n as u64;
                        state.appended += 1;
                    }
                    Err(e) if !complete => {
                        tracing::warn!(line = number, error = %e, "discarding torn journal tail");
                        break;
                    }
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            line: number,
                            reason: e.to_string(),
                        })
                    }
                }
            }
        }
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        tracing::info!(dir = %dir.display(), tasks = state.tasks.len(), "store opened");
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            state: RwLock::new(state),
            journal: Mutex::new(file),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    /// Appends and fsyncs `event`, then makes it visible to readers.
    fn commit(&self, journal: &mut File, event: Event) -> Result<()> {
        let mut line = serde_json::to_string(&event).map_err(|e| StoreError::Validation(e.to_string()))?;
        line.push('\n');
        journal.write_all(line.as_bytes())?;
        journal.sync_data()?;
        let mut state = self.state.write().expect("store poisoned");
        state.apply(event).map_err(|reason| StoreError::Corrupt { line: 0, reason })?;
        state.appended += 1;
        let due = self.config.compact_every > 0 && state.appended >= self.config.compact_every;
        drop(state);
        if due {
            self.compact_locked(journal)?;
        }
        Ok(())
    }

    /// Rewrites the journal as one snapshot event per task and record.
    pub fn compact(&self) -> Result<()> {
        let mut journal = self.journal.lock().expect("journal poisoned");
        self.compact_locked(&mut journal)
    }

    fn compact_locked(&self, journal: &mut File) -> Result<()> {
        let mut state = self.state.write().expect("store poisoned");
        let tmp = self.dir.join(format!("{JOURNAL}.compact"));
        {
            let mut out = std::io::BufWriter::new(File::create(&tmp)?);
            let events = state
                .tasks
                .values()
                .map(|t| Event::TaskCreated { task: t.clone() })
                .chain(state.semi_automatic.iter().map(|(k, r)| Event::SemiAutomatic {
                    key: k.clone(),
                    record: r.clone(),
                }));
            for event in events {
                serde_json::to_writer(&mut out, &event).map_err(|e| StoreError::Validation(e.to_string()))?;
                out.write_all(b"\n")?;
            }
            out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        std::fs::rename(&tmp, self.dir.join(JOURNAL))?;
        sync_dir(&self.dir)?;
        *journal = OpenOptions::new().read(true).append(true).open(self.dir.join(JOURNAL))?;
        state.appended = state.tasks.len() + state.semi_automatic.len();
        tracing::info!(events = state.appended, "journal compacted");
        Ok(())
    }

    fn store_frame(&self, bytes: &[u8]) -> Result<String> {
        if bytes.is_empty() {
            return Err(StoreError::Validation("keyframe image is empty".into()));
        }
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.dir.join(FRAMES).join(&hash);
        if !path.exists() {
            let tmp = self.dir.join(FRAMES).join(format!("{hash}.tmp"));
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(hash)
    }

    /// Path of a stored keyframe, if `hash` names one.
    pub fn frame_path(&self, hash: &str) -> Option<PathBuf> {
        let valid = hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase());
        let path = self.dir.join(FRAMES).join(hash);
        (valid && path.is_file()).then_some(path)
    }

    /// Creates an open task. The id is derived from `(video_id, base_caption)`,
    /// so repeating a request returns the existing task. Returns the id and
    /// whether a new task was written.
    pub fn create_task(&self, new: NewTask) -> Result<(String, bool)> {
        if new.video_id.trim().is_empty() {
            return Err(StoreError::Validation("video_id is empty".into()));
        }
        if new.base_caption.trim().is_empty() {
            return Err(StoreError::Validation("base caption is empty".into()));
        }
        let task_id = task_id_for(&new.video_id, &new.base_caption);
        let mut journal = self.journal.lock().expect("journal poisoned");
        if self.state.read().expect("store poisoned").tasks.contains_key(&task_id) {
            return Ok((task_id, false));
        }
        let mut refs = Vec::with_capacity(new.keyframes.len());
        for (pos, kf) in new.keyframes.iter().enumerate() {
            let (index, bytes) = match kf {
                KeyframeInput::Inline { index, image_b64 } => (
                    index.unwrap_or(pos),
                    STANDARD
                        .decode(image_b64)
                        .map_err(|e| StoreError::Validation(format!("keyframe {pos}: bad base64: {e}")))?,
                ),
                KeyframeInput::Path { index, path } => (
                    index.unwrap_or(pos),
                    std::fs::read(path).map_err(|e| {
                        StoreError::Validation(format!("keyframe {}: cannot read: {e}", path.display()))
                    })?,
                ),
            };
            let hash = self.store_frame(&bytes)?;
            refs.push(KeyframeRef {
                index,
                url: format!("/frames/{hash}"),
                hash,
            });
        }
        refs.sort_by_key(|r| r.index);
        let now = Utc::now();
        let task = AnnotationTask {
            task_id: task_id.clone(),
            video_id: new.video_id,
            base_caption: new.base_caption,
            keyframe_refs: refs,
            auto_context: new.auto_context,
            status: TaskStatus::Open,
            created_at: now,
            updated_at: now,
            history: Vec::new(),
        };
        self.commit(&mut journal, Event::TaskCreated { task })?;
        Ok((task_id, true))
    }

    pub fn get_task(&self, task_id: &str) -> Result<AnnotationTask> {
        self.state
            .read()
            .expect("store poisoned")
            .tasks
            .get(task_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(task_id.to_string()))
    }

    /// Tasks ordered by creation time then id; `page` is 1-based.
    pub fn list_tasks(&self, filter: &TaskFilter, page: usize, page_size: usize) -> Result<Page<AnnotationTask>> {
        if page == 0 || page_size == 0 {
            return Err(StoreError::Validation("page and page_size start at 1".into()));
        }
        let state = self.state.read().expect("store poisoned");
        let mut matching: Vec<&AnnotationTask> = state
            .tasks
            .values()
            .filter(|t| filter.status.is_none_or(|s| t.status == s))
            .filter(|t| filter.video_id.as_ref().is_none_or(|v| &t.video_id == v))
            .collect();
        matching.sort_by(|a, b| (a.created_at, &a.task_id).cmp(&(b.created_at, &b.task_id)));
        let total = matching.len();
        let items = matching
            .into_iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .cloned()
            .collect();
        Ok(Page {
            items,
            page,
            page_size,
            total,
        })
    }

    /// Stores an enriched caption for an open or submitted task. A later
    /// submission replaces the current text and keeps the earlier ones in
    /// history. A repeated idempotency key returns the task unchanged.
    pub fn submit_enrichment(&self, task_id: &str, req: SubmissionRequest) -> Result<SubmitOutcome> {
        let mut journal = self.journal.lock().expect("journal poisoned");
        let task = self.get_task(task_id)?;
        if let Some(key) = &req.idempotency_key {
            if let Some(owner) = self.state.read().expect("store poisoned").idempotency.get(key) {
                if owner != task_id {
                    return Err(StoreError::Validation(format!(
                        "idempotency key `{key}` was already used for another task"
                    )));
                }
                return Ok(SubmitOutcome {
                    task,
                    replayed: true,
                    warnings: Vec::new(),
                });
            }
        }
        if task.status == TaskStatus::Approved {
            return Err(StoreError::Immutable(task_id.to_string()));
        }
        if req.annotator_id.trim().is_empty() {
            return Err(StoreError::Validation("annotator_id is empty".into()));
        }
        if req.enriched_text.trim().is_empty() {
            return Err(StoreError::Validation("enriched text is empty".into()));
        }
        let mut warnings = Vec::new();
        if req.enriched_text.chars().count() < task.base_caption.chars().count() {
            warnings.push("enriched text is shorter than the base caption".to_string());
        }
        let submission = Submission {
            annotator_id: req.annotator_id,
            enriched_text: req.enriched_text,
            submitted_at: Utc::now(),
            idempotency_key: req.idempotency_key,
        };
        self.commit(
            &mut journal,
            Event::Submitted {
                task_id: task_id.to_string(),
                submission,
                approve: self.config.auto_approve,
            },
        )?;
        Ok(SubmitOutcome {
            task: self.get_task(task_id)?,
            replayed: false,
            warnings,
        })
    }

    pub fn approve(&self, task_id: &str) -> Result<AnnotationTask> {
        let mut journal = self.journal.lock().expect("journal poisoned");
        let task = self.get_task(task_id)?;
        match task.status {
            TaskStatus::Submitted => {}
            TaskStatus::Approved => return Err(StoreError::Immutable(task_id.to_string())),
            status => {
                return Err(StoreError::InvalidTransition {
                    task_id: task_id.to_string(),
                    status,
                    action: "approval",
                })
            }
        }
        self.commit(
            &mut journal,
            Event::Approved {
                task_id: task_id.to_string(),
                at: Utc::now(),
            },
        )?;
        self.get_task(task_id)
    }

    /// Records a semi-automatic caption. One record is kept per
    /// `(video_id, base_caption)`; a newer record replaces an older one.
    /// Returns false when an identical record is already stored.
    pub fn add_semi_automatic(&self, record: EnrichedCaption) -> Result<bool> {
        record.validate().map_err(|e| StoreError::Validation(e.to_string()))?;
        if record.source != CaptionSource::SemiAutomatic {
            return Err(StoreError::Validation("record is not semi-automatic".into()));
        }
        let key = content_key("s_", &[&record.video_id, &record.base_caption]);
        let mut journal = self.journal.lock().expect("journal poisoned");
        if self.state.read().expect("store poisoned").semi_automatic.get(&key) == Some(&record) {
            return Ok(false);
        }
        self.commit(&mut journal, Event::SemiAutomatic { key, record })?;
        Ok(true)
    }

    /// Approved human captions and/or semi-automatic captions as JSONL,
    /// ordered by video id, then source, then task id.
    pub fn export_jsonl(&self, include: ExportInclude) -> String {
        let state = self.state.read().expect("store poisoned");
        let mut records: Vec<(String, EnrichedCaption)> = Vec::new();
        if include.human {
            for t in state.tasks.values().filter(|t| t.status == TaskStatus::Approved) {
                let Some(s) = t.current() else { continue };
                records.push((
                    t.task_id.clone(),
                    EnrichedCaption {
                        video_id: t.video_id.clone(),
                        base_caption: t.base_caption.clone(),
                        enriched_text: s.enriched_text.clone(),
                        source: CaptionSource::Human,
                        task_id: Some(t.task_id.clone()),
                        annotator_id: Some(s.annotator_id.clone()),
                        provenance: Default::default(),
                    },
                ));
            }
        }
        if include.semi_automatic {
            records.extend(state.semi_automatic.iter().map(|(k, r)| (k.clone(), r.clone())));
        }
        records.sort_by(|(ka, a), (kb, b)| (&a.video_id, a.source, ka).cmp(&(&b.video_id, b.source, kb)));
        let records: Vec<EnrichedCaption> = records.into_iter().map(|(_, r)| r).collect();
        to_jsonl(&records)
    }

    /// Writes the export to `out` atomically and returns the record count.
    pub fn export_to(&self, include: ExportInclude, out: &Path) -> Result<usize> {
        let text = self.export_jsonl(include);
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = out.with_extension("jsonl.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, out)?;
        Ok(text.lines().count())
    }
}
