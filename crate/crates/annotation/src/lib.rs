//! Human-in-the-loop caption enrichment: a durable task store and the REST
//! API annotators work against.

pub mod api;
pub mod store;

pub use api::{router, serve, ServerHandle};
pub use store::{
    AnnotationTask, ExportInclude, KeyframeInput, KeyframeRef, NewTask, Page, Store, StoreConfig, StoreError,
    Submission, SubmissionRequest, SubmitOutcome, TaskFilter, TaskStatus,
};
