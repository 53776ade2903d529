//! Typed HTTP clients for the external model services and deterministic
//! mock servers that speak the same JSON protocol.
//!
//! Every capability is one `POST` route taking and returning JSON:
//! `/encode`, `/caption`, `/dense_caption`, `/tags` and `/complete`.
//! Non-2xx replies carry `{"code": ..., "message": ...}`.

pub mod client;
pub mod mock;
pub mod protocol;

pub use client::{
    idempotency_key, Gateway, GatewayConfig, HttpCaptioner, HttpDenseCaptioner, HttpEncoder, HttpLlm, HttpTagger,
    RetryPolicy, RouteMetrics, ServiceClient,
};
pub use mock::{EchoEncoder, MockFixtures, MockServer, MockStats};
