//! Remote target ranker over HTTP.
//!
//! Request: `POST {"query_id": str, "ranking": [int; K]}`.
//! Response: `{"logits": [[f64; K]; K]}`, one row per prefix length. Rows are
//! renormalised over the unplaced candidate identifiers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{EncodingMatrix, Oracle, QueryContext};
use crate::error::{Result, RsdError};
use crate::ranking::Ranking;

#[derive(Serialize)]
struct EncodeRequest<'a> {
    query_id: &'a str,
    ranking: &'a [usize],
}

#[derive(Deserialize)]
struct EncodeResponse {
    logits: Vec<Vec<f64>>,
}

pub struct HttpOracle {
    endpoint: String,
    agent: Agent,
}

impl std::fmt::Debug for HttpOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpOracle").field("endpoint", &self.endpoint).finish()
    }
}

impl HttpOracle {
    pub fn new(endpoint_url: impl Into<String>, timeout_ms: u64) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint_url.into(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn transport_error(err: ureq::Error) -> RsdError {
    match err {
        ureq::Error::Timeout(t) => RsdError::HttpTimeout(t.to_string()),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
            RsdError::HttpTimeout(io.to_string())
        }
        other => RsdError::MalformedResponse(other.to_string()),
    }
}

impl Oracle for HttpOracle {
    fn encode(&self, ctx: &QueryContext, sigma: &Ranking) -> Result<EncodingMatrix> {
        let body = EncodeRequest {
            query_id: &ctx.query_id,
            ranking: sigma.as_slice(),
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(transport_error)?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(RsdError::MalformedResponse(format!("HTTP status {status}")));
        }
        let parsed: EncodeResponse = resp.body_mut().read_json().map_err(transport_error)?;
        let k = sigma.len();
        if parsed.logits.len() != k || parsed.logits.iter().any(|r| r.len() != k) {
            return Err(RsdError::MalformedResponse(format!(
                "expected {k}x{k} logits"
            )));
        }
        let flat: Vec<f64> = parsed.logits.into_iter().flatten().collect();
        EncodingMatrix::from_logits(sigma, &flat)
    }
}
