//! Wire formats for the remote policy (`POST /v1/rollout`) and remote
//! labeler (`POST /v1/label`) protocols, plus a small blocking client.
//!
//! The schemas are documented byte-for-byte in `docs/PROTOCOL.md`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROLLOUT_PATH: &str = "/v1/rollout";
pub const LABEL_PATH: &str = "/v1/label";

/// Screen element as sent to a remote policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireElement {
    pub element_id: String,
    /// `[x1, y1, x2, y2]`, normalized.
    pub bbox: [f64; 4],
    pub label: String,
    /// One of `button`, `field`, `link`, `toggle`.
    pub kind: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireMode {
    Greedy,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    pub instruction: String,
    pub history: String,
    pub elements: Vec<WireElement>,
    pub n: usize,
    pub mode: WireMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTurn {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResponse {
    pub turns: Vec<RolloutTurn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub text: String,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("remote unreachable: {0}")]
    Unreachable(String),
    #[error("remote returned HTTP {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl From<ureq::Error> for ClientError {
    fn from(e: ureq::Error) -> Self {
        match e {
            ureq::Error::StatusCode(code) => ClientError::Status(code),
            ureq::Error::Json(e) => ClientError::MalformedResponse(e.to_string()),
            other => ClientError::Unreachable(other.to_string()),
        }
    }
}

/// Blocking client bound to one base URL such as `http://127.0.0.1:8080`.
#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { base: base_url.trim_end_matches('/').to_owned(), agent }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, path: &str, body: &Req) -> Result<Resp, ClientError> {
        let mut resp = self.agent.post(&format!("{}{path}", self.base)).send_json(body)?;
        let text = resp.body_mut().read_to_string()?;
        serde_json::from_str(&text).map_err(|e| ClientError::MalformedResponse(e.to_string()))
    }

    pub fn rollout(&self, req: &RolloutRequest) -> Result<RolloutResponse, ClientError> {
        let resp: RolloutResponse = self.post(ROLLOUT_PATH, req)?;
        if let Some(bad) = resp.turns.iter().find(|t| t.token_logprobs.as_ref().is_some_and(|lp| lp.iter().any(|v| !v.is_finite() || *v > 0.0))) {
            return Err(ClientError::MalformedResponse(format!("invalid token_logprobs in turn {:?}", bad.text)));
        }
        Ok(resp)
    }

    pub fn label(&self, prompt: &str) -> Result<LabelResponse, ClientError> {
        self.post(LABEL_PATH, &LabelRequest { prompt: prompt.to_owned() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollout_request_field_names() {
        let req = RolloutRequest {
            instruction: "click apply".into(),
            history: String::new(),
            elements: vec![WireElement {
                element_id: "e0".into(),
                bbox: [0.1, 0.1, 0.2, 0.2],
                label: "apply".into(),
                kind: "button".into(),
            }],
            n: 2,
            mode: WireMode::Greedy,
        };
        let json = serde_json::to_string(&req).unwrap();
        assert_eq!(
            json,
            r#"{"instruction":"click apply","history":"","elements":[{"element_id":"e0","bbox":[0.1,0.1,0.2,0.2],"label":"apply","kind":"button"}],"n":2,"mode":"greedy"}"#
        );
    }

    #[test]
    fn logprobs_are_optional() {
        let resp: RolloutResponse = serde_json::from_str(r#"{"turns":[{"text":"x"},{"text":"y","token_logprobs":[-0.5]}]}"#).unwrap();
        assert_eq!(resp.turns[0].token_logprobs, None);
        assert_eq!(resp.turns[1].token_logprobs, Some(vec![-0.5]));
    }

    #[test]
    fn unreachable_host_maps_to_unreachable() {
        // Port 9 (discard) is closed on loopback in the test sandbox.
        let c = Client::new("http://127.0.0.1:9", Duration::from_millis(300));
        assert!(matches!(c.label("p"), Err(ClientError::Unreachable(_))));
    }
}
