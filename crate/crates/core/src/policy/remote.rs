//! Policy backed by an HTTP rollout endpoint.

use navrl_client::{Client, ClientError, RolloutRequest, WireElement, WireMode};

use crate::grammar::parse_turn;
use crate::model::{ActionSpace, BBox, ElementKind, Observation, UiElement};
use crate::policy::{DecodeMode, Policy, PolicyContext, PolicyError, SampledTurn};

/// Screen size assumed for observations rebuilt from wire elements.
pub const WIRE_WIDTH: u32 = 1280;
pub const WIRE_HEIGHT: u32 = 800;

pub fn to_wire_elements(obs: &Observation) -> Vec<WireElement> {
    obs.elements
        .iter()
        .map(|e| WireElement {
            element_id: e.element_id.clone(),
            bbox: e.bbox.into(),
            label: e.label.clone(),
            kind: e.kind.as_str().to_owned(),
        })
        .collect()
}

pub fn from_wire_elements(elements: &[WireElement]) -> Result<Observation, String> {
    let elements = elements
        .iter()
        .map(|w| {
            let kind: ElementKind = serde_json::from_value(serde_json::Value::String(w.kind.clone()))
                .map_err(|_| format!("unknown element kind {:?}", w.kind))?;
            Ok(UiElement { element_id: w.element_id.clone(), bbox: BBox::from(w.bbox), label: w.label.clone(), kind })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Observation { width: WIRE_WIDTH, height: WIRE_HEIGHT, elements, screen_ref: None })
}

pub fn to_wire_mode(mode: DecodeMode) -> WireMode {
    match mode {
        DecodeMode::Greedy => WireMode::Greedy,
        DecodeMode::Stochastic => WireMode::Stochastic,
    }
}

pub fn from_wire_mode(mode: WireMode) -> DecodeMode {
    match mode {
        WireMode::Greedy => DecodeMode::Greedy,
        WireMode::Stochastic => DecodeMode::Stochastic,
    }
}

impl From<ClientError> for PolicyError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Unreachable(m) => PolicyError::RemoteUnreachable(m),
            other => PolicyError::MalformedResponse(other.to_string()),
        }
    }
}

/// Evaluation-only: turns carry no token ids, so they never feed ratios.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    client: Client,
    space: ActionSpace,
}

impl RemotePolicy {
    pub fn new(client: Client, space: ActionSpace) -> Self {
        Self { client, space }
    }
}

impl Policy for RemotePolicy {
    fn sample(&self, ctx: &PolicyContext, n: usize, mode: DecodeMode, _seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        let req = RolloutRequest {
            instruction: ctx.instruction.clone(),
            history: ctx.history.clone(),
            elements: to_wire_elements(&ctx.observation),
            n,
            mode: to_wire_mode(mode),
        };
        let resp = self.client.rollout(&req)?;
        if resp.turns.len() != n {
            return Err(PolicyError::MalformedResponse(format!("asked for {n} turns, got {}", resp.turns.len())));
        }
        Ok(resp
            .turns
            .into_iter()
            .map(|t| SampledTurn { turn: parse_turn(&t.text, &self.space), token_ids: None, token_logprobs: t.token_logprobs })
            .collect())
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }
}
