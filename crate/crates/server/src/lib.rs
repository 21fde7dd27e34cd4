//! HTTP service exposing rollouts, labeling and the stateless reward,
//! grammar and metric operations as JSON endpoints.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Json, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use navrl_client::{LabelRequest, LabelResponse, RolloutRequest, RolloutResponse, RolloutTurn, LABEL_PATH, ROLLOUT_PATH};
use navrl_core::grammar::{check_tags, parse_turn};
use navrl_core::grpo::compute_advantages;
use navrl_core::labeler::mock_response_from_prompt;
use navrl_core::metrics::{action_accuracy, step_metrics, StepMetrics};
use navrl_core::model::{ActionSpace, AgentTurn, BBox, GuiAction, RewardBreakdown, RewardConfig};
use navrl_core::policy::remote::{from_wire_elements, from_wire_mode};
use navrl_core::policy::{Policy, PolicyContext, PolicyError};
use navrl_core::rewards::{action_component_rewards, action_reward, format_reward, total_reward};

#[derive(Clone)]
pub struct AppState {
    pub policy: Option<Arc<dyn Policy>>,
    pub space: ActionSpace,
    /// Seed mixed into stochastic rollouts.
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn fail(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route(ROLLOUT_PATH, post(rollout))
        .route(LABEL_PATH, post(label))
        .route("/v1/check_tags", post(check_tags_op))
        .route("/v1/parse_turn", post(parse_turn_op))
        .route("/v1/rewards", post(rewards_op))
        .route("/v1/advantages", post(advantages_op))
        .route("/v1/metrics/step", post(metrics_op))
        .with_state(state)
}

/// Binds and serves until the process stops.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

async fn rollout(State(state): State<AppState>, Json(req): Json<RolloutRequest>) -> Response {
    let Some(policy) = state.policy.clone() else {
        return fail(StatusCode::SERVICE_UNAVAILABLE, "no policy loaded");
    };
    if req.n == 0 {
        return fail(StatusCode::UNPROCESSABLE_ENTITY, "n must be at least 1");
    }
    let observation = match from_wire_elements(&req.elements) {
        Ok(o) => o,
        Err(e) => return fail(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    let ctx = PolicyContext { instruction: req.instruction, observation, history: req.history };
    let mode = from_wire_mode(req.mode);
    let seed = state.seed;
    let result = tokio::task::spawn_blocking(move || policy.sample(&ctx, req.n, mode, seed)).await;
    match result {
        Ok(Ok(turns)) => Json(RolloutResponse {
            turns: turns
                .into_iter()
                .map(|s| RolloutTurn { text: s.turn.raw_text, token_logprobs: s.token_logprobs })
                .collect(),
        })
        .into_response(),
        Ok(Err(PolicyError::Unavailable(m))) => fail(StatusCode::UNPROCESSABLE_ENTITY, m),
        Ok(Err(e)) => fail(StatusCode::BAD_GATEWAY, e.to_string()),
        Err(e) => fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn label(Json(req): Json<LabelRequest>) -> Response {
    tracing::debug!(prompt = %req.prompt, "label request");
    match mock_response_from_prompt(&req.prompt) {
        Some(text) => Json(LabelResponse { text }).into_response(),
        None => fail(StatusCode::UNPROCESSABLE_ENTITY, "prompt has no parseable Current Action line"),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TextBody {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckTagsResponse {
    pub ok: bool,
}

async fn check_tags_op(Json(body): Json<TextBody>) -> Json<CheckTagsResponse> {
    Json(CheckTagsResponse { ok: check_tags(&body.text) })
}

async fn parse_turn_op(State(state): State<AppState>, Json(body): Json<TextBody>) -> Json<AgentTurn> {
    Json(parse_turn(&body.text, &state.space))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RewardsRequest {
    pub text: String,
    pub gt_action: GuiAction,
    pub gt_bbox: Option<BBox>,
    /// History reward computed elsewhere (it needs rollouts); defaults to 0.
    #[serde(default)]
    pub r_h: f64,
    #[serde(default)]
    pub config: Option<RewardConfig>,
}

async fn rewards_op(State(state): State<AppState>, Json(req): Json<RewardsRequest>) -> Json<RewardBreakdown> {
    let cfg = req.config.unwrap_or_default();
    let turn = parse_turn(&req.text, &state.space);
    let r_f = format_reward(&turn);
    let (r_af, r_type, r_pos) = action_component_rewards(&turn, &req.gt_action, req.gt_bbox.as_ref(), &state.space);
    let r_a = action_reward((r_af, r_type, r_pos), &cfg);
    let r_h = if r_a == 0.0 { 0.0 } else { req.r_h };
    Json(RewardBreakdown { r_f, r_af, r_type, r_pos, r_a, r_h, total: total_reward(r_f, r_a, r_h, &cfg) })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvantagesRequest {
    pub rewards: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    RewardConfig::default().advantage_epsilon
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvantagesResponse {
    pub advantages: Vec<f64>,
}

async fn advantages_op(Json(req): Json<AdvantagesRequest>) -> Response {
    if req.rewards.len() < 2 {
        return fail(StatusCode::UNPROCESSABLE_ENTITY, "a group needs at least 2 rewards");
    }
    Json(AdvantagesResponse { advantages: compute_advantages(&req.rewards, req.epsilon) }).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRequest {
    pub pred: Option<GuiAction>,
    pub gt: GuiAction,
    pub gt_bbox: Option<BBox>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsResponse {
    #[serde(flatten)]
    pub step: StepMetrics,
    pub action_acc: f64,
}

async fn metrics_op(State(state): State<AppState>, Json(req): Json<MetricsRequest>) -> Json<MetricsResponse> {
    let step = step_metrics(req.pred.as_ref(), &req.gt, req.gt_bbox.as_ref(), &state.space);
    let action_acc = action_accuracy(req.pred.as_ref(), &req.gt, req.gt_bbox.as_ref(), &state.space);
    Json(MetricsResponse { step, action_acc })
}

/// Serves on a background thread with its own runtime and returns the bound
/// address. Meant for tests and embedding; the thread lives until exit.
pub fn spawn(addr: SocketAddr, state: AppState) -> std::io::Result<SocketAddr> {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = rt.block_on(async move { axum::serve(listener, router(state)).await }) {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(local)
}
