use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::routing::post;
use axum::Router;

use navrl_client::{Client, ClientError, RolloutRequest, WireMode};
use navrl_core::labeler::{label_trajectory, LabelerConfig, MockLabeler, RemoteLabeler};
use navrl_core::metrics::{aggregate, evaluate_policy};
use navrl_core::model::ActionSpace;
use navrl_core::policy::remote::{to_wire_elements, RemotePolicy};
use navrl_core::policy::scripted::ScriptedOracle;
use navrl_core::policy::toy::{ToyConfig, ToyModel, ToyPolicy};
use navrl_core::policy::{DecodeMode, Policy, PolicyContext, PolicyError, Vocab};
use navrl_core::sim::{generate_dataset, lexicon, SimConfig, TaskFamily};
use navrl_server::{spawn, AppState};

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn start(policy: Option<Arc<dyn Policy>>, space: ActionSpace) -> Client {
    let addr = spawn(local(), AppState { policy, space, seed: 7 }).unwrap();
    Client::new(&format!("http://{addr}"), Duration::from_secs(30))
}

fn sim() -> SimConfig {
    SimConfig { family: TaskFamily::MemoryProbe, rng_seed: 3, ..SimConfig::default() }
}

#[test]
fn remote_oracle_scores_perfectly() {
    let cfg = sim();
    let episodes = generate_dataset(&cfg, 12);
    let oracle: Arc<dyn Policy> = Arc::new(ScriptedOracle::new(cfg.action_space(), &episodes));
    let client = start(Some(oracle), cfg.action_space());
    let remote = RemotePolicy::new(client, cfg.action_space());
    let report = aggregate(&evaluate_policy(&remote, &episodes, "test", 1).unwrap()).unwrap();
    assert_eq!(report.overall.step_sr, 1.0);
    assert_eq!(report.overall.action_acc, 1.0);
}

#[test]
fn toy_rollouts_carry_normalized_logprobs() {
    let cfg = SimConfig::default();
    let vocab = Vocab::new(20, &cfg.action_space(), &lexicon(&cfg));
    let model = Arc::new(ToyModel::new(vocab, cfg.action_space(), ToyConfig { dense_rows: 256, pointer_slots: 64, bins: 20, max_len: 32 }));
    let theta = Arc::new(model.zeros());
    let policy: Arc<dyn Policy> = Arc::new(ToyPolicy::new(model.clone(), theta));
    let client = start(Some(policy), cfg.action_space());
    let ep = &generate_dataset(&cfg, 1)[0];
    let req = RolloutRequest {
        instruction: ep.instruction.clone(),
        history: String::new(),
        elements: to_wire_elements(&ep.steps[0].observation),
        n: 3,
        mode: WireMode::Stochastic,
    };
    let resp = client.rollout(&req).unwrap();
    assert_eq!(resp.turns.len(), 3);
    let uniform = -(model.vocab().len() as f64).ln();
    for t in &resp.turns {
        let lp = t.token_logprobs.as_ref().unwrap();
        assert!(!lp.is_empty());
        assert!(lp.iter().all(|v| (v - uniform).abs() < 1e-12));
    }

    // Evaluation through the remote path drops token ids, so the turns can
    // never be used for ratios.
    let remote = RemotePolicy::new(client, cfg.action_space());
    let ctx = PolicyContext { instruction: ep.instruction.clone(), observation: ep.steps[0].observation.clone(), history: String::new() };
    let got = remote.sample(&ctx, 2, DecodeMode::Greedy, 0).unwrap();
    assert!(got.iter().all(|s| !s.trainable()));
}

#[test]
fn label_endpoint_matches_local_mock() {
    let cfg = sim();
    let client = start(None, cfg.action_space());
    let remote = RemoteLabeler { client };
    for ep in generate_dataset(&cfg, 5) {
        let (a, _) = label_trajectory(&ep, &remote, &LabelerConfig::default()).unwrap();
        let (b, _) = label_trajectory(&ep, &MockLabeler, &LabelerConfig::default()).unwrap();
        let sa: Vec<_> = a.iter().map(|l| (&l.summary, &l.gt_action)).collect();
        let sb: Vec<_> = b.iter().map(|l| (&l.summary, &l.gt_action)).collect();
        assert_eq!(sa, sb);
    }
}

#[test]
fn missing_policy_and_bad_requests_are_reported() {
    let client = start(None, ActionSpace::mind2web());
    let req = RolloutRequest { instruction: "x".into(), history: String::new(), elements: vec![], n: 1, mode: WireMode::Greedy };
    assert!(matches!(client.rollout(&req), Err(ClientError::Status(503))));
    assert!(matches!(client.label("no action here"), Err(ClientError::Status(422))));
}

#[test]
fn unreachable_and_malformed_remotes_map_to_policy_errors() {
    let space = ActionSpace::mind2web();
    let ctx = PolicyContext { instruction: "x".into(), observation: generate_dataset(&SimConfig::default(), 1)[0].steps[0].observation.clone(), history: String::new() };

    let dead = RemotePolicy::new(Client::new("http://127.0.0.1:9", Duration::from_secs(2)), space.clone());
    assert!(matches!(dead.sample(&ctx, 1, DecodeMode::Greedy, 0), Err(PolicyError::RemoteUnreachable(_))));

    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind(local())).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new().route(navrl_client::ROLLOUT_PATH, post(|| async { "{\"turns\": 5}" }));
    rt.spawn(async move { axum::serve(listener, app).await });
    let bad = RemotePolicy::new(Client::new(&format!("http://{addr}"), Duration::from_secs(5)), space);
    assert!(matches!(bad.sample(&ctx, 1, DecodeMode::Greedy, 0), Err(PolicyError::MalformedResponse(_))));
}

#[test]
fn stateless_operations() {
    let client = start(None, ActionSpace::mind2web());
    let agent = ureq::Agent::new_with_defaults();
    let base = client.base_url().to_owned();
    let post = |path: &str, body: serde_json::Value| -> serde_json::Value {
        agent.post(&format!("{base}{path}")).send_json(body).unwrap().body_mut().read_json().unwrap()
    };
    let turn = "<Progress Estimation>0 steps done.</Progress Estimation><Decision Reasoning>CLICK apply.</Decision Reasoning><Action>{\"action\": \"CLICK\", \"value\": \"apply\", \"position\": [0.3, 0.66]}</Action><Memory Summary>apply.</Memory Summary>";
    assert_eq!(post("/v1/check_tags", serde_json::json!({"text": turn}))["ok"], true);
    let parsed = post("/v1/parse_turn", serde_json::json!({"text": turn}));
    assert_eq!(parsed["parsed_action"]["value"], "apply");
    let gt = serde_json::json!({"action_type": "CLICK", "value": "apply", "position": [0.3, 0.66]});
    let bbox = serde_json::json!([0.2, 0.6, 0.4, 0.7]);
    let r = post("/v1/rewards", serde_json::json!({"text": turn, "gt_action": gt, "gt_bbox": bbox, "r_h": 1.5}));
    assert_eq!(r["r_a"], 3.0);
    assert_eq!(r["total"], 1.0 + 3.0 + 0.5 * 1.5);
    let a = post("/v1/advantages", serde_json::json!({"rewards": [0.0, 1.0]}));
    assert_eq!(a["advantages"], serde_json::json!([-1.0, 1.0]));
    let m = post("/v1/metrics/step", serde_json::json!({"pred": gt, "gt": gt, "gt_bbox": bbox}));
    assert_eq!(m["action_acc"], 1.0);
}
