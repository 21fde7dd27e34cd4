//! Without the carried summary, the final memory-probe click is a guess.

use std::sync::Arc;

use navrl_core::config::RunConfig;
use navrl_core::grammar::{parse_turn, serialize_turn};
use navrl_core::labeler::MockLabeler;
use navrl_core::metrics::{evaluate_policy, final_step_accuracy};
use navrl_core::model::{ActionSpace, ElementKind, GuiAction};
use navrl_core::pipeline;
use navrl_core::policy::scripted::ScriptedOracle;
use navrl_core::policy::toy::ToyPolicy;
use navrl_core::policy::{DecodeMode, Policy, PolicyContext, PolicyError, SampledTurn};
use navrl_core::seed::{hash_str, mix};
use navrl_core::sim::{generate_range, SimConfig, TaskFamily};

const EPISODES: usize = 1000;

fn probe_config() -> SimConfig {
    SimConfig { family: TaskFamily::MemoryProbe, rng_seed: 21, ..SimConfig::default() }
}

/// Hides the history from the wrapped policy.
struct Blind<P>(P);

impl<P: Policy> Policy for Blind<P> {
    fn sample(&self, ctx: &PolicyContext, n: usize, mode: DecodeMode, seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        let ctx = PolicyContext { history: String::new(), ..ctx.clone() };
        self.0.sample(&ctx, n, mode, seed)
    }

    fn action_space(&self) -> &ActionSpace {
        self.0.action_space()
    }
}

/// Follows the oracle on ordinary screens and picks a link by hashing the
/// visible context when several links compete.
struct HashPicker {
    oracle: ScriptedOracle,
    space: ActionSpace,
}

impl Policy for HashPicker {
    fn sample(&self, ctx: &PolicyContext, n: usize, _mode: DecodeMode, _seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        let links: Vec<_> = ctx.observation.elements.iter().filter(|e| e.kind == ElementKind::Link).collect();
        let action = if links.len() >= 2 {
            let key = links.iter().fold(hash_str(&ctx.instruction), |h, l| mix(h, hash_str(&l.label)));
            let pick = links[(key % links.len() as u64) as usize];
            GuiAction::new("CLICK", "", Some(pick.bbox.center()))
        } else {
            self.oracle.lookup(ctx)?.clone()
        };
        let text = serialize_turn("p", "d", &action, "m", &self.space).map_err(|e| PolicyError::Unavailable(e.to_string()))?;
        let turn = parse_turn(&text, &self.space);
        Ok(vec![SampledTurn { turn, token_ids: None, token_logprobs: None }; n])
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }
}

fn chance_limit(sim: &SimConfig) -> f64 {
    1.0 / sim.candidates as f64 + 0.05
}

#[test]
fn history_blind_scripted_policy_is_at_chance() {
    let sim = probe_config();
    let eps = generate_range(&sim, 0, EPISODES);
    let space = sim.action_space();

    let oracle = ScriptedOracle::new(space.clone(), &eps);
    let full = final_step_accuracy(&evaluate_policy(&oracle, &eps, "test", 0).unwrap());
    assert_eq!(full, 1.0);

    let blind = HashPicker { oracle, space };
    let acc = final_step_accuracy(&evaluate_policy(&Blind(blind), &eps, "test", 0).unwrap());
    assert!(acc <= chance_limit(&sim), "history-blind final-step accuracy {acc}");
    assert!(acc >= 1.0 / sim.candidates as f64 - 0.05, "suspiciously low {acc}");
}

#[test]
fn history_blind_trained_toy_is_at_chance() {
    let mut cfg = RunConfig { seed: 4, ..RunConfig::default() };
    cfg.sim = probe_config();
    cfg.data.test_episodes = EPISODES;
    let (train, test) = pipeline::generate(&cfg);
    let labels = pipeline::label(&cfg, &train, &MockLabeler).unwrap().labels;
    let model = Arc::new(pipeline::build_model(&cfg));
    let mut theta = model.zeros();
    pipeline::run_sft(&cfg, &model, &mut theta, &train, &labels).unwrap();
    let theta = Arc::new(theta);

    let sighted = ToyPolicy::new(model.clone(), theta.clone());
    let with_history = final_step_accuracy(&evaluate_policy(&sighted, &test, "test", 0).unwrap());
    let blind = Blind(ToyPolicy::new(model, theta));
    let without = final_step_accuracy(&evaluate_policy(&blind, &test, "test", 0).unwrap());

    assert!(with_history > 0.9, "trained policy with its own summaries: {with_history}");
    assert!(without <= chance_limit(&cfg.sim), "history-blind final-step accuracy {without}");
}
