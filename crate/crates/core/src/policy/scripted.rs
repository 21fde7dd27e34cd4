//! Policies that read the ground truth: a perfect oracle and a corrupted
//! variant that fails each step with a fixed probability.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grammar::{parse_turn, serialize_turn};
use crate::labeler::mock_texts;
use crate::model::{ActionSpace, Episode, GuiAction, Observation, Point};
use crate::policy::{DecodeMode, Policy, PolicyContext, PolicyError, SampledTurn};
use crate::seed::{hash_str, mix};

/// Keyed on the element list only, so contexts that crossed the wire (which
/// drops screen size and image references) still resolve.
fn context_key(instruction: &str, observation: &Observation) -> String {
    let obs = serde_json::to_string(&observation.elements).expect("elements serialize");
    format!("{instruction}\u{1f}{obs}")
}

/// Ground-truth lookup keyed by (instruction, observation).
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    space: ActionSpace,
    table: HashMap<String, GuiAction>,
}

impl ScriptedOracle {
    pub fn new(space: ActionSpace, episodes: &[Episode]) -> Self {
        let mut table = HashMap::new();
        for ep in episodes {
            for s in &ep.steps {
                table.insert(context_key(&ep.instruction, &s.observation), s.gt_action.clone());
            }
        }
        Self { space, table }
    }

    pub fn lookup(&self, ctx: &PolicyContext) -> Result<&GuiAction, PolicyError> {
        self.table
            .get(&context_key(&ctx.instruction, &ctx.observation))
            .ok_or_else(|| PolicyError::Unavailable("context is not part of the scripted dataset".into()))
    }

    fn turn_for(&self, ctx: &PolicyContext, action: &GuiAction) -> Result<SampledTurn, PolicyError> {
        let texts = mock_texts(&ctx.history, &ctx.observation, action);
        let raw = serialize_turn(&texts.progress, &texts.decision, action, &texts.summary, &self.space)
            .map_err(|e| PolicyError::Unavailable(e.to_string()))?;
        Ok(SampledTurn { turn: parse_turn(&raw, &self.space), token_ids: None, token_logprobs: None })
    }
}

impl Policy for ScriptedOracle {
    fn sample(&self, ctx: &PolicyContext, n: usize, _mode: DecodeMode, _seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        let turn = self.turn_for(ctx, self.lookup(ctx)?)?;
        Ok(vec![turn; n])
    }

    fn action_space(&self) -> &ActionSpace {
        &self.space
    }
}

/// The oracle, except each sampled step fails with probability `p`.
#[derive(Debug, Clone)]
pub struct ScriptedCorrupt {
    oracle: ScriptedOracle,
    p: f64,
}

impl ScriptedCorrupt {
    pub fn new(oracle: ScriptedOracle, p: f64) -> Self {
        Self { oracle, p }
    }

    fn corrupt(&self, ctx: &PolicyContext, gt: &GuiAction) -> GuiAction {
        let mut a = gt.clone();
        match gt.position {
            Some(_) => {
                let target = ctx.observation.elements.iter().find(|e| gt.position.is_some_and(|p| e.bbox.contains(p)));
                let corner = Point::new(0.0, 0.0);
                let miss = match target {
                    Some(t) if t.bbox.contains(corner) => Point::new(1.0, 1.0),
                    _ => corner,
                };
                a.position = Some(miss);
            }
            None => a.value = format!("{} corrupted", a.value).trim().to_owned(),
        }
        a
    }
}

impl Policy for ScriptedCorrupt {
    fn sample(&self, ctx: &PolicyContext, n: usize, _mode: DecodeMode, seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        let gt = self.oracle.lookup(ctx)?.clone();
        let key = context_key(&ctx.instruction, &ctx.observation);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, hash_str(&key) ^ hash_str(&ctx.history)));
        (0..n)
            .map(|_| {
                let action = if rng.random::<f64>() < self.p { self.corrupt(ctx, &gt) } else { gt.clone() };
                self.oracle.turn_for(ctx, &action)
            })
            .collect()
    }

    fn action_space(&self) -> &ActionSpace {
        &self.oracle.space
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::action_component_rewards;
    use crate::sim::{generate_dataset, SimConfig, TaskFamily};

    #[test]
    fn oracle_earns_full_action_rewards() {
        for family in TaskFamily::ALL {
            let cfg = SimConfig { family, rng_seed: 3, ..SimConfig::default() };
            let data = generate_dataset(&cfg, 30);
            let oracle = ScriptedOracle::new(cfg.action_space(), &data);
            for ep in &data {
                let mut history = String::new();
                for s in &ep.steps {
                    let ctx = PolicyContext {
                        instruction: ep.instruction.clone(),
                        observation: s.observation.clone(),
                        history: history.clone(),
                    };
                    let turn = &oracle.sample(&ctx, 1, DecodeMode::Greedy, 0).unwrap()[0].turn;
                    assert!(turn.tags_ok);
                    let r = action_component_rewards(turn, &s.gt_action, s.gt_bbox.as_ref(), &cfg.action_space());
                    assert_eq!(r, (1.0, 1.0, 1.0), "{family}");
                    history = turn.history_summary.clone();
                }
            }
        }
    }

    #[test]
    fn unknown_context_is_unavailable() {
        let cfg = SimConfig::default();
        let oracle = ScriptedOracle::new(cfg.action_space(), &[]);
        let ctx = PolicyContext {
            instruction: "x".into(),
            observation: Observation { width: 1, height: 1, elements: vec![], screen_ref: None },
            history: String::new(),
        };
        assert!(matches!(oracle.sample(&ctx, 1, DecodeMode::Greedy, 0), Err(PolicyError::Unavailable(_))));
    }
}
