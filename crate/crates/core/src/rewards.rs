//! Format, action, history-summary and total rewards.

use crate::grammar::check_action_format;
use crate::model::{ActionSpace, AgentTurn, BBox, GuiAction, RewardBreakdown, RewardConfig, RolloutDecoding, Step};
use crate::policy::{DecodeMode, Policy, PolicyContext, PolicyError};

pub fn format_reward(turn: &AgentTurn) -> f64 {
    if turn.tags_ok { 1.0 } else { 0.0 }
}

fn indicator(b: bool) -> f64 {
    if b { 1.0 } else { 0.0 }
}

/// `(r_af, r_type, r_pos)`. Type and position need a successful parse; a
/// non-spatial ground truth grants the position term on a type match.
pub fn action_component_rewards(
    turn: &AgentTurn,
    gt: &GuiAction,
    gt_bbox: Option<&BBox>,
    space: &ActionSpace,
) -> (f64, f64, f64) {
    let r_af = indicator(check_action_format(&turn.action_text));
    let Some(pred) = &turn.parsed_action else {
        return (r_af, 0.0, 0.0);
    };
    let type_ok = pred.action_type == gt.action_type;
    let spatial = space.is_spatial(&gt.action_type).unwrap_or(gt.position.is_some());
    let pos_ok = if spatial {
        match (pred.position, gt_bbox) {
            (Some(p), Some(b)) => b.contains(p),
            _ => false,
        }
    } else {
        type_ok
    };
    (r_af, indicator(type_ok), indicator(pos_ok))
}

pub fn action_reward(components: (f64, f64, f64), cfg: &RewardConfig) -> f64 {
    let (r_af, r_type, r_pos) = components;
    r_af + cfg.lambda_type * r_type + cfg.lambda_pos * r_pos
}

pub fn total_reward(r_f: f64, r_a: f64, r_h: f64, cfg: &RewardConfig) -> f64 {
    r_f + cfg.lambda_a * r_a + cfg.lambda_h * r_h
}

/// Mean next-step action reward over `k` rollouts that condition on the
/// candidate summary. Zero when the current action earned nothing or there
/// is no next step. Rollouts never record gradients.
pub fn history_summary_reward(
    instruction: &str,
    summary: &str,
    r_a: f64,
    next_step: Option<&Step>,
    policy: &dyn Policy,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<f64, PolicyError> {
    let Some(next) = next_step else {
        return Ok(0.0);
    };
    if r_a == 0.0 {
        return Ok(0.0);
    }
    let ctx = PolicyContext {
        instruction: instruction.to_owned(),
        observation: next.observation.clone(),
        history: summary.to_owned(),
    };
    let (n, mode) = match cfg.history_decoding {
        // Identical greedy decodes collapse into one evaluation.
        RolloutDecoding::Greedy => (1, DecodeMode::Greedy),
        RolloutDecoding::Stochastic => (cfg.k_rollouts, DecodeMode::Stochastic),
    };
    let rollouts = policy.sample(&ctx, n, mode, seed)?;
    let space = policy.action_space();
    let sum: f64 = rollouts
        .iter()
        .map(|s| action_reward(action_component_rewards(&s.turn, &next.gt_action, next.gt_bbox.as_ref(), space), cfg))
        .sum();
    Ok(sum / n as f64)
}

/// Scores one turn against step `t` of a ground-truth trajectory.
pub fn score_turn(
    turn: &AgentTurn,
    instruction: &str,
    step: &Step,
    next_step: Option<&Step>,
    policy: &dyn Policy,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<RewardBreakdown, PolicyError> {
    let space = policy.action_space();
    let r_f = format_reward(turn);
    let (r_af, r_type, r_pos) = action_component_rewards(turn, &step.gt_action, step.gt_bbox.as_ref(), space);
    let r_a = action_reward((r_af, r_type, r_pos), cfg);
    let r_h = if cfg.lambda_h == 0.0 {
        0.0
    } else {
        history_summary_reward(instruction, &turn.history_summary, r_a, next_step, policy, cfg, seed)?
    };
    Ok(RewardBreakdown { r_f, r_af, r_type, r_pos, r_a, r_h, total: total_reward(r_f, r_a, r_h, cfg) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_turn;
    use crate::model::{Observation, Point};
    use crate::policy::SampledTurn;

    fn turn_with_action(action: &str) -> AgentTurn {
        let raw = format!(
            "<Progress Estimation>p</Progress Estimation><Decision Reasoning>d</Decision Reasoning><Action>{action}</Action><Memory Summary>m</Memory Summary>"
        );
        parse_turn(&raw, &ActionSpace::guiact())
    }

    fn click(x: f64, y: f64) -> GuiAction {
        GuiAction::new("CLICK", "a", Some(Point::new(x, y)))
    }

    #[test]
    fn format_reward_follows_tags() {
        assert_eq!(format_reward(&turn_with_action("x")), 1.0);
        assert_eq!(format_reward(&parse_turn("no tags", &ActionSpace::guiact())), 0.0);
    }

    #[test]
    fn component_examples() {
        let space = ActionSpace::guiact();
        let b = BBox::new(0.4, 0.4, 0.6, 0.6);
        let gt = click(0.5, 0.5);
        let inside = turn_with_action(r#"{"action": "CLICK", "value": "a", "position": [0.5, 0.5]}"#);
        assert_eq!(action_component_rewards(&inside, &gt, Some(&b), &space), (1.0, 1.0, 1.0));
        let outside = turn_with_action(r#"{"action": "CLICK", "value": "a", "position": [0.39, 0.5]}"#);
        assert_eq!(action_component_rewards(&outside, &gt, Some(&b), &space), (1.0, 1.0, 0.0));
        let extra = turn_with_action(r#"{"action": "CLICK", "value": "a", "position": [0.5, 0.5], "note": 1}"#);
        assert_eq!(action_component_rewards(&extra, &gt, Some(&b), &space), (0.0, 0.0, 0.0));
        let edge = turn_with_action(r#"{"action": "CLICK", "value": "a", "position": [0.4, 0.6]}"#);
        assert_eq!(action_component_rewards(&edge, &gt, Some(&b), &space), (1.0, 1.0, 1.0));
        let enter = GuiAction::new("ENTER", "", None);
        let pred_enter = turn_with_action(r#"{"action": "ENTER", "value": "", "position": null}"#);
        assert_eq!(action_component_rewards(&pred_enter, &enter, None, &space), (1.0, 1.0, 1.0));
    }

    #[test]
    fn weighted_sums() {
        let cfg = RewardConfig::default();
        assert_eq!(action_reward((1.0, 1.0, 1.0), &cfg), 3.0);
        assert_eq!(action_reward((0.0, 0.0, 0.0), &cfg), 0.0);
        let heavy = RewardConfig { lambda_pos: 2.0, ..cfg.clone() };
        assert_eq!(action_reward((1.0, 1.0, 0.0), &heavy), 2.0);
        assert_eq!(total_reward(1.0, 3.0, 2.25, &cfg), 5.125);
        assert_eq!(total_reward(0.0, 0.0, 0.0, &cfg), 0.0);
        assert_eq!(total_reward(1.0, 0.0, 0.0, &cfg), 1.0);
    }

    /// Replays a fixed list of action texts, one per call.
    struct Canned {
        actions: Vec<String>,
        space: ActionSpace,
    }

    impl Policy for Canned {
        fn sample(&self, _ctx: &PolicyContext, n: usize, _m: DecodeMode, _s: u64) -> Result<Vec<SampledTurn>, PolicyError> {
            Ok(self.actions[..n]
                .iter()
                .map(|a| SampledTurn { turn: turn_with_action(a), token_ids: None, token_logprobs: None })
                .collect())
        }
        fn action_space(&self) -> &ActionSpace {
            &self.space
        }
    }

    #[test]
    fn history_reward_averages_rollouts_and_respects_gate() {
        let good = r#"{"action": "CLICK", "value": "a", "position": [0.5, 0.5]}"#.to_owned();
        let policy = Canned { actions: vec![good.clone(), "junk".into(), good.clone(), good], space: ActionSpace::guiact() };
        let next = Step {
            index: 1,
            observation: Observation { width: 1, height: 1, elements: vec![], screen_ref: None },
            gt_action: click(0.5, 0.5),
            gt_bbox: Some(BBox::new(0.4, 0.4, 0.6, 0.6)),
        };
        let cfg = RewardConfig { history_decoding: RolloutDecoding::Stochastic, ..RewardConfig::default() };
        let r = history_summary_reward("u", "h", 3.0, Some(&next), &policy, &cfg, 0).unwrap();
        assert_eq!(r, 2.25);
        assert_eq!(history_summary_reward("u", "h", 0.0, Some(&next), &policy, &cfg, 0).unwrap(), 0.0);
        assert_eq!(history_summary_reward("u", "h", 3.0, None, &policy, &cfg, 0).unwrap(), 0.0);
    }
}
