//! Group-relative policy optimization for the toy policy.

use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::PseudoLabel;
use crate::model::{Episode, GrpoConfig, RewardBreakdown, RewardConfig, Step};
use crate::policy::features::EncodedContext;
use crate::policy::toy::{SparseGrad, ToyModel, ToyPolicy};
use crate::policy::{DecodeMode, PolicyContext, PolicyError, SampledTurn};
use crate::rewards::score_turn;
use crate::seed::mix_all;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("parameter vectors differ in length: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("group member {0} has no token log-probabilities")]
    MissingLogprobs(usize),
    #[error("group has {found} members, expected at least 2")]
    GroupTooSmall { found: usize },
    #[error("no training contexts")]
    NoContexts,
    #[error("labels do not cover episode {0}")]
    MissingLabels(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// `(r - mean) / std` with the population std; all zeros below `epsilon`.
pub fn compute_advantages(rewards: &[f64], epsilon: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_nan() || std < epsilon {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Exact `KL(p || q)` from log-probabilities over one vocabulary.
pub fn kl_categorical(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| if lp.is_finite() { lp.exp() * (lp - lq) } else { 0.0 }).sum::<f64>().max(0.0)
}

/// One step of one trajectory, with the context the policy sees.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub episode_id: String,
    pub instruction: String,
    pub t: usize,
    pub ctx: PolicyContext,
    pub step: Step,
    pub next_step: Option<Step>,
    pub encoded: EncodedContext,
}

/// Per-step contexts along ground-truth trajectories; step `t` sees the
/// pseudo summary of step `t-1`.
pub fn build_contexts(model: &ToyModel, episodes: &[Episode], labels: &[PseudoLabel]) -> Result<Vec<TrainContext>, GrpoError> {
    let mut out = Vec::new();
    for ep in episodes {
        let mut history = String::new();
        for (t, step) in ep.steps.iter().enumerate() {
            let ctx = PolicyContext {
                instruction: ep.instruction.clone(),
                observation: step.observation.clone(),
                history: history.clone(),
            };
            out.push(TrainContext {
                episode_id: ep.episode_id.clone(),
                instruction: ep.instruction.clone(),
                t,
                encoded: model.encode(&ctx),
                ctx,
                step: step.clone(),
                next_step: ep.steps.get(t + 1).cloned(),
            });
            history = labels
                .iter()
                .find(|l| l.episode_id == ep.episode_id && l.t == t)
                .ok_or_else(|| GrpoError::MissingLabels(ep.episode_id.clone()))?
                .summary
                .clone();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub context_index: usize,
    pub members: Vec<SampledTurn>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub theta: Arc<Vec<f64>>,
    /// Sampling snapshot; `None` while it equals `theta`.
    pub theta_old: Option<Arc<Vec<f64>>>,
    pub theta_ref: Arc<Vec<f64>>,
    pub iteration: usize,
    pub learning_rate: f64,
}

impl TrainerState {
    /// Starts from `theta`, which also becomes the frozen reference.
    pub fn new(theta: Vec<f64>, learning_rate: f64) -> Self {
        let theta = Arc::new(theta);
        Self { theta_ref: Arc::new(theta.as_ref().clone()), theta, theta_old: None, iteration: 0, learning_rate }
    }

    pub fn old(&self) -> &Arc<Vec<f64>> {
        self.theta_old.as_ref().unwrap_or(&self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveValue {
    pub objective: f64,
    /// Token-weighted mean KL to the reference, same weighting as the objective.
    pub kl: f64,
    pub clipped_tokens: usize,
    pub tokens: usize,
}

/// Clipped surrogate minus the KL penalty, averaged over tokens then
/// members then groups, with its gradient. Only the unclipped branch passes
/// policy gradient; the KL term always does.
pub fn grpo_objective(
    model: &ToyModel,
    groups: &[(&EncodedContext, &RolloutGroup)],
    theta: &[f64],
    theta_ref: &[f64],
    clip_epsilon: f64,
    kl_beta: f64,
) -> Result<(ObjectiveValue, SparseGrad), GrpoError> {
    if theta.len() != theta_ref.len() {
        return Err(GrpoError::DimensionMismatch(theta.len(), theta_ref.len()));
    }
    if theta.len() != model.dim() {
        return Err(GrpoError::DimensionMismatch(theta.len(), model.dim()));
    }
    let n_groups = groups.len().max(1) as f64;
    let parts: Vec<Result<(ObjectiveValue, SparseGrad), GrpoError>> = groups
        .par_iter()
        .map(|(enc, group)| {
            let mut value = ObjectiveValue::default();
            let mut grad = SparseGrad::default();
            let g = group.members.len() as f64;
            for (i, (m, &adv)) in group.members.iter().zip(&group.advantages).enumerate() {
                let (Some(tokens), Some(old)) = (&m.token_ids, &m.token_logprobs) else {
                    return Err(GrpoError::MissingLogprobs(i));
                };
                if tokens.is_empty() {
                    continue;
                }
                let features = model.forced_features(enc, tokens).map_err(PolicyError::from)?;
                let w = 1.0 / (tokens.len() as f64 * g * n_groups);
                for ((f, &y), &lp_old) in features.iter().zip(tokens).zip(old) {
                    let lp = model.log_probs(theta, f);
                    let lq = model.log_probs(theta_ref, f);
                    let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
                    let kl = kl_categorical(&lp, &lq);
                    let b = (lp[y as usize] - lp_old).exp();
                    let unclipped = b * adv;
                    let clipped = b.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv;
                    let active = unclipped <= clipped;
                    value.objective += w * (unclipped.min(clipped) - kl_beta * kl);
                    value.kl += w * kl;
                    value.tokens += 1;
                    if !active {
                        value.clipped_tokens += 1;
                    }
                    let c1 = if active { adv * b } else { 0.0 };
                    let mut dz: Vec<f64> = p
                        .iter()
                        .zip(lp.iter().zip(&lq))
                        .map(|(pk, (lpk, lqk))| -c1 * pk - kl_beta * pk * (lpk - lqk - kl))
                        .collect();
                    dz[y as usize] += c1;
                    grad.add_logit_grad(f, &dz, w);
                }
            }
            Ok((value, grad))
        })
        .collect();
    let mut total = ObjectiveValue::default();
    let mut grad = SparseGrad::default();
    for part in parts {
        let (v, g) = part?;
        total.objective += v.objective;
        total.kl += v.kl;
        total.tokens += v.tokens;
        total.clipped_tokens += v.clipped_tokens;
        grad.merge(&g);
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_r_f: f64,
    pub mean_r_a: f64,
    pub mean_r_h: f64,
    pub objective: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewardRow {
    pub iter: usize,
    pub episode_id: String,
    pub t: usize,
    pub i: usize,
    pub r_f: f64,
    pub r_af: f64,
    pub r_type: f64,
    pub r_pos: f64,
    pub r_a: f64,
    pub r_h: f64,
    pub total: f64,
}

/// Samples and scores one group per context. History-reward rollouts run
/// through the sampling snapshot and record no gradients.
pub fn collect_groups(
    model: &Arc<ToyModel>,
    snapshot: &Arc<Vec<f64>>,
    contexts: &[TrainContext],
    batch: &[usize],
    reward_cfg: &RewardConfig,
    group_size: usize,
    seed: u64,
) -> Result<Vec<RolloutGroup>, GrpoError> {
    if group_size < 2 {
        return Err(GrpoError::GroupTooSmall { found: group_size });
    }
    let policy = ToyPolicy::new(model.clone(), snapshot.clone());
    batch
        .par_iter()
        .map(|&ci| {
            let c = &contexts[ci];
            let members = policy.sample_tokens(&c.ctx, group_size, DecodeMode::Stochastic, mix_all(&[seed, ci as u64]))?;
            let rewards = members
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let s = mix_all(&[seed, ci as u64, i as u64, 0x4853]);
                    score_turn(&m.turn, &c.instruction, &c.step, c.next_step.as_ref(), &policy, reward_cfg, s)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
            let advantages = compute_advantages(&totals, reward_cfg.advantage_epsilon);
            Ok(RolloutGroup { context_index: ci, members, rewards, advantages })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoSummary {
    pub iterations: usize,
    pub gate_violations: usize,
    pub logged_members: usize,
}

/// One iteration: sample from the snapshot, score, normalize, ascend once,
/// refresh the snapshot on schedule.
pub fn train_step(
    model: &Arc<ToyModel>,
    state: &mut TrainerState,
    contexts: &[TrainContext],
    reward_cfg: &RewardConfig,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<(IterationLog, Vec<RolloutGroup>), GrpoError> {
    if contexts.is_empty() {
        return Err(GrpoError::NoContexts);
    }
    let iter = state.iteration;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_all(&[seed, iter as u64, 0xBA7C]));
    let mut batch = index::sample(&mut rng, contexts.len(), cfg.batch_size.min(contexts.len())).into_vec();
    batch.sort_unstable();
    let groups = collect_groups(model, state.old(), contexts, &batch, reward_cfg, cfg.group_size, mix_all(&[seed, iter as u64]))?;

    let pairs: Vec<(&EncodedContext, &RolloutGroup)> = groups.iter().map(|g| (&contexts[g.context_index].encoded, g)).collect();
    let (value, grad) = grpo_objective(model, &pairs, &state.theta, &state.theta_ref, cfg.clip_epsilon, cfg.kl_beta)?;
    drop(pairs);
    grad.axpy(model, Arc::make_mut(&mut state.theta).as_mut_slice(), state.learning_rate);

    state.iteration += 1;
    if cfg.old_refresh_every == 1 {
        state.theta_old = None;
    } else if state.iteration.is_multiple_of(cfg.old_refresh_every) || state.theta_old.is_none() {
        state.theta_old = Some(Arc::new(state.theta.as_ref().clone()));
    }

    let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
    let n = all.len().max(1) as f64;
    let mean = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / n;
    let log = IterationLog {
        iter,
        mean_reward: mean(|r| r.total),
        mean_r_f: mean(|r| r.r_f),
        mean_r_a: mean(|r| r.r_a),
        mean_r_h: mean(|r| r.r_h),
        objective: value.objective,
        kl: value.kl,
    };
    Ok((log, groups))
}

pub fn reward_rows(iter: usize, contexts: &[TrainContext], groups: &[RolloutGroup]) -> Vec<StepRewardRow> {
    groups
        .iter()
        .flat_map(|g| {
            let c = &contexts[g.context_index];
            g.rewards.iter().enumerate().map(move |(i, r)| StepRewardRow {
                iter,
                episode_id: c.episode_id.clone(),
                t: c.t,
                i,
                r_f: r.r_f,
                r_af: r.r_af,
                r_type: r.r_type,
                r_pos: r.r_pos,
                r_a: r.r_a,
                r_h: r.r_h,
                total: r.total,
            })
        })
        .collect()
}

/// Runs `cfg.iterations` steps, handing every iteration's logs to `sink`.
pub fn train(
    model: &Arc<ToyModel>,
    state: &mut TrainerState,
    contexts: &[TrainContext],
    reward_cfg: &RewardConfig,
    cfg: &GrpoConfig,
    seed: u64,
    mut sink: impl FnMut(&IterationLog, &[StepRewardRow]),
) -> Result<GrpoSummary, GrpoError> {
    let mut summary = GrpoSummary { iterations: 0, gate_violations: 0, logged_members: 0 };
    for _ in 0..cfg.iterations {
        let (log, groups) = train_step(model, state, contexts, reward_cfg, cfg, seed)?;
        let rows = reward_rows(log.iter, contexts, &groups);
        summary.logged_members += rows.len();
        summary.gate_violations += rows.iter().filter(|r| r.r_a == 0.0 && r.r_h != 0.0).count();
        summary.iterations += 1;
        if log.iter % 100 == 0 {
            tracing::info!(iter = log.iter, reward = log.mean_reward, kl = log.kl, "grpo");
        }
        sink(&log, &rows);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::toy::ToyConfig;
    use crate::policy::Vocab;
    use crate::sim::{generate_range, lexicon, SimConfig};
    use rand::Rng;

    fn small_model() -> Arc<ToyModel> {
        let sim = SimConfig::default();
        let vocab = Vocab::new(20, &sim.action_space(), &lexicon(&sim));
        Arc::new(ToyModel::new(vocab, sim.action_space(), ToyConfig { dense_rows: 512, pointer_slots: 128, bins: 20, max_len: 40 }))
    }

    fn random_theta(model: &ToyModel, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        (0..model.dim()).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn contexts(model: &ToyModel, n: usize) -> Vec<(PolicyContext, EncodedContext)> {
        generate_range(&SimConfig::default(), 0, n)
            .into_iter()
            .map(|ep| {
                let ctx = PolicyContext { instruction: ep.instruction.clone(), observation: ep.steps[0].observation.clone(), history: String::new() };
                let enc = model.encode(&ctx);
                (ctx, enc)
            })
            .collect()
    }

    fn groups_from(model: &Arc<ToyModel>, old: &Arc<Vec<f64>>, ctxs: &[(PolicyContext, EncodedContext)], g: usize, seed: u64) -> Vec<RolloutGroup> {
        let policy = ToyPolicy::new(model.clone(), old.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ctxs.iter()
            .enumerate()
            .map(|(ci, (ctx, _))| {
                let members = policy.sample_tokens(ctx, g, DecodeMode::Stochastic, mix_all(&[seed, ci as u64])).unwrap();
                let raw: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..5.0)).collect();
                RolloutGroup { context_index: ci, members, rewards: Vec::new(), advantages: compute_advantages(&raw, 1e-8) }
            })
            .collect()
    }

    fn pairs<'a>(ctxs: &'a [(PolicyContext, EncodedContext)], groups: &'a [RolloutGroup]) -> Vec<(&'a EncodedContext, &'a RolloutGroup)> {
        groups.iter().map(|g| (&ctxs[g.context_index].1, g)).collect()
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[0.0, 1.0], 1e-8), vec![-1.0, 1.0]);
        assert_eq!(compute_advantages(&[2.0; 4], 1e-8), vec![0.0; 4]);
        let a = compute_advantages(&[1.0, 2.0, 3.0, 4.0], 1e-8);
        for (x, e) in a.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((x - e).abs() < 1e-4);
        }
    }

    #[test]
    fn kl_examples() {
        let p = [0.5f64.ln(), 0.5f64.ln()];
        let q = [0.9f64.ln(), 0.1f64.ln()];
        assert!((kl_categorical(&p, &q) - 0.5108).abs() < 1e-4);
        assert_eq!(kl_categorical(&p, &p), 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let model = small_model();
        let ctxs = contexts(&model, 2);
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let old = Arc::new(random_theta(&model, &mut rng, 0.5));
            let groups = groups_from(&model, &old, &ctxs, 3, seed);
            let p = pairs(&ctxs, &groups);
            let mut theta = old.as_ref().clone();
            for v in theta.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
            let reference = random_theta(&model, &mut rng, 0.5);
            let (_, grad) = grpo_objective(&model, &p, &theta, &reference, 0.2, 0.1).unwrap();
            let dense = grad.to_dense(&model);
            let mut coords: Vec<usize> = (0..dense.len()).filter(|&k| dense[k].abs() > 1e-6).collect();
            coords.sort_by(|a, b| dense[*b].abs().total_cmp(&dense[*a].abs()));
            coords.truncate(12);
            assert!(!coords.is_empty());
            let h = 1e-5;
            for k in coords {
                let mut plus = theta.clone();
                plus[k] += h;
                let mut minus = theta.clone();
                minus[k] -= h;
                let fp = grpo_objective(&model, &p, &plus, &reference, 0.2, 0.1).unwrap().0.objective;
                let fm = grpo_objective(&model, &p, &minus, &reference, 0.2, 0.1).unwrap().0.objective;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - dense[k]).abs() / dense[k].abs().max(fd.abs());
                assert!(rel < 1e-4, "seed {seed} coord {k}: analytic {} fd {fd}", dense[k]);
            }
        }
    }

    #[test]
    fn objective_vanishes_when_all_parameters_agree() {
        let model = small_model();
        let ctxs = contexts(&model, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = Arc::new(random_theta(&model, &mut rng, 0.3));
        let groups = groups_from(&model, &theta, &ctxs, 4, 9);
        let (v, _) = grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &theta, 0.2, 0.04).unwrap();
        assert!(v.objective.abs() < 1e-12, "{}", v.objective);
        assert_eq!(v.kl, 0.0);
        assert_eq!(v.clipped_tokens, 0);
    }

    /// Ratio 1.3 with epsilon 0.2 is clipped to 1.2 for a positive advantage
    /// and left alone for a negative one.
    #[test]
    fn clipping_example() {
        let model = small_model();
        let ctxs = contexts(&model, 1);
        let theta = Arc::new(model.zeros());
        let mut groups = groups_from(&model, &theta, &ctxs, 2, 1);
        for m in &mut groups[0].members {
            for lp in m.token_logprobs.as_mut().unwrap() {
                *lp -= 1.3f64.ln();
            }
        }
        groups[0].advantages = vec![1.0, 1.0];
        let (v, grad) = grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &theta, 0.2, 0.0).unwrap();
        assert!((v.objective - 1.2).abs() < 1e-12);
        assert_eq!(v.clipped_tokens, v.tokens);
        assert_eq!(grad.norm_sq(), 0.0);

        groups[0].advantages = vec![-1.0, -1.0];
        let (v, grad) = grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &theta, 0.2, 0.0).unwrap();
        assert!((v.objective + 1.3).abs() < 1e-12);
        assert_eq!(v.clipped_tokens, 0);
        assert!(grad.norm_sq() > 0.0);
    }

    /// At the sampling snapshot with no KL term the gradient is the
    /// advantage-weighted score function.
    #[test]
    fn reinforce_equivalence_at_snapshot() {
        let model = small_model();
        let ctxs = contexts(&model, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = Arc::new(random_theta(&model, &mut rng, 0.4));
        let groups = groups_from(&model, &theta, &ctxs, 4, 3);
        let (_, grad) = grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &theta, 0.2, 0.0).unwrap();
        let mut expected = vec![0.0; model.dim()];
        let n_groups = groups.len() as f64;
        for g in &groups {
            let gs = g.members.len() as f64;
            for (m, adv) in g.members.iter().zip(&g.advantages) {
                let tokens = m.token_ids.as_ref().unwrap();
                let (_, sg) = model.logprob_and_grad(&theta, &ctxs[g.context_index].0, tokens).unwrap();
                let w = adv / (tokens.len() as f64 * gs * n_groups);
                sg.axpy(&model, &mut expected, w);
            }
        }
        let got = grad.to_dense(&model);
        let err = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = expected.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(scale > 0.0 && err <= 1e-10 * scale.max(1.0), "err {err}");
    }

    /// Rewards enter only through the advantage scalars, and the gradient
    /// only touches features of the group's own tokens.
    #[test]
    fn gradient_path_audit() {
        let model = small_model();
        let ctxs = contexts(&model, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = Arc::new(random_theta(&model, &mut rng, 0.3));
        let mut groups = groups_from(&model, &theta, &ctxs, 3, 8);
        let (_, a) = grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &theta, 0.2, 0.04).unwrap();
        for g in &mut groups {
            g.rewards = vec![RewardBreakdown { r_h: 123.0, ..Default::default() }; g.members.len()];
        }
        let (_, b) = grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &theta, 0.2, 0.04).unwrap();
        assert_eq!(a.to_dense(&model), b.to_dense(&model));

        let mut rows = std::collections::HashSet::new();
        let mut slots = std::collections::HashSet::new();
        for g in &groups {
            for m in &g.members {
                for f in model.forced_features(&ctxs[g.context_index].1, m.token_ids.as_ref().unwrap()).unwrap() {
                    rows.extend(f.rows);
                    slots.extend(f.pointers.iter().map(|p| p.0));
                }
            }
        }
        assert!(a.rows.keys().all(|r| rows.contains(r)));
        assert!(a.pointers.keys().all(|s| slots.contains(s)));
    }

    #[test]
    fn rejects_mismatched_dimensions_and_missing_logprobs() {
        let model = small_model();
        let ctxs = contexts(&model, 1);
        let theta = Arc::new(model.zeros());
        let mut groups = groups_from(&model, &theta, &ctxs, 2, 0);
        let short = vec![0.0; 3];
        assert!(matches!(grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &short, 0.2, 0.0), Err(GrpoError::DimensionMismatch(..))));
        groups[0].members[1].token_logprobs = None;
        assert_eq!(grpo_objective(&model, &pairs(&ctxs, &groups), &theta, &theta, 0.2, 0.0).unwrap_err(), GrpoError::MissingLogprobs(1));
    }

    #[test]
    fn train_step_is_deterministic() {
        let model = small_model();
        let episodes = generate_range(&SimConfig::default(), 0, 4);
        let labels: Vec<PseudoLabel> = episodes
            .iter()
            .flat_map(|ep| crate::labeler::label_trajectory(ep, &crate::labeler::MockLabeler, &Default::default()).unwrap().0)
            .collect();
        let examples = crate::sft::build_examples(model.vocab(), &episodes, &labels, model.action_space()).unwrap();
        let mut warm = model.zeros();
        let sft_cfg = crate::sft::SftConfig { epochs: 3, ..Default::default() };
        crate::sft::train(&model, &mut warm, &examples, &sft_cfg, 1).unwrap();
        let ctxs = build_contexts(&model, &episodes, &labels).unwrap();
        let cfg = GrpoConfig { group_size: 4, iterations: 3, ..Default::default() };
        let run = || {
            let mut state = TrainerState::new(warm.clone(), 0.1);
            let mut logs = Vec::new();
            train(&model, &mut state, &ctxs, &RewardConfig::default(), &cfg, 17, |l, _| logs.push(l.clone())).unwrap();
            (state.theta.as_ref().clone(), logs)
        };
        let (ta, la) = run();
        let (tb, lb) = run();
        assert_eq!(la, lb);
        assert!(ta.iter().zip(&tb).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(ta.iter().zip(&warm).any(|(a, b)| a != b));
    }
}
