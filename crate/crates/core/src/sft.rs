//! Cold-start supervised training on pseudo-labeled trajectories.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{serialize_turn, GrammarError};
use crate::labeler::PseudoLabel;
use crate::model::{ActionSpace, ConfigViolation, Episode};
use crate::policy::features::PositionFeatures;
use crate::policy::toy::{SparseGrad, ToyModel};
use crate::policy::vocab::{Vocab, VocabError, EOS};
use crate::policy::PolicyContext;
use crate::seed::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { epochs: 60, learning_rate: 0.5, batch_size: 8 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), ConfigViolation> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigViolation::new("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ConfigViolation::new("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SftError {
    #[error("episode {episode_id}: expected label for step {expected}, found {found:?}")]
    OutOfOrder { episode_id: String, expected: usize, found: Option<usize> },
    #[error("episode {0} has no labels")]
    Unlabeled(String),
    #[error("label {episode_id}/{t}: {source}")]
    Grammar { episode_id: String, t: usize, source: GrammarError },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("empty target sequence")]
    EmptyTarget,
}

/// Target token ids for one label, terminated by `<eos>`.
pub fn build_target(vocab: &Vocab, label: &PseudoLabel, space: &ActionSpace) -> Result<Vec<u32>, SftError> {
    let text = serialize_turn(&label.progress, &label.decision, &label.gt_action, &label.summary, space).map_err(|source| {
        SftError::Grammar { episode_id: label.episode_id.clone(), t: label.t, source }
    })?;
    let mut ids = vocab.tokenize(&text);
    ids.push(EOS);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub ctx: PolicyContext,
    pub target: Vec<u32>,
}

/// Pairs each step with its label; the context history of step `t` is the
/// pseudo summary of step `t-1`. Labels must cover every step in order.
pub fn build_examples(
    vocab: &Vocab,
    episodes: &[Episode],
    labels: &[PseudoLabel],
    space: &ActionSpace,
) -> Result<Vec<SftExample>, SftError> {
    let mut out = Vec::new();
    for ep in episodes {
        let mine: Vec<&PseudoLabel> = labels.iter().filter(|l| l.episode_id == ep.episode_id).collect();
        if mine.is_empty() {
            return Err(SftError::Unlabeled(ep.episode_id.clone()));
        }
        let mut history = String::new();
        for (t, step) in ep.steps.iter().enumerate() {
            let label = match mine.get(t) {
                Some(l) if l.t == t => *l,
                other => {
                    return Err(SftError::OutOfOrder {
                        episode_id: ep.episode_id.clone(),
                        expected: t,
                        found: other.map(|l| l.t),
                    })
                }
            };
            out.push(SftExample {
                ctx: PolicyContext {
                    instruction: ep.instruction.clone(),
                    observation: step.observation.clone(),
                    history: history.clone(),
                },
                target: build_target(vocab, label, space)?,
            });
            history = label.summary.clone();
        }
    }
    Ok(out)
}

/// `-sum_j log P(y_j | y_<j, ctx)` and its gradient.
pub fn ce_loss(model: &ToyModel, theta: &[f64], ctx: &PolicyContext, y: &[u32]) -> Result<(f64, SparseGrad), SftError> {
    if y.is_empty() {
        return Err(SftError::EmptyTarget);
    }
    let (lp, mut grad) = model.logprob_and_grad(theta, ctx, y)?;
    for row in grad.rows.values_mut() {
        row.iter_mut().for_each(|x| *x = -*x);
    }
    grad.pointers.values_mut().for_each(|x| *x = -*x);
    Ok((-lp.iter().sum::<f64>(), grad))
}

fn loss_and_grad(model: &ToyModel, theta: &[f64], features: &[PositionFeatures], y: &[u32]) -> (f64, SparseGrad) {
    let scored = model.score_features(theta, features.to_vec(), y);
    let mut grad = SparseGrad::default();
    let mut loss = 0.0;
    for ((f, lp), &t) in features.iter().zip(&scored.log_probs).zip(y) {
        loss -= lp[t as usize];
        let mut g: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        g[t as usize] -= 1.0;
        grad.add_logit_grad(f, &g, 1.0);
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub initial_loss: f64,
    /// Mean per-example loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn mean_loss(model: &ToyModel, theta: &[f64], examples: &[SftExample]) -> Result<f64, SftError> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| ce_loss(model, theta, &e.ctx, &e.target).map(|(l, _)| l))
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Minibatch gradient descent on the summed token loss, averaged over the
/// batch. Deterministic in `seed`.
pub fn train(
    model: &ToyModel,
    theta: &mut [f64],
    examples: &[SftExample],
    cfg: &SftConfig,
    seed: u64,
) -> Result<SftReport, SftError> {
    let cached: Vec<Vec<PositionFeatures>> = examples
        .par_iter()
        .map(|e| model.forced_features(&model.encode(&e.ctx), &e.target))
        .collect::<Result<_, _>>()?;
    let initial_loss = mean_loss(model, theta, examples)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(f64, SparseGrad)> = batch
                .par_iter()
                .map(|&i| loss_and_grad(model, theta, &cached[i], &examples[i].target))
                .collect();
            let mut grad = SparseGrad::default();
            for (l, g) in &parts {
                total += l;
                grad.merge(g);
            }
            grad.axpy(model, theta, -cfg.learning_rate / batch.len() as f64);
        }
        epoch_losses.push(total / examples.len().max(1) as f64);
        tracing::debug!(epoch, loss = epoch_losses[epoch], "sft epoch");
    }
    Ok(SftReport { initial_loss, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_turn;
    use crate::labeler::{label_trajectory, LabelerConfig, MockLabeler};
    use crate::policy::toy::ToyConfig;
    use crate::sim::{generate_dataset, lexicon, SimConfig};

    fn setup(n: usize) -> (ToyModel, Vec<Episode>, Vec<PseudoLabel>) {
        let sim = SimConfig { rng_seed: 4, ..SimConfig::default() };
        let eps = generate_dataset(&sim, n);
        let labels: Vec<PseudoLabel> =
            eps.iter().flat_map(|e| label_trajectory(e, &MockLabeler, &LabelerConfig::default()).unwrap().0).collect();
        let vocab = Vocab::new(20, &sim.action_space(), &lexicon(&sim));
        let model = ToyModel::new(vocab, sim.action_space(), ToyConfig { dense_rows: 1 << 10, pointer_slots: 1 << 9, ..ToyConfig::default() });
        (model, eps, labels)
    }

    #[test]
    fn targets_round_trip_and_keep_tags() {
        let (model, eps, labels) = setup(3);
        let space = model.action_space().clone();
        for l in &labels {
            let y = build_target(model.vocab(), l, &space).unwrap();
            let turn = parse_turn(&model.vocab().detokenize(&y).unwrap(), &space);
            assert!(turn.tags_ok);
            assert_eq!(turn.history_summary, l.summary);
            let a = turn.parsed_action.unwrap();
            assert_eq!(a.action_type, l.gt_action.action_type);
            let ep = eps.iter().find(|e| e.episode_id == l.episode_id).unwrap();
            assert!(ep.steps[l.t].gt_bbox.unwrap().contains(a.position.unwrap()));
        }
        let empty = PseudoLabel { progress: String::new(), decision: String::new(), summary: String::new(), ..labels[0].clone() };
        let y = build_target(model.vocab(), &empty, &space).unwrap();
        for k in 0..4 {
            assert!(y.contains(&model.vocab().tag_open_id(k)) && y.contains(&model.vocab().tag_close_id(k)));
        }
        let odd = PseudoLabel { summary: "zebra.".into(), ..labels[0].clone() };
        assert!(build_target(model.vocab(), &odd, &space).unwrap().contains(&crate::policy::vocab::UNK));
    }

    #[test]
    fn examples_chain_pseudo_summaries_and_reject_gaps() {
        let (model, eps, labels) = setup(2);
        let space = model.action_space().clone();
        let ex = build_examples(model.vocab(), &eps, &labels, &space).unwrap();
        assert_eq!(ex[0].ctx.history, "");
        assert_eq!(ex[1].ctx.history, labels[0].summary);
        let mut shuffled = labels.clone();
        shuffled.swap(0, 1);
        assert!(matches!(build_examples(model.vocab(), &eps, &shuffled, &space), Err(SftError::OutOfOrder { .. })));
    }

    #[test]
    fn uniform_loss_and_training_progress() {
        let (model, eps, labels) = setup(10);
        let space = model.action_space().clone();
        let ex = build_examples(model.vocab(), &eps, &labels, &space).unwrap();
        let mut theta = model.zeros();
        let (l0, _) = ce_loss(&model, &theta, &ex[0].ctx, &ex[0].target).unwrap();
        let expect = ex[0].target.len() as f64 * (model.vocab().len() as f64).ln();
        assert!((l0 - expect).abs() < 1e-9);
        let report = train(&model, &mut theta, &ex, &SftConfig { epochs: 5, ..SftConfig::default() }, 1).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);
        assert!(mean_loss(&model, &theta, &ex).unwrap() >= 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::Rng;
        let (model, eps, labels) = setup(3);
        let space = model.action_space().clone();
        let ex = build_examples(model.vocab(), &eps, &labels, &space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
        for e in ex.iter().take(4) {
            let (_, grad) = ce_loss(&model, &theta, &e.ctx, &e.target).unwrap();
            let dense = grad.to_dense(&model);
            let mut coords: Vec<usize> = (0..dense.len()).filter(|&k| dense[k].abs() > 1e-6).collect();
            coords.sort_by(|a, b| dense[*b].abs().total_cmp(&dense[*a].abs()));
            coords.truncate(10);
            for k in coords {
                let h = 1e-5;
                let mut t = theta.clone();
                t[k] += h;
                let fp = ce_loss(&model, &t, &e.ctx, &e.target).unwrap().0;
                t[k] -= 2.0 * h;
                let fm = ce_loss(&model, &t, &e.ctx, &e.target).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - dense[k]).abs() / dense[k].abs().max(fd.abs()) < 1e-4, "coord {k}: {} vs {fd}", dense[k]);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::policy::toy::ToyConfig;
    use crate::policy::PolicyContext;
    use crate::sim::{generate_dataset, lexicon, SimConfig};
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn loss_is_non_negative(seed in any::<u64>(), scale in 0.0f64..3.0, len in 1usize..30) {
            let sim = SimConfig::default();
            let vocab = Vocab::new(20, &sim.action_space(), &lexicon(&sim));
            let model = ToyModel::new(vocab, sim.action_space(), ToyConfig { dense_rows: 64, pointer_slots: 32, ..ToyConfig::default() });
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let ep = &generate_dataset(&SimConfig { rng_seed: seed, ..sim }, 1)[0];
            let ctx = PolicyContext { instruction: ep.instruction.clone(), observation: ep.steps[0].observation.clone(), history: String::new() };
            let y: Vec<u32> = (0..len).map(|_| rng.random_range(0..model.vocab().len() as u32)).collect();
            let (loss, _) = ce_loss(&model, &theta, &ctx, &y).unwrap();
            prop_assert!(loss >= 0.0 && loss.is_finite());
        }
    }
}
