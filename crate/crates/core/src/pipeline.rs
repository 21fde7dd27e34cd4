//! Stage functions shared by the command line and the test suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::dataset::DatasetError;
use crate::grpo::{self, GrpoError, GrpoSummary, IterationLog, StepRewardRow, TrainerState};
use crate::labeler::{label_dataset, AuditRecord, LabelClient, LabelerError, PseudoLabel};
use crate::metrics::{aggregate, evaluate_policy, final_step_accuracy, ReportRow};
use crate::model::Episode;
use crate::policy::toy::{ParamsError, ToyModel, ToyPolicy};
use crate::policy::{PolicyError, Vocab};
use crate::seed::mix;
use crate::sft::{self, SftError, SftReport};
use crate::sim::{generate_range, lexicon};

pub const SEED_SFT: u64 = 1;
pub const SEED_GRPO: u64 = 2;
pub const SEED_EVAL: u64 = 3;

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Labeler(#[from] LabelerError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

pub fn stage_seed(root: u64, stage: u64) -> u64 {
    mix(root, stage)
}

/// The simulator config with its seed tied to the run's root seed.
pub fn sim_config(cfg: &RunConfig) -> crate::sim::SimConfig {
    crate::sim::SimConfig { rng_seed: cfg.seed, ..cfg.sim.clone() }
}

/// Training episodes come first; held-out episodes follow them in the same
/// seeded stream, so the two never overlap.
pub fn generate(cfg: &RunConfig) -> (Vec<Episode>, Vec<Episode>) {
    let sim = sim_config(cfg);
    let train = generate_range(&sim, 0, cfg.data.train_episodes);
    let test = generate_range(&sim, cfg.data.train_episodes, cfg.data.test_episodes);
    (train, test)
}

pub fn build_model(cfg: &RunConfig) -> ToyModel {
    let sim = sim_config(cfg);
    let vocab = Vocab::new(cfg.toy.bins, &sim.action_space(), &lexicon(&sim));
    ToyModel::new(vocab, sim.action_space(), cfg.toy.clone())
}

#[derive(Debug, Clone, Default)]
pub struct LabelOutput {
    pub labels: Vec<PseudoLabel>,
    pub audit: Vec<AuditRecord>,
    /// Episodes dropped after exhausting retries, with the reason.
    pub rejected: Vec<(String, String)>,
}

pub fn label(cfg: &RunConfig, episodes: &[Episode], client: &dyn LabelClient) -> Result<LabelOutput, StageError> {
    let mut out = LabelOutput::default();
    for (ep, res) in episodes.iter().zip(label_dataset(episodes, client, &cfg.labeler)) {
        match res {
            Ok((labels, audit)) => {
                out.labels.extend(labels);
                out.audit.extend(audit);
            }
            Err(LabelerError::RemoteUnreachable(m)) => return Err(LabelerError::RemoteUnreachable(m).into()),
            Err(e) => {
                tracing::warn!(episode = %ep.episode_id, error = %e, "trajectory rejected");
                out.rejected.push((ep.episode_id.clone(), e.to_string()));
            }
        }
    }
    Ok(out)
}

/// Episodes that have a full label set.
pub fn labeled_only(episodes: &[Episode], labels: &[PseudoLabel]) -> Vec<Episode> {
    episodes.iter().filter(|e| labels.iter().any(|l| l.episode_id == e.episode_id)).cloned().collect()
}

pub fn run_sft(
    cfg: &RunConfig,
    model: &ToyModel,
    theta: &mut [f64],
    episodes: &[Episode],
    labels: &[PseudoLabel],
) -> Result<SftReport, StageError> {
    let space = model.action_space().clone();
    let examples = sft::build_examples(model.vocab(), &labeled_only(episodes, labels), labels, &space)?;
    Ok(sft::train(model, theta, &examples, &cfg.sft, stage_seed(cfg.seed, SEED_SFT))?)
}

pub struct GrpoOutput {
    pub theta: Vec<f64>,
    pub iterations: Vec<IterationLog>,
    pub summary: GrpoSummary,
}

/// GRPO from `theta`, which also becomes the frozen reference.
pub fn run_grpo(
    cfg: &RunConfig,
    model: &Arc<ToyModel>,
    theta: Vec<f64>,
    episodes: &[Episode],
    labels: &[PseudoLabel],
    mut on_rows: impl FnMut(&IterationLog, &[StepRewardRow]),
) -> Result<GrpoOutput, StageError> {
    let contexts = grpo::build_contexts(model, &labeled_only(episodes, labels), labels)?;
    let mut state = TrainerState::new(theta, cfg.grpo.learning_rate);
    let mut iterations = Vec::with_capacity(cfg.grpo.iterations);
    let summary = grpo::train(model, &mut state, &contexts, &cfg.reward, &cfg.grpo, stage_seed(cfg.seed, SEED_GRPO), |log, rows| {
        iterations.push(log.clone());
        on_rows(log, rows);
    })?;
    let theta = Arc::try_unwrap(state.theta).unwrap_or_else(|a| a.as_ref().clone());
    Ok(GrpoOutput { theta, iterations, summary })
}

pub fn evaluate_toy(
    cfg: &RunConfig,
    model: &Arc<ToyModel>,
    theta: Vec<f64>,
    episodes: &[Episode],
    split: &str,
) -> Result<Vec<ReportRow>, StageError> {
    let policy = ToyPolicy::new(model.clone(), Arc::new(theta));
    Ok(evaluate_policy(&policy, episodes, split, stage_seed(cfg.seed, SEED_EVAL))?)
}

/// Everything one full pipeline run produces.
pub struct Experiment {
    pub sft: Option<SftReport>,
    pub grpo: GrpoOutput,
    pub rows: Vec<ReportRow>,
    pub reward_rows: Vec<StepRewardRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentOptions {
    pub cold_start: bool,
    pub keep_reward_rows: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { cold_start: true, keep_reward_rows: false }
    }
}

/// gen-data, mock labeling, optional SFT, GRPO, held-out evaluation.
pub fn run_experiment(cfg: &RunConfig, opts: ExperimentOptions) -> Result<Experiment, StageError> {
    let (train, test) = generate(cfg);
    let labels = label(cfg, &train, &crate::labeler::MockLabeler)?.labels;
    let model = Arc::new(build_model(cfg));
    let mut theta = model.zeros();
    let sft = if opts.cold_start { Some(run_sft(cfg, &model, &mut theta, &train, &labels)?) } else { None };
    let mut reward_rows = Vec::new();
    let grpo = run_grpo(cfg, &model, theta, &train, &labels, |_, rows| {
        if opts.keep_reward_rows {
            reward_rows.extend_from_slice(rows);
        }
    })?;
    let rows = evaluate_toy(cfg, &model, grpo.theta.clone(), &test, "test")?;
    Ok(Experiment { sft, grpo, rows, reward_rows })
}

/// One (seed, lambda_h) cell of the history-reward ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub lambda_h: f64,
    pub step_sr: f64,
    pub final_step_acc: f64,
    /// Mean group reward over the last 10% of iterations.
    pub late_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

impl AblationReport {
    pub fn lambdas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.lambda_h) {
                out.push(r.lambda_h);
            }
        }
        out
    }

    pub fn median_final_step_acc(&self, lambda_h: f64) -> f64 {
        median(self.rows.iter().filter(|r| r.lambda_h == lambda_h).map(|r| r.final_step_acc).collect())
    }

    pub fn median_step_sr(&self, lambda_h: f64) -> f64 {
        median(self.rows.iter().filter(|r| r.lambda_h == lambda_h).map(|r| r.step_sr).collect())
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>10} {:>6} {:>16} {:>10}\n", "lambda_h", "seeds", "final-step acc", "Step SR");
        for l in self.lambdas() {
            let n = self.rows.iter().filter(|r| r.lambda_h == l).count();
            s.push_str(&format!("{l:>10} {n:>6} {:>16.4} {:>10.4}\n", self.median_final_step_acc(l), self.median_step_sr(l)));
        }
        s.push_str("(medians over seeds)\n");
        s
    }
}

/// Full pipeline for every (lambda_h, seed) pair; `on_run` sees each finished
/// run, e.g. to persist its logs.
pub fn run_ablation(
    cfg: &RunConfig,
    seeds: &[u64],
    lambdas: &[f64],
    mut on_run: impl FnMut(&AblationRow, &Experiment) -> Result<(), StageError>,
) -> Result<AblationReport, StageError> {
    let mut report = AblationReport::default();
    for &lambda_h in lambdas {
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.reward.lambda_h = lambda_h;
            let exp = run_experiment(&run_cfg, ExperimentOptions::default())?;
            let its = &exp.grpo.iterations;
            let tail = &its[its.len() - (its.len() / 10).max(1).min(its.len())..];
            let row = AblationRow {
                seed,
                lambda_h,
                step_sr: aggregate(&exp.rows).map_err(|e| StageError::Other(e.to_string()))?.overall.step_sr,
                final_step_acc: final_step_accuracy(&exp.rows),
                late_reward: tail.iter().map(|l| l.mean_reward).sum::<f64>() / tail.len().max(1) as f64,
            };
            tracing::info!(seed, lambda_h, final_step_acc = row.final_step_acc, "ablation run");
            on_run(&row, &exp)?;
            report.rows.push(row);
        }
    }
    Ok(report)
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, StageError> {
    let bytes = std::fs::read(path).map_err(|source| StageError::Io { path: path.display().to_string(), source })?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_f64s(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Reproduction record written into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub command: Vec<String>,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, command: Vec<String>, config_text: &str) -> Self {
        Self {
            stage: stage.to_owned(),
            seed,
            command,
            config_sha256: sha256_bytes(config_text.as_bytes()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), StageError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records an output by its name relative to the run directory.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<(), StageError> {
        self.outputs.insert(name.to_owned(), sha256_file(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, StageError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| StageError::Other(e.to_string()))? + "\n";
        std::fs::write(&path, text).map_err(|source| StageError::Io { path: path.display().to_string(), source })?;
        Ok(path)
    }
}
