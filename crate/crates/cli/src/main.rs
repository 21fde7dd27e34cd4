//! `navrl`: data generation, labeling, SFT, GRPO, evaluation and curves.
//!
//! Every subcommand writes into one run directory (`--out`) holding the
//! resolved `config.toml`, the root `seed` and a `manifest.json` with
//! SHA-256 digests of inputs and outputs.

mod curves;
mod spec;

use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use tracing_subscriber::EnvFilter;

use navrl_client::Client;
use navrl_core::config::{ConfigError, RunConfig};
use navrl_core::dataset::{self, PSEUDO_LABELS_KIND};
use navrl_core::grpo::{IterationLog, StepRewardRow};
use navrl_core::labeler::{AuditRecord, MockLabeler, PseudoLabel, RemoteLabeler};
use navrl_core::metrics::{aggregate, evaluate_policy, ReportRow};
use navrl_core::model::Episode;
use navrl_core::pipeline::{self, stage_seed, Manifest, StageError, SEED_EVAL};
use navrl_core::policy::remote::RemotePolicy;
use navrl_core::policy::scripted::{ScriptedCorrupt, ScriptedOracle};
use navrl_core::policy::toy::{ToyModel, ToyPolicy};
use navrl_core::policy::Policy;
use navrl_core::sim::TaskFamily;
use navrl_server::AppState;

use spec::{LabelerSpec, PolicySpec};

/// Verbosity variables, first match wins. The second is the legacy name.
const LOG_ENVS: [&str; 2] = ["NAVRL_LOG", "GUIRISE_LOG"];
const AUDIT_KIND: &str = "label-audit";

#[derive(Debug, Parser)]
#[command(name = "navrl", version, about = "Train and evaluate reasoning GUI navigation agents on a synthetic simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for this command's outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and held-out episodes.
    GenData {
        /// Training episodes (overrides `data.train_episodes`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Held-out episodes (overrides `data.test_episodes`).
        #[arg(long)]
        test_episodes: Option<usize>,
        /// click-sequence | fill-and-submit | search-then-select | memory-probe
        #[arg(long)]
        family: Option<TaskFamily>,
    },
    /// Pseudo-label the training episodes.
    Label {
        /// A gen-data run directory.
        #[arg(long)]
        data: PathBuf,
        /// `mock` or `remote:URL`.
        #[arg(long, default_value = "mock")]
        labeler: LabelerSpec,
    },
    /// Supervised cold start on pseudo-labeled episodes.
    Sft {
        #[arg(long)]
        data: PathBuf,
        /// A label run directory.
        #[arg(long)]
        labels: PathBuf,
    },
    /// GRPO from an SFT checkpoint (or from zero without `--init`).
    Grpo {
        #[arg(long)]
        data: PathBuf,
        /// A label run directory.
        #[arg(long)]
        labels: PathBuf,
        /// Parameter file to start from; it also becomes the KL reference.
        #[arg(long)]
        init: Option<PathBuf>,
        /// History reward weight (overrides `reward.lambda_h`).
        #[arg(long)]
        lambda_h: Option<f64>,
        /// Overrides `grpo.iterations`.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Greedy evaluation on a data split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        /// toy | scripted-oracle | scripted-corrupt:P | remote:URL
        #[arg(long, default_value = "toy")]
        policy: PolicySpec,
        /// Parameter file for the toy policy.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Turn a grpo run's logs into plot-ready series.
    Curves {
        /// A grpo run directory.
        #[arg(long)]
        run: PathBuf,
        /// Trailing moving-average window.
        #[arg(long, default_value_t = 25)]
        window: usize,
    },
    /// Full pipeline per (lambda_h, seed) with a comparison table.
    Ablation {
        /// Root seeds, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// History reward weights to compare.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0")]
        lambda_h: Vec<f64>,
        #[arg(long, default_value = "memory-probe")]
        family: TaskFamily,
    },
    /// Serve rollouts, labels and stateless operations over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Policy behind /v1/rollout: toy | scripted-oracle | scripted-corrupt:P.
        #[arg(long)]
        policy: Option<PolicySpec>,
        /// Parameter file for the toy policy.
        #[arg(long)]
        params: Option<PathBuf>,
        /// gen-data directory for scripted policies.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Stage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

macro_rules! stage_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Stage(e.to_string())
            }
        }
    )*};
}
stage_errors!(
    StageError,
    std::io::Error,
    csv::Error,
    dataset::DatasetError,
    navrl_core::policy::toy::ParamsError,
    navrl_core::policy::PolicyError,
    navrl_core::metrics::MetricsError
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = LOG_ENVS.iter().find_map(|v| EnvFilter::try_from_env(v).ok()).unwrap_or_else(|| EnvFilter::new("info"));
    let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
    tracing_subscriber::fmt().with_env_filter(filter).with_ansi(ansi).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Run directory plus the manifest being assembled for it.
struct RunDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    fn create(stage: &str, out: Option<&Path>, cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs").join(format!("{stage}-{}", cfg.seed)));
        fs::create_dir_all(&dir)?;
        let text = cfg.to_toml();
        fs::write(dir.join("config.toml"), &text)?;
        fs::write(dir.join("seed"), format!("{}\n", cfg.seed))?;
        let command = std::iter::once("navrl".to_owned()).chain(std::env::args().skip(1)).collect();
        let mut manifest = Manifest::new(stage, cfg.seed, command, &text);
        manifest.add_output(&dir, "config.toml")?;
        manifest.add_output(&dir, "seed")?;
        Ok(Self { dir, manifest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        Ok(self.manifest.add_input(path)?)
    }

    fn output(&mut self, name: &str) -> Result<(), CliError> {
        Ok(self.manifest.add_output(&self.dir, name)?)
    }

    fn finish(self) -> Result<PathBuf, CliError> {
        self.manifest.write(&self.dir)?;
        println!("wrote {}", self.dir.display());
        Ok(self.dir)
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_split(dir: &Path, split: &str) -> Result<(PathBuf, Vec<Episode>), CliError> {
    let path = dir.join(format!("{split}.jsonl"));
    let eps = dataset::load_episodes(&path).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?;
    Ok((path, eps))
}

fn load_labels(dir: &Path) -> Result<(PathBuf, Vec<PseudoLabel>), CliError> {
    let path = dir.join("labels.jsonl");
    let labels = dataset::load(&path, PSEUDO_LABELS_KIND).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?;
    Ok((path, labels))
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Stage(e.to_string()))?;
    }
    let mut cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_deref();
    match cli.command {
        Command::GenData { episodes, test_episodes, family } => {
            if let Some(n) = episodes {
                cfg.data.train_episodes = n;
            }
            if let Some(n) = test_episodes {
                cfg.data.test_episodes = n;
            }
            if let Some(f) = family {
                cfg.sim.family = f;
            }
            cfg.validate()?;
            gen_data(&cfg, out)
        }
        Command::Label { data, labeler } => {
            cfg.validate()?;
            label(&cfg, out, &data, &labeler)
        }
        Command::Sft { data, labels } => {
            cfg.validate()?;
            sft(&cfg, out, &data, &labels)
        }
        Command::Grpo { data, labels, init, lambda_h, iterations } => {
            if let Some(l) = lambda_h {
                cfg.reward.lambda_h = l;
            }
            if let Some(n) = iterations {
                cfg.grpo.iterations = n;
            }
            cfg.validate()?;
            grpo(&cfg, out, &data, &labels, init.as_deref())
        }
        Command::Eval { data, split, policy, params } => {
            cfg.validate()?;
            eval(&cfg, out, &data, &split, &policy, params.as_deref())
        }
        Command::Curves { run, window } => {
            if window == 0 {
                return Err(CliError::Config("--window must be at least 1".into()));
            }
            let mut rd = RunDir::create("curves", out, &cfg)?;
            let files = curves::export(&run, &rd.path("curves.csv"), window)?;
            for f in files {
                rd.input(&f)?;
            }
            rd.output("curves.csv")?;
            rd.finish().map(drop)
        }
        Command::Ablation { seeds, lambda_h, family } => {
            cfg.sim.family = family;
            cfg.validate()?;
            if seeds.is_empty() || lambda_h.is_empty() {
                return Err(CliError::Config("--seeds and --lambda-h need at least one value".into()));
            }
            ablation(&cfg, out, &seeds, &lambda_h)
        }
        Command::Serve { addr, policy, params, data } => {
            cfg.validate()?;
            serve(&cfg, addr, policy.as_ref(), params.as_deref(), data.as_deref())
        }
    }
}

fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let mut rd = RunDir::create("gen-data", out, cfg)?;
    let (train, test) = pipeline::generate(cfg);
    dataset::save_episodes(&rd.path("train.jsonl"), &train)?;
    dataset::save_episodes(&rd.path("test.jsonl"), &test)?;
    rd.output("train.jsonl")?;
    rd.output("test.jsonl")?;
    tracing::info!(train = train.len(), test = test.len(), family = %cfg.sim.family, "episodes written");
    rd.finish().map(drop)
}

fn label(cfg: &RunConfig, out: Option<&Path>, data: &Path, labeler: &LabelerSpec) -> Result<(), CliError> {
    let mut rd = RunDir::create("label", out, cfg)?;
    let (path, train) = load_split(data, "train")?;
    rd.input(&path)?;
    let result = match labeler {
        LabelerSpec::Mock => pipeline::label(cfg, &train, &MockLabeler)?,
        LabelerSpec::Remote(url) => {
            let client = RemoteLabeler { client: Client::new(url, Duration::from_secs(120)) };
            pipeline::label(cfg, &train, &client)?
        }
    };
    dataset::save(&rd.path("labels.jsonl"), PSEUDO_LABELS_KIND, &result.labels)?;
    dataset::save::<AuditRecord>(&rd.path("audit.jsonl"), AUDIT_KIND, &result.audit)?;
    #[derive(serde::Serialize)]
    struct Rejected<'a> {
        episode_id: &'a str,
        reason: &'a str,
    }
    let rejected: Vec<Rejected> = result.rejected.iter().map(|(e, r)| Rejected { episode_id: e, reason: r }).collect();
    write_csv(&rd.path("rejected.csv"), &rejected)?;
    for name in ["labels.jsonl", "audit.jsonl", "rejected.csv"] {
        rd.output(name)?;
    }
    tracing::info!(labels = result.labels.len(), rejected = result.rejected.len(), "labeling done");
    rd.finish().map(drop)
}

fn sft(cfg: &RunConfig, out: Option<&Path>, data: &Path, labels: &Path) -> Result<(), CliError> {
    let mut rd = RunDir::create("sft", out, cfg)?;
    let (ep_path, train) = load_split(data, "train")?;
    let (lab_path, labels) = load_labels(labels)?;
    rd.input(&ep_path)?;
    rd.input(&lab_path)?;
    let model = pipeline::build_model(cfg);
    let mut theta = model.zeros();
    let report = pipeline::run_sft(cfg, &model, &mut theta, &train, &labels)?;
    model.save_params(&rd.path("params.bin"), &theta)?;
    #[derive(serde::Serialize)]
    struct LossRow {
        epoch: usize,
        loss: f64,
    }
    let mut rows = vec![LossRow { epoch: 0, loss: report.initial_loss }];
    rows.extend(report.epoch_losses.iter().enumerate().map(|(i, l)| LossRow { epoch: i + 1, loss: *l }));
    write_csv(&rd.path("sft_loss.csv"), &rows)?;
    rd.output("params.bin")?;
    rd.output("sft_loss.csv")?;
    println!("sft loss {:.4} -> {:.4}", report.initial_loss, report.epoch_losses.last().copied().unwrap_or(report.initial_loss));
    rd.finish().map(drop)
}

fn load_toy(cfg: &RunConfig, params: Option<&Path>) -> Result<(Arc<ToyModel>, Vec<f64>), CliError> {
    match params {
        Some(p) => {
            let (model, theta) = ToyModel::load_params(p)?;
            Ok((Arc::new(model), theta))
        }
        None => {
            let model = pipeline::build_model(cfg);
            let theta = model.zeros();
            Ok((Arc::new(model), theta))
        }
    }
}

fn grpo(cfg: &RunConfig, out: Option<&Path>, data: &Path, labels: &Path, init: Option<&Path>) -> Result<(), CliError> {
    let mut rd = RunDir::create("grpo", out, cfg)?;
    let (ep_path, train) = load_split(data, "train")?;
    let (lab_path, labels) = load_labels(labels)?;
    rd.input(&ep_path)?;
    rd.input(&lab_path)?;
    if let Some(p) = init {
        rd.input(p)?;
    }
    let (model, theta) = load_toy(cfg, init)?;

    // Both logs stream through single writers as iterations finish.
    let mut iter_log = csv::Writer::from_writer(BufWriter::new(File::create(rd.path("iterations.csv"))?));
    let mut reward_log = csv::Writer::from_writer(BufWriter::new(File::create(rd.path("rewards.csv"))?));
    let mut write_err: Option<csv::Error> = None;
    let result = pipeline::run_grpo(cfg, &model, theta, &train, &labels, |log: &IterationLog, rows: &[StepRewardRow]| {
        if write_err.is_some() {
            return;
        }
        let res = iter_log.serialize(log).and_then(|_| rows.iter().try_for_each(|r| reward_log.serialize(r)));
        if let Err(e) = res {
            write_err = Some(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    iter_log.flush()?;
    reward_log.flush()?;
    drop((iter_log, reward_log));
    model.save_params(&rd.path("params.bin"), &result.theta)?;
    for name in ["iterations.csv", "rewards.csv", "params.bin"] {
        rd.output(name)?;
    }
    let last = result.iterations.last();
    println!(
        "grpo {} iterations, final mean reward {:.4}, gate violations {}",
        result.summary.iterations,
        last.map_or(0.0, |l| l.mean_reward),
        result.summary.gate_violations
    );
    rd.finish().map(drop)
}

fn build_policy(
    cfg: &RunConfig,
    spec: &PolicySpec,
    params: Option<&Path>,
    episodes: &[Episode],
) -> Result<Arc<dyn Policy>, CliError> {
    let space = pipeline::sim_config(cfg).action_space();
    Ok(match spec {
        PolicySpec::Toy => {
            let (model, theta) = load_toy(cfg, params)?;
            Arc::new(ToyPolicy::new(model, Arc::new(theta)))
        }
        PolicySpec::ScriptedOracle => Arc::new(ScriptedOracle::new(space, episodes)),
        PolicySpec::ScriptedCorrupt(p) => Arc::new(ScriptedCorrupt::new(ScriptedOracle::new(space, episodes), *p)),
        PolicySpec::Remote(url) => Arc::new(RemotePolicy::new(Client::new(url, Duration::from_secs(120)), space)),
    })
}

fn eval(cfg: &RunConfig, out: Option<&Path>, data: &Path, split: &str, spec: &PolicySpec, params: Option<&Path>) -> Result<(), CliError> {
    let mut rd = RunDir::create("eval", out, cfg)?;
    let (path, episodes) = load_split(data, split)?;
    rd.input(&path)?;
    if let Some(p) = params {
        rd.input(p)?;
    }
    let policy = build_policy(cfg, spec, params, &episodes)?;
    let rows: Vec<ReportRow> = evaluate_policy(policy.as_ref(), &episodes, split, stage_seed(cfg.seed, SEED_EVAL))?;
    let report = aggregate(&rows)?;
    write_csv(&rd.path("rows.csv"), &rows)?;
    report.write_csv(BufWriter::new(File::create(rd.path("report.csv"))?))?;
    let table = report.table();
    fs::write(rd.path("report.txt"), &table)?;
    for name in ["rows.csv", "report.csv", "report.txt"] {
        rd.output(name)?;
    }
    print!("{table}");
    rd.finish().map(drop)
}

fn ablation(cfg: &RunConfig, out: Option<&Path>, seeds: &[u64], lambdas: &[f64]) -> Result<(), CliError> {
    let mut rd = RunDir::create("ablation", out, cfg)?;
    let root = rd.dir.clone();
    let mut written = Vec::new();
    let report = pipeline::run_ablation(cfg, seeds, lambdas, |row, exp| {
        let name = format!("runs/seed{}-lambda_h{}", row.seed, row.lambda_h);
        let dir = root.join(&name);
        let io = |e: std::io::Error| StageError::Io { path: dir.display().to_string(), source: e };
        fs::create_dir_all(&dir).map_err(io)?;
        let mut w = csv::Writer::from_path(dir.join("iterations.csv"))?;
        for l in &exp.grpo.iterations {
            w.serialize(l)?;
        }
        w.flush().map_err(io)?;
        let mut w = csv::Writer::from_path(dir.join("rows.csv"))?;
        for r in &exp.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(io)?;
        written.push(format!("{name}/iterations.csv"));
        written.push(format!("{name}/rows.csv"));
        Ok(())
    })?;
    report.write_csv(BufWriter::new(File::create(rd.path("ablation.csv"))?))?;
    let table = report.table();
    fs::write(rd.path("ablation.txt"), &table)?;
    for name in written.iter().map(String::as_str).chain(["ablation.csv", "ablation.txt"]) {
        rd.output(name)?;
    }
    print!("{table}");
    rd.finish().map(drop)
}

fn serve(cfg: &RunConfig, addr: SocketAddr, spec: Option<&PolicySpec>, params: Option<&Path>, data: Option<&Path>) -> Result<(), CliError> {
    let (policy, space) = match spec {
        None => (None, pipeline::sim_config(cfg).action_space()),
        Some(PolicySpec::Remote(_)) => return Err(CliError::Config("serve cannot proxy a remote policy".into())),
        Some(PolicySpec::Toy) => {
            let (model, theta) = load_toy(cfg, params)?;
            let space = model.action_space().clone();
            (Some(Arc::new(ToyPolicy::new(model, Arc::new(theta))) as Arc<dyn Policy>), space)
        }
        Some(s) => {
            let dir = data.ok_or_else(|| CliError::Config("scripted policies need --data".into()))?;
            let mut episodes = load_split(dir, "train")?.1;
            episodes.extend(load_split(dir, "test")?.1);
            let p = build_policy(cfg, s, None, &episodes)?;
            let space = p.action_space().clone();
            (Some(p), space)
        }
    };
    let state = AppState { policy, space, seed: stage_seed(cfg.seed, SEED_EVAL) };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(navrl_server::serve(addr, state))?;
    Ok(())
}
