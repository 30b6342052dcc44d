//! Command-line driver. Each invocation runs one subcommand against a TOML
//! experiment file and writes CSV outputs plus a resolved copy of the
//! configuration into a single run directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{weight_transform, WeightConfig};
use crate::policy::{
    load_checkpoint, save_checkpoint, target_policy_estimate, Checkpoint, Conditioning, GaussianPolicy,
    SequencePolicyModel, StepDensity, TrajectoryPolicy,
};
use crate::stats::kde_estimate;
use crate::theory::{variance_decomposition_check, variance_study, GaussianBanditFamily, VarianceStudyConfig};
use crate::training::{
    bc_log_csv, default_target_return, dpe_log_csv, evaluate_policy, generate_dataset, pretrain_behavior, train_bc,
    train_dpe, BehaviorSpec, ReferencePolicy, ToyEnvironment, TrainConfig,
};
use crate::trajectory::{load_dataset, save_dataset, TrajectoryDataset};

/// Overrides the configured output directory; `--out` still wins.
pub const OUT_DIR_ENV: &str = "DPE_OUT_DIR";

const DATASET: &str = "dataset.jsonl";
const BEHAVIOR: &str = "behavior.json";
const BC_MODEL: &str = "bc_model.json";
const BC_LOG: &str = "bc_log.csv";
const DPE_MODEL: &str = "dpe_model.json";
const DPE_LOG: &str = "dpe_log.csv";

#[derive(Debug, Parser)]
#[command(name = "dpe", version, about = "Double policy estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, replacing the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing the configured one and the environment override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the behavior policy and write the dataset.
    GenData(Common),
    /// Fit the Gaussian behavior model by maximum likelihood.
    FitBehavior(Common),
    /// Supervised training of the sequence model.
    TrainBc(Common),
    /// DPE fine-tuning from the supervised checkpoint (trained first if absent).
    TrainDpe(Common),
    /// Closed-loop evaluation of the trained models.
    Eval(Common),
    /// Replicated OIS versus DPE variance comparison on the Gaussian bandit.
    VarianceStudy(Common),
    /// Variance decomposition check over a sweep of seeds.
    TheoremCheck(Common),
    /// Kernel density of per-step behavior and target weights.
    Kde(Common),
    /// Long-format CSVs for the loss curves, weight densities and weight-mode sweep.
    PlotData(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::GenData(c) => ("gen-data", c),
            Command::FitBehavior(c) => ("fit-behavior", c),
            Command::TrainBc(c) => ("train-bc", c),
            Command::TrainDpe(c) => ("train-dpe", c),
            Command::Eval(c) => ("eval", c),
            Command::VarianceStudy(c) => ("variance-study", c),
            Command::TheoremCheck(c) => ("theorem-check", c),
            Command::Kde(c) => ("kde", c),
            Command::PlotData(c) => ("plot-data", c),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("missing input {path}; run `{producer}` first")]
    MissingInput { path: PathBuf, producer: &'static str },
    #[error("output {0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("malformed {path}: {message}")]
    BadInput { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] crate::Error),
}

impl CliError {
    /// 1 for anything the user can fix in the inputs, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if !e.is_validation() => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "d_episodes")]
    pub episodes: usize,
    #[serde(default = "BehaviorSpec::mixed_quality")]
    pub behavior: BehaviorSpec,
}

fn d_episodes() -> usize {
    200
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            episodes: d_episodes(),
            behavior: BehaviorSpec::mixed_quality(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bc,
    Dpe,
}

impl ModelKind {
    fn file(self) -> &'static str {
        match self {
            ModelKind::Bc => BC_MODEL,
            ModelKind::Dpe => DPE_MODEL,
        }
    }

    fn producer(self) -> &'static str {
        match self {
            ModelKind::Bc => "train-bc",
            ModelKind::Dpe => "train-dpe",
        }
    }

    fn label(self) -> &'static str {
        match self {
            ModelKind::Bc => "bc",
            ModelKind::Dpe => "dpe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "d_eval_episodes")]
    pub episodes: usize,
    /// Conditioning return; falls back to the training one, then to the dataset default.
    #[serde(default)]
    pub target_return: Option<f64>,
    #[serde(default = "d_models")]
    pub models: Vec<ModelKind>,
    /// Compare actions with the hand-coded controller (point mass only).
    #[serde(default = "yes")]
    pub reference: bool,
}

fn d_eval_episodes() -> usize {
    50
}
fn d_models() -> Vec<ModelKind> {
    vec![ModelKind::Bc, ModelKind::Dpe]
}
fn yes() -> bool {
    true
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            episodes: d_eval_episodes(),
            target_return: None,
            models: d_models(),
            reference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSpec {
    #[serde(default)]
    pub family: GaussianBanditFamily,
    #[serde(default = "d_theorem_n")]
    pub n: usize,
    /// Seeds `seed, seed + 1, …` are checked.
    #[serde(default = "d_theorem_seeds")]
    pub seeds: u64,
}

fn d_theorem_n() -> usize {
    100_000
}
fn d_theorem_seeds() -> u64 {
    20
}

impl Default for TheoremSpec {
    fn default() -> Self {
        TheoremSpec {
            family: GaussianBanditFamily::default(),
            n: d_theorem_n(),
            seeds: d_theorem_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdeSpec {
    #[serde(default = "d_grid")]
    pub grid: usize,
    /// `None` selects Silverman's rule.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    /// Sequence model whose target estimate is compared with the behavior model.
    #[serde(default = "d_kde_model")]
    pub model: ModelKind,
}

fn d_grid() -> usize {
    200
}
fn d_kde_model() -> ModelKind {
    ModelKind::Dpe
}

impl Default for KdeSpec {
    fn default() -> Self {
        KdeSpec {
            grid: d_grid(),
            bandwidth: None,
            model: d_kde_model(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub label: String,
    pub weights: WeightConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    /// Weight modes retrained from the supervised checkpoint; `None` sweeps
    /// pdf, clipped pdf and CDF windows of half-width 0.1 and 0.2.
    #[serde(default)]
    pub sweep: Option<Vec<SweepEntry>>,
}

/// Everything one run needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ToyEnvironment::point_mass")]
    pub environment: ToyEnvironment,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub study: VarianceStudyConfig,
    #[serde(default)]
    pub theorem: TheoremSpec,
    #[serde(default)]
    pub kde: KdeSpec,
    #[serde(default)]
    pub plot: PlotSpec,
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

fn default_sweep(base: &WeightConfig) -> Vec<SweepEntry> {
    let cap = base.per_step_cap;
    let with_cap = |w: WeightConfig| WeightConfig { per_step_cap: cap, ..w };
    vec![
        SweepEntry {
            label: "pdf".into(),
            weights: with_cap(WeightConfig::pdf()),
        },
        SweepEntry {
            label: "exp_clipped".into(),
            weights: with_cap(WeightConfig::exp_clipped()),
        },
        SweepEntry {
            label: "cdf_0.1".into(),
            weights: with_cap(WeightConfig::cdf_window(0.1)),
        },
        SweepEntry {
            label: "cdf_0.2".into(),
            weights: with_cap(WeightConfig::cdf_window(0.2)),
        },
    ]
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Applies the seed and directory overrides and pins every derived default,
    /// so the serialized result reproduces the run on its own.
    fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>, env_out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(dir) = out.or(env_out) {
            self.out_dir = dir;
        }
        self.train.seed = self.seed;
        self.study.seed = self.seed;
        if self.plot.sweep.is_none() {
            self.plot.sweep = Some(default_sweep(&self.train.weights));
        }
        self
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.environment.validate()?;
        self.dataset.behavior.validate(&self.environment)?;
        self.train.validate()?;
        if self.eval.episodes == 0 || self.dataset.episodes == 0 {
            return Err(crate::Error::InvalidInput("episode counts must be positive".into()));
        }
        Ok(())
    }

    fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// A resolved config bound to its output directory.
struct Run {
    cfg: ExperimentConfig,
    force: bool,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    /// Refuses to clobber existing outputs unless forced, then makes the directory.
    fn claim(&self, names: &[&str]) -> CliResult<()> {
        if !self.force {
            if let Some(p) = names.iter().map(|n| self.path(n)).find(|p| p.exists()) {
                return Err(CliError::OutputExists(p));
            }
        }
        fs::create_dir_all(&self.cfg.out_dir).map_err(|e| crate::Error::Io {
            path: self.cfg.out_dir.clone(),
            source: e,
        })?;
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|source| crate::Error::Io { path, source })?;
        Ok(())
    }

    fn require(&self, name: &str, producer: &'static str) -> CliResult<PathBuf> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingInput { path, producer })
        }
    }

    fn dataset(&self) -> CliResult<TrajectoryDataset> {
        Ok(load_dataset(self.require(DATASET, "gen-data")?)?)
    }

    fn behavior(&self) -> CliResult<GaussianPolicy> {
        Ok(load_checkpoint(self.require(BEHAVIOR, "fit-behavior")?)?.into_gaussian()?)
    }

    fn model(&self, kind: ModelKind) -> CliResult<SequencePolicyModel> {
        Ok(load_checkpoint(self.require(kind.file(), kind.producer())?)?.into_sequence()?)
    }

    fn resolved_name(sub: &str) -> String {
        format!("config_{}.toml", sub.replace('-', "_"))
    }

    fn write_resolved(&self, sub: &str) -> CliResult<()> {
        let text = toml::to_string(&self.cfg).map_err(|e| crate::Error::Schema(e.to_string()))?;
        self.write(&Self::resolved_name(sub), &text)
    }
}

/// Parses `args` (program name first) and runs the subcommand; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    let (sub, common) = cmd.parts();
    let env_out = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let cfg = ExperimentConfig::load(&common.config)?.resolve(common.seed, common.out.clone(), env_out);
    cfg.validate()?;
    let run = Run {
        cfg,
        force: common.force,
    };
    match cmd {
        Command::GenData(_) => gen_data(&run, sub),
        Command::FitBehavior(_) => fit_behavior(&run, sub),
        Command::TrainBc(_) => train_bc_cmd(&run, sub),
        Command::TrainDpe(_) => train_dpe_cmd(&run, sub),
        Command::Eval(_) => eval_cmd(&run, sub),
        Command::VarianceStudy(_) => variance_study_cmd(&run, sub),
        Command::TheoremCheck(_) => theorem_check(&run, sub),
        Command::Kde(_) => kde_cmd(&run, sub),
        Command::PlotData(_) => plot_data(&run, sub),
    }
}

fn gen_data(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&[DATASET, "dataset_returns.csv", &resolved])?;
    let c = &run.cfg;
    let ds = generate_dataset(&c.environment, &c.dataset.behavior, c.dataset.episodes, c.seed)?;
    save_dataset(&ds, run.path(DATASET))?;
    let mut csv = String::from("episode,return\n");
    for (i, r) in ds.discounted_returns().iter().enumerate() {
        let _ = writeln!(csv, "{i},{r}");
    }
    run.write("dataset_returns.csv", &csv)?;
    run.write_resolved(sub)
}

fn fit_behavior(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&[BEHAVIOR, "behavior_fit.csv", &resolved])?;
    let ds = run.dataset()?;
    let (_, report) = pretrain_behavior(&ds, &run.cfg.train, Some(&run.path(BEHAVIOR)))?;
    let mut csv = String::from("iteration,log_likelihood\n");
    for (i, ll) in report.log_likelihood.iter().enumerate() {
        let _ = writeln!(csv, "{i},{ll}");
    }
    run.write("behavior_fit.csv", &csv)?;
    run.write_resolved(sub)
}

fn fresh_model(run: &Run, ds: &TrajectoryDataset) -> CliResult<SequencePolicyModel> {
    let sc = run.cfg.train.sequence_config(ds.state_dim(), ds.action_dim());
    Ok(SequencePolicyModel::new(sc, run.cfg.seed)?)
}

fn warm_start(run: &Run, ds: &TrajectoryDataset) -> CliResult<SequencePolicyModel> {
    let out = train_bc(ds, fresh_model(run, ds)?, &run.cfg.train)?;
    save_checkpoint(&Checkpoint::Sequence(out.model.clone()), run.path(BC_MODEL))?;
    run.write(BC_LOG, &bc_log_csv(&out.log))?;
    Ok(out.model)
}

fn train_bc_cmd(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&[BC_MODEL, BC_LOG, &resolved])?;
    let ds = run.dataset()?;
    warm_start(run, &ds)?;
    run.write_resolved(sub)
}

fn train_dpe_cmd(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&[DPE_MODEL, DPE_LOG, &resolved])?;
    let ds = run.dataset()?;
    let behavior = run.behavior()?;
    let start = if run.path(BC_MODEL).exists() {
        run.model(ModelKind::Bc)?
    } else {
        warm_start(run, &ds)?
    };
    let out = train_dpe(&ds, start, &behavior, &run.cfg.train)?;
    save_checkpoint(&Checkpoint::Sequence(out.model), run.path(DPE_MODEL))?;
    run.write(DPE_LOG, &dpe_log_csv(&out.log))?;
    run.write_resolved(sub)
}

fn eval_cmd(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&["eval.csv", "eval_summary.csv", &resolved])?;
    let c = &run.cfg;
    let g0 = match c.eval.target_return.or(c.train.target_return) {
        Some(g) => g,
        None => default_target_return(&run.dataset()?.discounted_returns()),
    };
    let point_mass = match &c.environment {
        ToyEnvironment::PointMass1d(pm) if c.eval.reference => Some(pm.clone()),
        _ => None,
    };
    let reference_fn = |s: &[f64]| point_mass.as_ref().expect("only used for the point mass").reference_action(s);
    let reference: Option<ReferencePolicy<'_>> = point_mass.as_ref().map(|_| &reference_fn as ReferencePolicy<'_>);
    let mut rows = String::from("model,episode,return,status\n");
    let mut summary = String::from("model,target_return,mean_return,action_mse,completed,failed\n");
    for &kind in &c.eval.models {
        let model = run.model(kind)?;
        let report = evaluate_policy(&c.environment, &model, g0, c.eval.episodes, c.eval_seed(), reference)?;
        let mut returns = report.returns.iter();
        for ep in 0..c.eval.episodes {
            match report.failures.iter().find(|f| f.episode == ep) {
                Some(f) => {
                    let _ = writeln!(rows, "{},{ep},,\"error: {}\"", kind.label(), f.message.replace('"', "'"));
                }
                None => {
                    let r = returns.next().expect("one return per completed episode");
                    let _ = writeln!(rows, "{},{ep},{r},ok", kind.label());
                }
            }
        }
        let mse = report.action_mse.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(
            summary,
            "{},{g0},{},{mse},{},{}",
            kind.label(),
            report.mean_return,
            report.returns.len(),
            report.failures.len()
        );
    }
    run.write("eval.csv", &rows)?;
    run.write("eval_summary.csv", &summary)?;
    run.write_resolved(sub)
}

fn variance_study_cmd(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&["variance_study.csv", &resolved])?;
    let report = variance_study(&run.cfg.study)?;
    run.write("variance_study.csv", &report.to_csv())?;
    run.write_resolved(sub)
}

fn theorem_check(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&["theorem_check.csv", &resolved])?;
    let t = &run.cfg.theorem;
    if t.seeds == 0 {
        return Err(crate::Error::InvalidInput("theorem.seeds must be positive".into()).into());
    }
    let mut csv = String::new();
    for k in 0..t.seeds {
        let report = variance_decomposition_check(&t.family, t.n, run.cfg.seed.wrapping_add(k))?;
        let text = report.to_csv();
        let mut lines = text.lines();
        let header = lines.next().expect("report has a header");
        if csv.is_empty() {
            let _ = writeln!(csv, "{header}");
        }
        lines.for_each(|l| {
            let _ = writeln!(csv, "{l}");
        });
    }
    run.write("theorem_check.csv", &csv)?;
    run.write_resolved(sub)
}

/// Per-step weights of the recorded actions under the behavior model and the
/// model's target estimate, both through the configured transform.
fn step_weights(
    ds: &TrajectoryDataset,
    behavior: &GaussianPolicy,
    model: &SequencePolicyModel,
    cfg: &WeightConfig,
) -> crate::Result<(Vec<f64>, Vec<f64>)> {
    let target = target_policy_estimate(model, Conditioning::EpisodeReturn)?;
    let weigh = |d: &StepDensity, action: &[f64]| {
        let g = d.gaussian.as_ref().expect("both policies are Gaussian");
        weight_transform(d.log_prob, &g.mean, &g.std, action, cfg)
    };
    let per = ds
        .trajectories()
        .par_iter()
        .map(|traj| {
            let b = behavior.step_densities(traj)?;
            let t = target.step_densities(traj)?;
            let wb: Vec<f64> = b.iter().zip(traj.actions()).map(|(d, a)| weigh(d, a)).collect();
            let wt: Vec<f64> = t.iter().zip(traj.actions()).map(|(d, a)| weigh(d, a)).collect();
            Ok((wb, wt))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let (wb, wt): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per.into_iter().unzip();
    Ok((wb.concat(), wt.concat()))
}

fn weight_kde_csv(run: &Run, model: ModelKind) -> CliResult<String> {
    let ds = run.dataset()?;
    let behavior = run.behavior()?;
    let model = run.model(model)?;
    let (wb, wt) = step_weights(&ds, &behavior, &model, &run.cfg.train.weights)?;
    let mut csv = String::from("series,x,y\n");
    for (label, samples) in [("behavior", &wb), ("target", &wt)] {
        for (x, y) in kde_estimate(samples, run.cfg.kde.bandwidth, run.cfg.kde.grid)? {
            let _ = writeln!(csv, "{label},{x},{y}");
        }
    }
    Ok(csv)
}

fn kde_cmd(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&["kde.csv", &resolved])?;
    let csv = weight_kde_csv(run, run.cfg.kde.model)?;
    run.write("kde.csv", &csv)?;
    run.write_resolved(sub)
}

/// `(step, sup_loss)` pairs of a training log.
fn read_loss_curve(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let bad = |message: String| CliError::BadInput {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| bad(format!("no `{name}` column")));
    let (ci, cl) = (col("step")?, col("sup_loss")?);
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            let num = |c: usize| {
                cells
                    .get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| bad(format!("line {}: unreadable value", i + 2)))
            };
            Ok((num(ci)?, num(cl)?))
        })
        .collect()
}

fn plot_data(run: &Run, sub: &str) -> CliResult<()> {
    let resolved = Run::resolved_name(sub);
    run.claim(&["fig2.csv", "fig3.csv", "fig4.csv", &resolved])?;
    let bc = read_loss_curve(&run.require(BC_LOG, "train-bc")?)?;
    let dpe = read_loss_curve(&run.require(DPE_LOG, "train-dpe")?)?;
    // DPE continues from the last supervised step.
    let offset = bc.len() as f64;
    let mut fig2 = String::from("series,x,y\n");
    for (x, y) in &bc {
        let _ = writeln!(fig2, "bc,{x},{y}");
    }
    for (x, y) in &dpe {
        let _ = writeln!(fig2, "dpe,{},{y}", x + offset);
    }
    let fig3 = weight_kde_csv(run, ModelKind::Dpe)?;
    let ds = run.dataset()?;
    let behavior = run.behavior()?;
    let start = run.model(ModelKind::Bc)?;
    let mut fig4 = String::from("series,x,y\n");
    for entry in run.cfg.plot.sweep.as_deref().unwrap_or_default() {
        let cfg = TrainConfig {
            weights: entry.weights,
            ..run.cfg.train.clone()
        };
        let out = train_dpe(&ds, start.clone(), &behavior, &cfg)?;
        for row in &out.log {
            let _ = writeln!(fig4, "{},{},{}", entry.label, row.step, row.sup_loss);
        }
    }
    run.write("fig2.csv", &fig2)?;
    run.write("fig3.csv", &fig3)?;
    run.write("fig4.csv", &fig4)?;
    run.write_resolved(sub)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_roundtrips_and_pins_seeds() {
        let cfg = ExperimentConfig::default().resolve(Some(7), Some("x".into()), Some("y".into()));
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
        assert_eq!((cfg.train.seed, cfg.study.seed), (7, 7));
        assert_eq!(cfg.plot.sweep.as_ref().unwrap().len(), 4);
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn env_override_applies_without_flag() {
        let cfg = ExperimentConfig::default().resolve(None, None, Some("y".into()));
        assert_eq!(cfg.out_dir, PathBuf::from("y"));
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[train]\nbatch = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[environment]\nkind = \"point_mass_1d\"\nmass = 2").is_err());
        let ok: ExperimentConfig = toml::from_str("[environment]\nkind = \"point_mass_1d\"\nhorizon = 5").unwrap();
        assert_eq!(ok.environment.horizon(), 5);
    }

    #[test]
    fn chain_environment_parses() {
        let text = toml::to_string(&ExperimentConfig {
            environment: ToyEnvironment::ChainMdp {
                mdp: crate::theory::FiniteMDP::chain_2x2(),
            },
            ..ExperimentConfig::default()
        })
        .unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(matches!(back.environment, ToyEnvironment::ChainMdp { .. }));
    }

    #[test]
    fn exit_codes_separate_validation_from_runtime() {
        assert_eq!(CliError::OutputExists("a".into()).exit_code(), 1);
        assert_eq!(CliError::Core(crate::Error::InvalidInput("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(crate::Error::Simulation("x".into())).exit_code(), 2);
        assert_eq!(run(["dpe", "no-such-command"]), 1);
        assert_eq!(run(["dpe", "gen-data", "--config", "/nonexistent/cfg.toml"]), 1);
    }
}
