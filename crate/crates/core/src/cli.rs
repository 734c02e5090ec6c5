//! Command-line driver. Each subcommand produces the data behind one
//! experiment stage and records a run manifest next to its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks_eval::{
    eval_seeds, evaluate, ratio_sweep, router_report, AttackKind, AttackSpec, EvalError, EvalReport, GreedyPolicy,
    Normalizer, Policy, RandomPolicy, SweepConfig, SweepRow,
};
use crate::datasets::{creation_time, mix, Dataset, DatasetError, MixSpec, EXTENSION};
use crate::mop_policy::{Arch, InputEncoder, NetworkConfig, PolicyError, QNet};
use crate::sim::{EnvConfig, SimError};
use crate::teacher::{collect_rollouts, make_teacher, write_transcripts, LlmAgent, TeacherError, TeacherKind};
use crate::training::{offline_train, online_adapt, Algorithm, TrainConfig, TrainError};

pub const MANIFEST_SCHEMA: &str = "mopdrive-run-v1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io error: {e}"))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Config(format!("dataset: {e}"))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Config(_) | PolicyError::Checkpoint(_) | PolicyError::UnknownPhase(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TeacherError> for CliError {
    fn from(e: TeacherError) -> Self {
        match e {
            TeacherError::Unavailable(_) | TeacherError::Invalid(_) => CliError::Config(e.to_string()),
            TeacherError::Sim(s) => s.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Invalid(_) | EvalError::MissingRanges | EvalError::GradientUnavailable(_) => {
                CliError::Config(e.to_string())
            }
            EvalError::Policy(p) => p.into(),
            EvalError::Sim(s) => s.into(),
            EvalError::Dataset(d) => d.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::MissingRanges => CliError::Config(e.to_string()),
            TrainError::Dataset(d) => d.into(),
            TrainError::Policy(p) => p.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Sim(s) => s.into(),
            TrainError::NonFinite { .. } => CliError::Runtime(format!("training aborted: {e}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    pub transitions: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self { kind: TeacherKind::ScriptedOracle, transitions: 3000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Teacher fraction of a mixed dataset.
    pub p: f64,
    pub total: usize,
    /// Ratios visited by `sweep-ratio`.
    pub p_grid: Vec<f64>,
    pub sweep_algorithms: Vec<Algorithm>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Self { p: 0.25, total: 15_000, p_grid: sweep.p_values, sweep_algorithms: sweep.algorithms }
    }
}

/// Complete, serializable description of a run. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: String,
    pub teacher: TeacherSection,
    pub dataset: DatasetSection,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub attack: AttackSpec,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "lane-3-density-2".into(),
            teacher: TeacherSection::default(),
            dataset: DatasetSection::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            attack: AttackSpec::new(AttackKind::Pgd),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        EnvConfig::from_id(&self.env)?;
        self.train.validate()?;
        self.attack.validate()?;
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        let d = &self.dataset;
        if let Some(p) = std::iter::once(&d.p).chain(&d.p_grid).find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(config_err(format!("teacher ratio {p} outside [0, 1]")));
        }
        if self.teacher.transitions == 0 || d.total == 0 {
            return Err(config_err("dataset sizes must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Parser, Debug)]
#[command(name = "mopdrive", version, about = "Teacher-guided offline distillation, online adaptation and attack evaluation")]
pub struct Cli {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for independent cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Roll out a teacher and write a transition dataset.
    Collect(CollectArgs),
    /// Mix teacher and random datasets at ratio p.
    Mix(MixArgs),
    /// Offline training on a dataset.
    TrainOffline(TrainArgs),
    /// Online adaptation of a trained checkpoint.
    AdaptOnline(AdaptArgs),
    /// Clean evaluation.
    Eval(EvalArgs),
    /// Evaluation under an observation attack.
    Attack(AttackArgs),
    /// Train and evaluate over a grid of teacher ratios.
    SweepRatio(SweepArgs),
    /// Per-vehicle routing weights of a mixture-of-policies checkpoint.
    RouterReport(RouterArgs),
    /// Re-execute the run described by a manifest.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Collect(_) => "collect",
            Command::Mix(_) => "mix",
            Command::TrainOffline(_) => "train-offline",
            Command::AdaptOnline(_) => "adapt-online",
            Command::Eval(_) => "eval",
            Command::Attack(_) => "attack",
            Command::SweepRatio(_) => "sweep-ratio",
            Command::RouterReport(_) => "router-report",
            Command::Rerun(_) => "rerun",
        }
    }
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedArgs {
    /// Comma-separated run seeds; defaults to `seeds` from the config.
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output file; only valid with a single seed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectArgs {
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub teacher: Option<TeacherKind>,
    /// Number of transitions.
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixArgs {
    #[arg(long)]
    pub teacher_data: Option<PathBuf>,
    #[arg(long)]
    pub random_data: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub total: Option<usize>,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub algo: Option<Algorithm>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptArgs {
    /// Checkpoint from offline training.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArgs {
    /// Greedy policy of this checkpoint.
    #[arg(long, conflicts_with = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Uniform random policy instead of a checkpoint.
    #[arg(long)]
    pub random: bool,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Dataset whose manifest ranges define the normalized space; defaults to
    /// the ranges stored in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<AttackKind>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Projected-gradient iterations.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub teacher_data: PathBuf,
    #[arg(long)]
    pub random_data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub p: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub algos: Vec<Algorithm>,
    #[arg(long)]
    pub total: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[command(flatten)]
    pub run: SeedArgs,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// Written next to the outputs of every successful command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub code_version: String,
    pub command: Command,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
    pub created: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

/// Folds command-line overrides into the config.
fn resolve(cmd: &Command, mut cfg: RunConfig) -> RunConfig {
    fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *dst = v.clone();
        }
    }
    let run = match cmd {
        Command::Collect(a) => {
            set(&mut cfg.env, &a.env);
            set(&mut cfg.teacher.kind, &a.teacher);
            set(&mut cfg.teacher.transitions, &a.n);
            &a.run
        }
        Command::Mix(a) => {
            set(&mut cfg.dataset.p, &a.p);
            set(&mut cfg.dataset.total, &a.total);
            &a.run
        }
        Command::TrainOffline(a) => {
            set(&mut cfg.train.algorithm, &a.algo);
            set(&mut cfg.network.arch, &a.arch);
            set(&mut cfg.train.total_steps, &a.steps);
            &a.run
        }
        Command::AdaptOnline(a) => {
            set(&mut cfg.env, &a.env);
            set(&mut cfg.train.total_steps, &a.steps);
            &a.run
        }
        Command::Eval(a) => {
            set(&mut cfg.env, &a.policy.env);
            set(&mut cfg.train.eval_episodes, &a.policy.episodes);
            &a.run
        }
        Command::Attack(a) => {
            set(&mut cfg.env, &a.policy.env);
            set(&mut cfg.train.eval_episodes, &a.policy.episodes);
            if let Some(kind) = a.kind {
                if kind != cfg.attack.kind && a.eps.is_none() {
                    cfg.attack.eps = kind.default_eps();
                }
                cfg.attack.kind = kind;
            }
            set(&mut cfg.attack.eps, &a.eps);
            set(&mut cfg.attack.steps, &a.steps);
            set(&mut cfg.attack.step_size, &a.step_size);
            &a.run
        }
        Command::SweepRatio(a) => {
            if !a.p.is_empty() {
                cfg.dataset.p_grid = a.p.clone();
            }
            if !a.algos.is_empty() {
                cfg.dataset.sweep_algorithms = a.algos.clone();
            }
            set(&mut cfg.dataset.total, &a.total);
            set(&mut cfg.train.total_steps, &a.steps);
            set(&mut cfg.network.arch, &a.arch);
            &a.run
        }
        Command::RouterReport(a) => {
            set(&mut cfg.env, &a.env);
            set(&mut cfg.train.eval_episodes, &a.episodes);
            &a.run
        }
        Command::Rerun(_) => return cfg,
    };
    if !run.seeds.is_empty() {
        cfg.seeds = run.seeds.clone();
    }
    cfg
}

struct Ctx {
    cfg: RunConfig,
    jobs: usize,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.cfg.output_dir)?;
        Ok(&self.cfg.output_dir)
    }

    fn env(&self) -> Result<EnvConfig, CliError> {
        Ok(EnvConfig::from_id(&self.cfg.env)?)
    }

    /// Output path for one seed: `--out` when given, else `dir/default_name`.
    fn out_path(&self, run: &SeedArgs, default_name: String) -> Result<PathBuf, CliError> {
        match &run.out {
            Some(p) if self.cfg.seeds.len() == 1 => Ok(p.clone()),
            Some(_) => Err(config_err("--out needs exactly one seed")),
            None => Ok(self.dir()?.join(default_name)),
        }
    }

    fn cells<T, F>(&self, f: F) -> Result<Vec<T>, CliError>
    where
        T: Send,
        F: Fn(u64) -> Result<T, CliError> + Sync,
    {
        let seeds = &self.cfg.seeds;
        if self.jobs <= 1 || seeds.len() <= 1 {
            return seeds.iter().map(|&s| f(s)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
    }

    fn wrote(&mut self, path: PathBuf) {
        eprintln!("wrote {}", path.display());
        self.outputs.push(path);
    }
}

fn input(path: &Path) -> Result<&Path, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(config_err(format!("input file {} does not exist", path.display())))
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    input(path.as_deref().ok_or_else(|| config_err(format!("{flag} is required")))?)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "policy".into(), |s| s.to_string_lossy().into_owned())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load(input(path)?)?)
}

fn load_net(path: &Path) -> Result<QNet, CliError> {
    Ok(QNet::load(input(path)?)?)
}

fn cmd_collect(ctx: &mut Ctx, a: &CollectArgs) -> Result<(), CliError> {
    let env = ctx.env()?;
    let t = ctx.cfg.teacher.clone();
    if t.kind == TeacherKind::LlmAgent {
        LlmAgent::from_env(env.lanes)?;
    }
    let paths = ctx.cells(|seed| {
        let path = ctx.out_path(&a.run, format!("{}_{}_seed{seed}.{EXTENSION}", env.id(), t.kind))?;
        let transcripts = if t.kind == TeacherKind::LlmAgent {
            let mut agent = LlmAgent::from_env(env.lanes)?;
            collect_rollouts(&env, &mut agent, t.transitions, seed)?.save(&path)?;
            let tp = path.with_extension("transcripts.jsonl");
            write_transcripts(&tp, agent.transcripts())?;
            Some(tp)
        } else {
            let mut teacher = make_teacher(t.kind, &env, seed)?;
            collect_rollouts(&env, teacher.as_mut(), t.transitions, seed)?.save(&path)?;
            None
        };
        Ok((path, transcripts))
    })?;
    for (p, tp) in paths {
        ctx.wrote(p);
        if let Some(tp) = tp {
            ctx.wrote(tp);
        }
    }
    Ok(())
}

fn cmd_mix(ctx: &mut Ctx, a: &MixArgs) -> Result<(), CliError> {
    let teacher = Dataset::load(required(&a.teacher_data, "--teacher-data")?)?;
    let random = Dataset::load(required(&a.random_data, "--random-data")?)?;
    let d = ctx.cfg.dataset.clone();
    let paths = ctx.cells(|seed| {
        let path = ctx.out_path(&a.run, format!("mixed_p{}_seed{seed}.{EXTENSION}", d.p))?;
        mix(&teacher, &random, &MixSpec { p: d.p, total: d.total, seed })?.save(&path)?;
        Ok(path)
    })?;
    paths.into_iter().for_each(|p| ctx.wrote(p));
    Ok(())
}

fn cmd_train_offline(ctx: &mut Ctx, a: &TrainArgs) -> Result<(), CliError> {
    let data = load_dataset(&a.dataset)?;
    let vehicles = data.transitions.first().ok_or(DatasetError::Empty)?.s.vehicles();
    let network = ctx.cfg.network.clone().with_vehicles(vehicles);
    let alg = ctx.cfg.train.algorithm;
    let outs = ctx.cells(|seed| {
        let ckpt = ctx.out_path(&a.run, format!("{alg}_seed{seed}.ckpt"))?;
        let net = network.build(InputEncoder::from_dataset(&data), seed)?;
        let cfg = TrainConfig { seed, ..ctx.cfg.train.clone() };
        let (net, outcome) = offline_train(&data, net, &cfg)?;
        net.save(&ckpt)?;
        let metrics = ckpt.with_extension("metrics.csv");
        outcome.metrics.save(&metrics)?;
        Ok([ckpt, metrics])
    })?;
    outs.into_iter().flatten().for_each(|p| ctx.wrote(p));
    Ok(())
}

fn cmd_adapt_online(ctx: &mut Ctx, a: &AdaptArgs) -> Result<(), CliError> {
    let base = load_net(&a.from)?;
    let env = ctx.env()?;
    let from = stem(&a.from);
    let outs = ctx.cells(|seed| {
        let ckpt = ctx.out_path(&a.run, format!("{from}_online_{}_seed{seed}.ckpt", env.id()))?;
        let cfg = TrainConfig { seed, ..ctx.cfg.train.clone() };
        let (net, outcome) = online_adapt(&env, base.clone(), &cfg)?;
        net.save(&ckpt)?;
        let metrics = ckpt.with_extension("metrics.csv");
        outcome.metrics.save(&metrics)?;
        Ok([ckpt, metrics])
    })?;
    outs.into_iter().flatten().for_each(|p| ctx.wrote(p));
    Ok(())
}

/// Loaded checkpoint, or `None` for the random policy, plus its id.
fn policy_source(p: &PolicyArgs) -> Result<(Option<QNet>, String), CliError> {
    match (&p.checkpoint, p.random) {
        (Some(path), false) => Ok((Some(load_net(path)?), stem(path))),
        (None, true) => Ok((None, "random".into())),
        _ => Err(config_err("pass exactly one of --checkpoint or --random")),
    }
}

fn run_reports(
    ctx: &mut Ctx,
    policy: &PolicyArgs,
    run: &SeedArgs,
    spec: AttackSpec,
    norm: Option<Normalizer>,
) -> Result<(), CliError> {
    let (net, id) = policy_source(policy)?;
    let env = ctx.env()?;
    let episodes = ctx.cfg.train.eval_episodes;
    let reports = ctx.cells(|seed| {
        let spec = spec.with_seed(seed);
        let mut p: Box<dyn Policy + '_> = match &net {
            Some(n) => Box::new(GreedyPolicy { net: n, name: id.clone() }),
            None => Box::new(RandomPolicy::new(seed)),
        };
        Ok(evaluate(&env, p.as_mut(), &eval_seeds(seed, episodes), &spec, norm.as_ref())?)
    })?;
    let pooled = EvalReport::pooled(&reports).expect("at least one seed");
    for w in &pooled.warnings {
        eprintln!("warning: {w}");
    }
    for r in &reports {
        let path = ctx.dir()?.join(format!("{}.json", r.file_stem()));
        r.save_json(&path)?;
        ctx.wrote(path);
    }
    let csv = ctx.out_path(run, format!("{}_{}_{}.csv", env.id(), id, spec.label()))?;
    std::fs::write(&csv, format!("{}\n{}\n", EvalReport::CSV_HEADER, pooled.csv_row()))?;
    ctx.wrote(csv);
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<(), CliError> {
    run_reports(ctx, &a.policy, &a.run, AttackSpec::none(), None)
}

fn cmd_attack(ctx: &mut Ctx, a: &AttackArgs) -> Result<(), CliError> {
    let norm = match (&a.dataset, &a.policy.checkpoint) {
        (Some(d), _) => Normalizer::from_dataset(&load_dataset(d)?)?,
        (None, Some(c)) => Normalizer::from_encoder(load_net(c)?.encoder()),
        (None, None) => Normalizer::from_encoder(&InputEncoder::default()),
    };
    let spec = ctx.cfg.attack;
    run_reports(ctx, &a.policy, &a.run, spec, Some(norm))
}

fn cmd_sweep(ctx: &mut Ctx, a: &SweepArgs) -> Result<(), CliError> {
    let teacher = load_dataset(&a.teacher_data)?;
    let random = load_dataset(&a.random_data)?;
    let vehicles = teacher.transitions.first().ok_or(DatasetError::Empty)?.s.vehicles();
    let c = &ctx.cfg;
    let sweep = SweepConfig {
        p_values: c.dataset.p_grid.clone(),
        algorithms: c.dataset.sweep_algorithms.clone(),
        seeds: c.seeds.clone(),
        total: c.dataset.total,
        network: c.network.clone().with_vehicles(vehicles),
        train: c.train.clone(),
    };
    let rows = ratio_sweep(&teacher, &random, &sweep, ctx.jobs)?;
    let path = ctx.out_path(&a.run, format!("sweep_ratio_{}.csv", teacher.env_id()))?;
    std::fs::write(&path, SweepRow::to_csv(&rows))?;
    ctx.wrote(path);
    Ok(())
}

fn cmd_router(ctx: &mut Ctx, a: &RouterArgs) -> Result<(), CliError> {
    let net = load_net(&a.checkpoint)?;
    let mop = net.as_mop().ok_or_else(|| config_err("router-report needs a mixture-of-policies checkpoint"))?;
    let env = ctx.env()?;
    let n = ctx.cfg.train.eval_episodes;
    let seeds: Vec<u64> = ctx.cfg.seeds.iter().flat_map(|&s| eval_seeds(s, n)).collect();
    let report = router_report(&env, mop, &seeds)?;
    let path = ctx.out_path(&a.run, format!("router_{}_{}.csv", stem(&a.checkpoint), env.id()))?;
    std::fs::write(&path, report.to_csv())?;
    ctx.wrote(path);
    Ok(())
}

fn execute(command: Command, cfg: RunConfig, jobs: usize) -> Result<RunManifest, CliError> {
    let cfg = resolve(&command, cfg);
    cfg.validate()?;
    let mut ctx = Ctx { cfg, jobs, outputs: Vec::new() };
    match &command {
        Command::Collect(a) => cmd_collect(&mut ctx, a)?,
        Command::Mix(a) => cmd_mix(&mut ctx, a)?,
        Command::TrainOffline(a) => cmd_train_offline(&mut ctx, a)?,
        Command::AdaptOnline(a) => cmd_adapt_online(&mut ctx, a)?,
        Command::Eval(a) => cmd_eval(&mut ctx, a)?,
        Command::Attack(a) => cmd_attack(&mut ctx, a)?,
        Command::SweepRatio(a) => cmd_sweep(&mut ctx, a)?,
        Command::RouterReport(a) => cmd_router(&mut ctx, a)?,
        Command::Rerun(r) => {
            let m = RunManifest::load(input(&r.manifest)?)?;
            return execute(m.command, m.config, jobs);
        }
    }
    let hash_input = serde_json::to_vec(&(&command, &ctx.cfg)).expect("serializable");
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: ctx.cfg.hash(),
        seeds: ctx.cfg.seeds.clone(),
        outputs: ctx.outputs,
        created: creation_time(),
        command,
        config: ctx.cfg,
    };
    let short = &hex::encode(Sha256::digest(hash_input))[..12];
    let path = manifest.config.output_dir.join(format!("{}-{short}.manifest.json", manifest.command.name()));
    std::fs::create_dir_all(&manifest.config.output_dir)?;
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable") + "\n")?;
    eprintln!("wrote {}", path.display());
    Ok(manifest)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    if cli.jobs == 0 {
        return Err(config_err("--jobs must be at least 1"));
    }
    execute(cli.command, cfg, cli.jobs)
}

/// Parses `args` and runs them, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
