//! Experiment runner: config → model + strategy + task → training → result.
//!
//! `run_experiment` is a pure function of `(config, seed)`. The query set is
//! read exactly once, after training halts. Results serialize to JSON lines and
//! a flat CSV summary; every record carries the resolved config and the tool
//! version.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::{
    count_trainable, effective_rank, inject_adapters, trainable_parameters, AdapterSpec, GateInit,
    StrategyKind, DEFAULT_RANK_EPS,
};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::model_kit::{mse_loss, ToyModel};
use crate::prox_optimizer::{cosine_lr, gate_penalty, train_step, Batch, EarlyStopState, OptimizerState, ProxConfig};
use crate::tasks::{
    planted_rank_task_with, pretrain_with, segmentation_dice, toy_segmentation_task_with, PlantedSpec,
    PretrainSpec, SegmentationSpec, Task, TaskMode,
};
use crate::VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationTaskSpec {
    pub segmentation: SegmentationSpec,
    pub pretrain: PretrainSpec,
    pub pretrain_seed: u64,
    /// Load the frozen base model from this file instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SegmentationTaskSpec {
    fn default() -> Self {
        SegmentationTaskSpec {
            segmentation: SegmentationSpec::default(),
            pretrain: PretrainSpec::default(),
            pretrain_seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskSpec {
    PlantedRank(PlantedSpec),
    Segmentation(SegmentationTaskSpec),
}

impl TaskSpec {
    pub fn family(&self) -> &'static str {
        match self {
            TaskSpec::PlantedRank(_) => "planted_rank",
            TaskSpec::Segmentation(_) => "segmentation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub r_init: usize,
    pub scaling: f64,
    pub gate_init: GateInit,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            r_init: 8,
            scaling: 1.0,
            gate_init: GateInit::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Defaults to the schedule length.
    pub max_epochs: Option<usize>,
    /// Support examples per optimization step.
    pub batch_size: usize,
    pub early_stopping: bool,
    pub window: usize,
    pub threshold: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            max_epochs: None,
            batch_size: 1,
            early_stopping: true,
            window: 20,
            threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub eps_rank: f64,
    pub dice_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eps_rank: DEFAULT_RANK_EPS,
            dice_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskSpec,
    pub strategy: StrategyKind,
    pub adapter: AdapterConfig,
    pub prox: ProxConfig,
    pub k: usize,
    pub task_mode: TaskMode,
    pub seeds: Vec<u64>,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            task: TaskSpec::PlantedRank(PlantedSpec::default()),
            strategy: StrategyKind::Arena,
            adapter: AdapterConfig::default(),
            prox: ProxConfig::default(),
            k: 10,
            task_mode: TaskMode::Base,
            seeds: vec![0, 1, 2],
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_error(err: serde_json::Error) -> Error {
    Error::Config(format!("line {} column {}: {err}", err.line(), err.column()))
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides addressed by dotted paths. Values parse as
    /// JSON when possible and as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            set_dotted(&mut tree, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn max_epochs(&self) -> usize {
        self.training.max_epochs.unwrap_or(self.prox.schedule.total_epochs)
    }

    pub fn adapter_spec(&self) -> Option<AdapterSpec> {
        self.strategy.adapter_mode().map(|mode| AdapterSpec {
            mode,
            rank: self.adapter.r_init,
            scaling: self.adapter.scaling,
            gate_init: self.adapter.gate_init,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.prox.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.strategy.adapter_mode().is_some() && self.adapter.r_init == 0 {
            return bad("adapter.r_init must be at least 1".into());
        }
        if !(self.adapter.scaling > 0.0 && self.adapter.scaling.is_finite()) {
            return bad("adapter.scaling must be positive and finite".into());
        }
        if self.training.batch_size == 0 {
            return bad("training.batch_size must be at least 1".into());
        }
        if self.training.window == 0 || !(self.training.threshold >= 0.0) {
            return bad("training.window must be >= 1 and training.threshold >= 0".into());
        }
        if !(self.eval.eps_rank > 0.0) {
            return bad("eval.eps_rank must be positive".into());
        }
        if !(self.eval.dice_threshold > 0.0 && self.eval.dice_threshold < 1.0) {
            return bad("eval.dice_threshold must lie in (0, 1)".into());
        }
        match &self.task {
            TaskSpec::PlantedRank(p) => {
                if self.task_mode == TaskMode::Novel {
                    return bad("planted_rank tasks have no head; use task_mode = base".into());
                }
                if p.m == 0 || p.n == 0 || p.r_star > p.m.min(p.n) {
                    return bad(format!(
                        "task: need m, n >= 1 and r_star <= min(m, n), got m={} n={} r_star={}",
                        p.m, p.n, p.r_star
                    ));
                }
                if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
                    return bad("task.noise_sigma must be finite and >= 0".into());
                }
            }
            TaskSpec::Segmentation(s) => {
                s.segmentation
                    .validate()
                    .map_err(|e| Error::Config(format!("task.segmentation: {e}")))?;
                if s.pretrain.hidden == 0 {
                    return bad("task.pretrain.hidden must be at least 1".into());
                }
            }
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split always yields a part")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    Abort,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Abort => "abort",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub objective: f64,
    pub ranks: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub metric_name: String,
    pub final_metric: Option<f64>,
    pub final_ranks: BTreeMap<String, usize>,
    pub trainable_params: usize,
    pub epochs_ran: usize,
    pub stop_reason: StopReason,
    pub error: Option<String>,
    pub query_reads: usize,
    pub history: Vec<EpochRecord>,
}

impl RunResult {
    /// Largest effective rank over the adapters, if any.
    pub fn final_rank(&self) -> Option<usize> {
        self.final_ranks.values().copied().max()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn summary_row(&self) -> SummaryRow {
        SummaryRow {
            task: self.config.task.family().to_string(),
            strategy: self.config.strategy.to_string(),
            k: self.config.k,
            r_init: self.config.adapter.r_init,
            seed: self.seed,
            final_metric: self.final_metric,
            final_rank: self.final_rank(),
            params: self.trainable_params,
            epochs: self.epochs_ran,
            stop_reason: self.stop_reason.as_str().to_string(),
            lambda: self.config.prox.lambda,
            rho: self.config.prox.rho,
            task_mode: self.config.task_mode.as_str().to_string(),
        }
    }
}

/// A frozen base model with the spec and tool version that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tool_version: String,
    pub spec: SegmentationTaskSpec,
    pub model: ToyModel,
}

impl Checkpoint {
    pub fn new(spec: &SegmentationTaskSpec, model: ToyModel) -> Self {
        let mut spec = spec.clone();
        spec.checkpoint = None;
        Checkpoint {
            tool_version: VERSION.to_string(),
            spec,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Accepts a checkpoint record or a bare serialized model.
    pub fn parse(text: &str) -> Result<Self> {
        match serde_json::from_str::<Checkpoint>(text) {
            Ok(c) => Ok(c),
            Err(_) => Ok(Checkpoint::new(&SegmentationTaskSpec::default(), ToyModel::from_json(text)?)),
        }
    }
}

fn pretrained_cache() -> &'static Mutex<HashMap<String, Arc<ToyModel>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<ToyModel>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// The frozen base model for a segmentation spec, loaded from its checkpoint
/// or pretrained once per process.
pub fn pretrained_model(spec: &SegmentationTaskSpec) -> Result<Arc<ToyModel>> {
    if let Some(path) = &spec.checkpoint {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint `{}`: {e}", path.display())))?;
        return Ok(Arc::new(Checkpoint::parse(&text)?.model));
    }
    let key = serde_json::to_string(&(&spec.segmentation, &spec.pretrain, spec.pretrain_seed))?;
    let mut cache = pretrained_cache().lock().expect("pretrain cache poisoned");
    if let Some(model) = cache.get(&key) {
        return Ok(Arc::clone(model));
    }
    let model = Arc::new(pretrain_with(&Rng::new(spec.pretrain_seed), &spec.segmentation, &spec.pretrain)?);
    cache.insert(key, Arc::clone(&model));
    Ok(model)
}

const TASK_STREAM: u64 = 1;
const ADAPTER_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

/// Base model and task for a config, with nothing injected yet.
pub fn build_task(cfg: &ExperimentConfig, seed: u64) -> Result<(ToyModel, Task)> {
    let rng = Rng::new(seed).fork(TASK_STREAM);
    match &cfg.task {
        TaskSpec::PlantedRank(spec) => {
            let draw = planted_rank_task_with(&rng, spec, cfg.k)?;
            let bias = vec![0.0; spec.m];
            Ok((ToyModel::linear(draw.base_weight, bias)?, draw.task))
        }
        TaskSpec::Segmentation(spec) => {
            let model = pretrained_model(spec)?;
            let task = toy_segmentation_task_with(&rng, &spec.segmentation, cfg.k, cfg.task_mode)?;
            if model.input_dim() != Some(task.input_dim()) {
                return Err(Error::Config("checkpoint input size does not match the task".into()));
            }
            Ok(((*model).clone(), task))
        }
    }
}

/// Model with the strategy's adapters injected, before any training, and the
/// task it will be trained on.
pub fn initial_state(cfg: &ExperimentConfig, seed: u64) -> Result<(ToyModel, Task)> {
    cfg.validate()?;
    let (mut model, task) = build_task(cfg, seed)?;
    if let Some(spec) = cfg.adapter_spec() {
        inject_adapters(&mut model, &Rng::new(seed).fork(ADAPTER_STREAM), &spec)?;
    }
    Ok((model, task))
}

fn ranks_of(model: &ToyModel, eps: f64) -> BTreeMap<String, usize> {
    model.adapters().map(|(name, s)| (name, effective_rank(s, eps))).collect()
}

fn query_metric(model: &ToyModel, task: &Task, cfg: &ExperimentConfig) -> Result<f64> {
    let (qx, qy) = task.query();
    let pred = model.predict(qx)?;
    match cfg.task {
        TaskSpec::PlantedRank(_) => Ok(mse_loss(&pred, qy)?.0),
        TaskSpec::Segmentation(_) => segmentation_dice(&pred, qy, task.group, cfg.eval.dice_threshold),
    }
}

fn metric_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.task {
        TaskSpec::PlantedRank(_) => "mse",
        TaskSpec::Segmentation(_) => "dice",
    }
}

/// Trains and evaluates one `(config, seed)` pair. Configuration problems are
/// errors; a non-finite loss ends the run with `stop_reason = abort`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let (mut model, task) = initial_state(cfg, seed)?;
    let root = Rng::new(seed);
    let trainable = trainable_parameters(&model, cfg.strategy, cfg.task_mode)?;
    let params = count_trainable(&model, cfg.strategy, cfg.task_mode)?;

    let mut history = Vec::new();
    let mut state = OptimizerState::new();
    let mut stopper = EarlyStopState::new(cfg.training.window, cfg.training.threshold);
    let shuffle = root.fork(SHUFFLE_STREAM);
    let examples = task.support_examples();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut error = None;

    'epochs: for epoch in 0..cfg.max_epochs() {
        let lr = cosine_lr(epoch, &cfg.prox);
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..examples).collect();
        shuffle.fork(epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.training.batch_size) {
            let (x, y) = task.support_batch(chunk);
            let batch = Batch {
                x: &x,
                y: &y,
                loss: task.loss_kind,
                group: task.group,
            };
            match train_step(&mut model, &batch, &trainable, &mut state, &cfg.prox, lr) {
                Ok(loss) => {
                    total += loss;
                    steps += 1;
                }
                Err(e @ Error::NonFinite { .. }) => {
                    warn!("seed {seed}: aborting at epoch {epoch}: {e}");
                    error = Some(e.to_string());
                    stop_reason = StopReason::Abort;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let loss = total / steps as f64;
        let objective = loss + gate_penalty(&model, cfg.prox.lambda);
        history.push(EpochRecord {
            epoch,
            lr,
            loss,
            objective,
            ranks: ranks_of(&model, cfg.eval.eps_rank),
        });
        debug!("seed {seed} epoch {epoch}: loss {loss:.6} objective {objective:.6}");
        if cfg.training.early_stopping && stopper.should_stop(loss) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let final_metric = if stop_reason == StopReason::Abort {
        None
    } else {
        Some(query_metric(&model, &task, cfg)?)
    };
    Ok(RunResult {
        tool_version: VERSION.to_string(),
        config: cfg.clone(),
        seed,
        metric_name: metric_name(cfg).to_string(),
        final_metric,
        final_ranks: ranks_of(&model, cfg.eval.eps_rank),
        trainable_params: params,
        epochs_ran: history.len(),
        stop_reason,
        error,
        query_reads: task.query_reads(),
        history,
    })
}

/// Runs every job on a pool of `threads` workers; results keep job order.
pub fn run_many(jobs: &[(ExperimentConfig, u64)], threads: usize) -> Result<Vec<Result<RunResult>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, seed)| {
                let out = run_experiment(cfg, *seed);
                if let Ok(r) = &out {
                    info!(
                        "{} {} seed {}: {} = {:?}",
                        cfg.name, cfg.strategy, seed, r.metric_name, r.final_metric
                    );
                }
                out
            })
            .collect()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RankInit,
    Lambda,
    K,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank_init" | "r_init" => Ok(SweepAxis::RankInit),
            "lambda" => Ok(SweepAxis::Lambda),
            "k" | "K" => Ok(SweepAxis::K),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Configs for a one-axis sweep. A rank sweep covers both adapter strategies;
/// a lambda sweep always contains the `λ = 0` control.
pub fn sweep_configs(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<ExperimentConfig>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let as_count = |v: f64, what: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("{what} values must be positive integers, got {v}")))
        }
    };
    let mut out = Vec::new();
    match axis {
        SweepAxis::RankInit => {
            for strategy in [StrategyKind::Lora, StrategyKind::Arena] {
                for &v in values {
                    let mut cfg = base.clone();
                    cfg.strategy = strategy;
                    cfg.adapter.r_init = as_count(v, "rank_init")?;
                    out.push(cfg);
                }
            }
        }
        SweepAxis::Lambda => {
            let mut lambdas: Vec<f64> = values.to_vec();
            if !lambdas.contains(&0.0) {
                lambdas.insert(0, 0.0);
            }
            for v in lambdas {
                let mut cfg = base.clone();
                cfg.prox.lambda = v;
                out.push(cfg);
            }
        }
        SweepAxis::K => {
            for &v in values {
                let mut cfg = base.clone();
                cfg.k = as_count(v, "K")?;
                out.push(cfg);
            }
        }
    }
    for cfg in &out {
        cfg.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r_init: usize,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub final_metric: Option<f64>,
    pub final_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSpread {
    pub strategy: StrategyKind,
    pub seed: u64,
    /// Sample standard deviation of the final metric across initial ranks.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub spread: Vec<RankSpread>,
    pub results: Vec<RunResult>,
}

impl SweepTable {
    /// Median over seeds of the across-rank standard deviation.
    pub fn median_spread(&self, strategy: StrategyKind) -> Option<f64> {
        let mut v: Vec<f64> = self
            .spread
            .iter()
            .filter(|s| s.strategy == strategy)
            .map(|s| s.std)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

pub fn rank_init_sweep(cfg: &ExperimentConfig, ranks: &[usize], seeds: &[u64], threads: usize) -> Result<SweepTable> {
    if ranks.is_empty() {
        return Err(Error::Config("rank sweep needs at least one rank".into()));
    }
    let values: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let configs = sweep_configs(cfg, SweepAxis::RankInit, &values)?;
    let jobs: Vec<(ExperimentConfig, u64)> = configs
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let results: Vec<RunResult> = run_many(&jobs, threads)?.into_iter().collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = results
        .iter()
        .map(|r| SweepRow {
            r_init: r.config.adapter.r_init,
            strategy: r.config.strategy,
            seed: r.seed,
            final_metric: r.final_metric,
            final_rank: r.final_rank(),
        })
        .collect();
    let mut spread = Vec::new();
    for strategy in [StrategyKind::Lora, StrategyKind::Arena] {
        for &seed in seeds {
            let metrics: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == strategy && r.seed == seed)
                .filter_map(|r| r.final_metric)
                .collect();
            if let Some((_, std)) = mean_std(&metrics) {
                spread.push(RankSpread { strategy, seed, std });
            }
        }
    }
    Ok(SweepTable { rows, spread, results })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// One flat row per run; the CSV summary format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub strategy: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub r_init: usize,
    pub seed: u64,
    pub final_metric: Option<f64>,
    pub final_rank: Option<usize>,
    pub params: usize,
    pub epochs: usize,
    pub stop_reason: String,
    pub lambda: f64,
    pub rho: f64,
    pub task_mode: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub task: String,
    pub task_mode: String,
    pub strategy: String,
    pub k: usize,
    pub r_init: usize,
    /// Exact bit pattern of λ, so distinct values never merge.
    pub lambda_bits: u64,
}

impl CellKey {
    pub fn lambda(&self) -> f64 {
        f64::from_bits(self.lambda_bits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: CellKey,
    pub runs: usize,
    pub completed: usize,
    pub metric_mean: Option<f64>,
    pub metric_std: Option<f64>,
    pub rank_mean: Option<f64>,
    pub rank_std: Option<f64>,
    pub params_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    /// Cells with no completed run; reported, never imputed.
    pub missing: Vec<CellKey>,
}

pub fn aggregate(rows: &[SummaryRow]) -> Summary {
    if rows.is_empty() {
        warn!("aggregate called with no results");
        return Summary::default();
    }
    let mut groups: BTreeMap<CellKey, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        let key = CellKey {
            task: r.task.clone(),
            task_mode: r.task_mode.clone(),
            strategy: r.strategy.clone(),
            k: r.k,
            r_init: r.r_init,
            lambda_bits: r.lambda.to_bits(),
        };
        groups.entry(key).or_default().push(r);
    }
    let mut summary = Summary::default();
    for (key, members) in groups {
        let metrics: Vec<f64> = members.iter().filter_map(|r| r.final_metric).collect();
        let ranks: Vec<f64> = members.iter().filter_map(|r| r.final_rank.map(|x| x as f64)).collect();
        let (metric_mean, metric_std) = mean_std(&metrics).unzip();
        let (rank_mean, rank_std) = mean_std(&ranks).unzip();
        if metrics.is_empty() {
            summary.missing.push(key.clone());
        }
        summary.cells.push(CellSummary {
            runs: members.len(),
            completed: metrics.len(),
            metric_mean,
            metric_std,
            rank_mean,
            rank_std,
            params_mean: members.iter().map(|r| r.params as f64).sum::<f64>() / members.len() as f64,
            key,
        });
    }
    summary
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn jsonl_bytes(results: &[RunResult]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in results {
        out.extend_from_slice(r.to_json_line()?.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

pub fn summary_csv_bytes(results: &[RunResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r.summary_row()).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

#[derive(Serialize)]
struct RankMetricPoint<'a> {
    strategy: &'a str,
    r_init: usize,
    lambda: f64,
    seed: u64,
    final_rank: Option<usize>,
    final_metric: Option<f64>,
    params: usize,
}

#[derive(Serialize)]
struct TrajectoryPoint<'a> {
    strategy: &'a str,
    r_init: usize,
    lambda: f64,
    seed: u64,
    epoch: usize,
    lr: f64,
    loss: f64,
    objective: f64,
    rank: Option<usize>,
}

/// Rank-versus-metric points, one per run.
pub fn rank_metric_csv_bytes(results: &[RunResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(RankMetricPoint {
            strategy: r.config.strategy.as_str(),
            r_init: r.config.adapter.r_init,
            lambda: r.config.prox.lambda,
            seed: r.seed,
            final_rank: r.final_rank(),
            final_metric: r.final_metric,
            params: r.trainable_params,
        })
        .map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Per-epoch loss, objective and largest adapter rank for every run.
pub fn trajectory_csv_bytes(results: &[RunResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        for e in &r.history {
            w.serialize(TrajectoryPoint {
                strategy: r.config.strategy.as_str(),
                r_init: r.config.adapter.r_init,
                lambda: r.config.prox.lambda,
                seed: r.seed,
                epoch: e.epoch,
                lr: e.lr,
                loss: e.loss,
                objective: e.objective,
                rank: e.ranks.values().copied().max(),
            })
            .map_err(csv_error)?;
        }
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Parses JSON lines, skipping unreadable ones. Returns the results and the
/// number of skipped lines.
pub fn read_jsonl(text: &str) -> (Vec<RunResult>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunResult>(line) {
            Ok(r) => out.push(r),
            Err(e) => {
                warn!("skipping line {}: {e}", i + 1);
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

/// Markdown table of mean ± std per cell; within each task and mode the best
/// metric mean (highest Dice, lowest MSE) is bold.
pub fn markdown_report(summary: &Summary, metric_names: &BTreeMap<String, String>) -> String {
    let group = |k: &CellKey| format!("{}/{}", k.task, k.task_mode);
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for c in &summary.cells {
        if let Some(m) = c.metric_mean {
            let lower = metric_names.get(&c.key.task).is_some_and(|s| s == "mse");
            let e = best.entry(group(&c.key)).or_insert(m);
            if (lower && m < *e) || (!lower && m > *e) {
                *e = m;
            }
        }
    }
    let mut out = String::from(
        "| task | mode | strategy | K | r_init | lambda | runs | metric | final rank | params |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for c in &summary.cells {
        let metric = match (c.metric_mean, c.metric_std) {
            (Some(m), Some(s)) => {
                let text = format!("{m:.4} ± {s:.4}");
                if best.get(&group(&c.key)) == Some(&m) {
                    format!("**{text}**")
                } else {
                    text
                }
            }
            _ => "missing".to_string(),
        };
        let rank = match (c.rank_mean, c.rank_std) {
            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {}/{} | {} | {} | {:.0} |\n",
            c.key.task,
            c.key.task_mode,
            c.key.strategy,
            c.key.k,
            c.key.r_init,
            c.key.lambda(),
            c.completed,
            c.runs,
            metric,
            rank,
            c.params_mean
        ));
    }
    if !summary.missing.is_empty() {
        out.push_str(&format!("\n{} cell(s) have no completed run.\n", summary.missing.len()));
    }
    out
}

/// Query metric of the frozen base model with nothing trained.
pub fn zero_shot_metric(cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    let (model, task) = build_task(cfg, seed)?;
    query_metric(&model, &task, cfg)
}
