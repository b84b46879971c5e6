//! Trials, sweeps, envelopes, budget matching and the class-incremental
//! protocol.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accounting::{budget_of, params_introspect, BudgetKind, FlopsConvention, ParamMode};
use crate::data::{batch_indices, Dataset, Split, Targets, TaskKind, TaskSequence};
use crate::error::{Error, Result};
use crate::layers::{build_model, ArchSpec, Model};
use crate::nn::{cross_entropy, derive_seed, mse, Matrix, Rng};
use crate::optim::{AdamConfig, AdamState, LbfgsConfig, LbfgsState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Lbfgs,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    128
}
fn default_history() -> usize {
    10
}
fn default_epochs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_history")]
    pub lbfgs_history: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            optimizer: default_optimizer(),
            lr: default_lr(),
            batch_size: default_batch_size(),
            lbfgs_history: default_history(),
            epochs: default_epochs(),
        }
    }
}

impl OptimConfig {
    pub fn adam(lr: f64, batch_size: usize, epochs: usize) -> Self {
        OptimConfig {
            lr,
            batch_size,
            epochs,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub arch: ArchSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optim.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrialStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Maximize,
    Minimize,
}

impl Orientation {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classify => Orientation::Maximize,
            TaskKind::Regress => Orientation::Minimize,
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Orientation::Maximize => a > b,
            Orientation::Minimize => a < b,
        }
    }
}

/// Extremum of a metric history.
pub fn best_of(history: &[f64], orientation: Orientation) -> Option<f64> {
    history.iter().copied().fold(None, |acc, v| match acc {
        Some(b) if !orientation.better(v, b) => Some(b),
        _ => Some(v),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub idx: usize,
    pub arch: ArchSpec,
    pub seed: u64,
    pub params_paper: f64,
    pub params_exact: u64,
    pub flops: f64,
    /// Test metric after each epoch: accuracy in percent or RMSE.
    pub history: Vec<f64>,
    pub best: Option<f64>,
    pub status: TrialStatus,
    pub wall_s: f64,
    pub optim: OptimConfig,
    pub metric: String,
    pub train_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn budget(&self, kind: BudgetKind, mode: ParamMode) -> f64 {
        match (kind, mode) {
            (BudgetKind::Flops, _) => self.flops,
            (BudgetKind::Params, ParamMode::Paper) => self.params_paper,
            (BudgetKind::Params, ParamMode::Exact) => self.params_exact as f64,
        }
    }
}

enum OptimizerState {
    Adam(AdamState),
    Lbfgs(LbfgsState),
}

/// A model bound to its optimizer and batch stream.
pub struct Trainer {
    pub model: Model,
    optimizer: OptimizerState,
    batch_size: usize,
    rng: Rng,
}

fn loss_and_grad(model: &Model, x: &Matrix, targets: &Targets) -> Result<(f64, Model)> {
    let (out, cache) = model.forward_cached(x)?;
    let (loss, upstream) = match targets {
        Targets::Classes { labels, .. } => cross_entropy(&out, labels)?,
        Targets::Values(v) => mse(&out, &Matrix::from_vec(v.len(), 1, v.clone())?)?,
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss}")));
    }
    let (grads, _) = model.backward(&cache, &upstream)?;
    Ok((loss, grads))
}

impl Trainer {
    pub fn new(cfg: &TrialConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(cfg.seed);
        let model = build_model(&cfg.arch, &mut rng.fork(0))?;
        let optimizer = match cfg.optim.optimizer {
            OptimizerKind::Adam => {
                OptimizerState::Adam(AdamState::new(model.num_params(), AdamConfig::with_lr(cfg.optim.lr)))
            }
            OptimizerKind::Lbfgs => OptimizerState::Lbfgs(LbfgsState::new(LbfgsConfig {
                history: cfg.optim.lbfgs_history,
                ..LbfgsConfig::default()
            })),
        };
        Ok(Trainer {
            model,
            optimizer,
            batch_size: cfg.optim.batch_size,
            rng: rng.fork(1),
        })
    }

    /// Checks that `ds` fits the model's input and output sizes.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let arch = self.model.arch();
        if ds.dim() != arch.input_dim() {
            return Err(Error::Config(format!(
                "dataset {} has {} features but the model takes {}",
                ds.name,
                ds.dim(),
                arch.input_dim()
            )));
        }
        let needed = match ds.targets() {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Values(_) => 1,
        };
        let ok = match ds.task_kind() {
            TaskKind::Classify => arch.output_dim() >= needed,
            TaskKind::Regress => arch.output_dim() == 1,
        };
        if !ok {
            return Err(Error::Config(format!(
                "model output width {} does not fit dataset {} ({needed} outputs needed)",
                arch.output_dim(),
                ds.name
            )));
        }
        Ok(())
    }

    /// One pass over shuffled mini-batches; returns the mean batch loss.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<f64> {
        let batches = batch_indices(ds.len(), self.batch_size, &mut self.rng)?;
        let mut total = 0.0;
        for idx in &batches {
            let batch = ds.select(idx);
            total += match &mut self.optimizer {
                OptimizerState::Adam(state) => {
                    let (loss, grads) = loss_and_grad(&self.model, batch.features(), batch.targets())?;
                    state.step_slices(self.model.param_slices_mut(), grads.param_slices())?;
                    loss
                }
                OptimizerState::Lbfgs(state) => {
                    let mut flat = self.model.to_flat();
                    let mut probe = self.model.clone();
                    let outcome = state.step(&mut flat, |p| {
                        probe.load_flat(p)?;
                        let (loss, grads) = loss_and_grad(&probe, batch.features(), batch.targets())?;
                        Ok((loss, grads.to_flat()))
                    })?;
                    if flat.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric("parameters became non-finite".into()));
                    }
                    self.model.load_flat(&flat)?;
                    outcome.loss()
                }
            };
        }
        Ok(total / batches.len() as f64)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<f64> {
        evaluate(&self.model, ds)
    }
}

const EVAL_CHUNK: usize = 1024;

/// Accuracy in percent for classification, RMSE for regression.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    let n = ds.len();
    let mut correct = 0usize;
    let mut sq = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let chunk = ds.select(&idx);
        let out = model.forward(chunk.features())?;
        match chunk.targets() {
            Targets::Classes { labels, .. } => {
                for (r, &l) in labels.iter().enumerate() {
                    let row = out.row(r);
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                        )
                        .0;
                    correct += usize::from(arg == l);
                }
            }
            Targets::Values(v) => {
                for (r, t) in v.iter().enumerate() {
                    sq += (out.get(r, 0) - t).powi(2);
                }
            }
        }
    }
    let metric = match ds.task_kind() {
        TaskKind::Classify => 100.0 * correct as f64 / n as f64,
        TaskKind::Regress => (sq / n as f64).sqrt(),
    };
    if !metric.is_finite() {
        return Err(Error::Numeric(format!("test metric became {metric}")));
    }
    Ok(metric)
}

fn base_record(idx: usize, cfg: &TrialConfig, data: &Split, conv: &FlopsConvention) -> Result<TrialRecord> {
    cfg.validate()?;
    let exact = params_introspect(&Model::zeros(&cfg.arch)?);
    Ok(TrialRecord {
        idx,
        arch: cfg.arch.clone(),
        seed: cfg.seed,
        params_paper: budget_of(&cfg.arch, BudgetKind::Params, ParamMode::Paper, conv)?.value,
        params_exact: exact,
        flops: budget_of(&cfg.arch, BudgetKind::Flops, ParamMode::Paper, conv)?.value,
        history: Vec::new(),
        best: None,
        status: TrialStatus::Ok,
        wall_s: 0.0,
        optim: cfg.optim.clone(),
        metric: match data.test.task_kind() {
            TaskKind::Classify => "accuracy".into(),
            TaskKind::Regress => "rmse".into(),
        },
        train_loss: Vec::new(),
        error: None,
    })
}

/// Trains for `cfg.optim.epochs` epochs, scoring the test split after each.
/// Configuration problems are errors; numeric blow-ups end the trial early
/// with status `DIVERGED`.
pub fn run_trial(cfg: &TrialConfig, data: &Split, conv: &FlopsConvention) -> Result<TrialRecord> {
    run_indexed_trial(0, cfg, data, conv)
}

fn run_indexed_trial(idx: usize, cfg: &TrialConfig, data: &Split, conv: &FlopsConvention) -> Result<TrialRecord> {
    let start = Instant::now();
    let mut rec = base_record(idx, cfg, data, conv)?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.check_dataset(&data.train)?;
    trainer.check_dataset(&data.test)?;
    let orientation = Orientation::for_task(data.test.task_kind());
    for _ in 0..cfg.optim.epochs {
        let step = trainer
            .train_epoch(&data.train)
            .and_then(|loss| Ok((loss, trainer.evaluate(&data.test)?)));
        match step {
            Ok((loss, metric)) => {
                rec.train_loss.push(loss);
                rec.history.push(metric);
            }
            Err(Error::Numeric(msg)) => {
                rec.status = TrialStatus::Diverged;
                rec.error = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    rec.best = best_of(&rec.history, orientation);
    rec.wall_s = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Runs every config with seed `derive_seed(master_seed, idx)` on up to
/// `jobs` threads. `sink` receives records in grid order as soon as each
/// prefix is complete. A trial that fails is recorded as `FAILED`.
pub fn run_sweep(
    grid: &[TrialConfig],
    data: &Split,
    conv: &FlopsConvention,
    master_seed: u64,
    jobs: usize,
    mut sink: impl FnMut(&TrialRecord) -> Result<()>,
) -> Result<Vec<TrialRecord>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let seeded: Vec<TrialConfig> = grid
        .iter()
        .enumerate()
        .map(|(i, c)| TrialConfig {
            seed: derive_seed(master_seed, i as u64),
            ..c.clone()
        })
        .collect();
    let run_one = |i: usize| -> TrialRecord {
        let cfg = &seeded[i];
        run_indexed_trial(i, cfg, data, conv).unwrap_or_else(|e| failed_record(i, cfg, data, conv, e))
    };

    let mut out = Vec::with_capacity(grid.len());
    let jobs = jobs.clamp(1, grid.len());
    if jobs == 1 {
        for i in 0..seeded.len() {
            let rec = run_one(i);
            sink(&rec)?;
            out.push(rec);
        }
        return Ok(out);
    }

    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel::<TrialRecord>();
        for _ in 0..jobs {
            let tx = tx.clone();
            let (next, run_one, total) = (&next, &run_one, seeded.len());
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total || tx.send(run_one(i)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, TrialRecord> = BTreeMap::new();
        for rec in rx {
            pending.insert(rec.idx, rec);
            while let Some(rec) = pending.remove(&out.len()) {
                if let Err(e) = sink(&rec) {
                    next.store(seeded.len(), Ordering::Relaxed);
                    return Err(e);
                }
                out.push(rec);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

fn failed_record(idx: usize, cfg: &TrialConfig, data: &Split, conv: &FlopsConvention, err: Error) -> TrialRecord {
    let mut rec = base_record(idx, cfg, data, conv).unwrap_or_else(|_| TrialRecord {
        idx,
        arch: cfg.arch.clone(),
        seed: cfg.seed,
        params_paper: 0.0,
        params_exact: 0,
        flops: 0.0,
        history: Vec::new(),
        best: None,
        status: TrialStatus::Failed,
        wall_s: 0.0,
        optim: cfg.optim.clone(),
        metric: String::new(),
        train_loss: Vec::new(),
        error: None,
    });
    rec.status = TrialStatus::Failed;
    rec.error = Some(err.to_string());
    rec
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub budget: f64,
    pub metric: f64,
    pub idx: usize,
}

/// Pareto-optimal points sorted by budget, each strictly better than every
/// cheaper one. Among exact duplicates the lowest `idx` survives. Points
/// with a NaN coordinate are ignored.
pub fn upper_envelope(points: &[EnvelopePoint], orientation: Orientation) -> Vec<EnvelopePoint> {
    let mut pts: Vec<EnvelopePoint> = points
        .iter()
        .copied()
        .filter(|p| !p.budget.is_nan() && !p.metric.is_nan())
        .collect();
    pts.sort_by(|a, b| {
        let by_metric = match orientation {
            Orientation::Maximize => b.metric.total_cmp(&a.metric),
            Orientation::Minimize => a.metric.total_cmp(&b.metric),
        };
        a.budget.total_cmp(&b.budget).then(by_metric).then(a.idx.cmp(&b.idx))
    });
    let mut out: Vec<EnvelopePoint> = Vec::new();
    for p in pts {
        if out.last().is_none_or(|best| orientation.better(p.metric, best.metric)) {
            out.push(p);
        }
    }
    out
}

/// Envelope of the `OK` records.
pub fn record_envelope(
    records: &[TrialRecord],
    kind: BudgetKind,
    mode: ParamMode,
    orientation: Orientation,
) -> Vec<EnvelopePoint> {
    let points: Vec<EnvelopePoint> = records
        .iter()
        .filter(|r| r.status == TrialStatus::Ok)
        .filter_map(|r| {
            r.best.map(|m| EnvelopePoint {
                budget: r.budget(kind, mode),
                metric: m,
                idx: r.idx,
            })
        })
        .collect();
    upper_envelope(&points, orientation)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetMatches {
    /// `(index into a, index into b)`.
    pub pairs: Vec<(usize, usize)>,
    pub unpaired: Vec<usize>,
}

/// Pairs each budget in `a` with the nearest budget in `b` when
/// `|b − a| / a ≤ tol`. Ties go to the earlier entry of `b`.
pub fn match_budgets(a: &[f64], b: &[f64], tol: f64) -> Result<BudgetMatches> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("match tolerance must be positive, got {tol}")));
    }
    let mut res = BudgetMatches::default();
    for (i, &ba) in a.iter().enumerate() {
        let nearest = b.iter().enumerate().fold(None::<(usize, f64)>, |acc, (j, &bb)| {
            let gap = (bb - ba).abs();
            match acc {
                Some((_, g)) if g <= gap => acc,
                _ => Some((j, gap)),
            }
        });
        match nearest {
            Some((j, gap)) if gap <= tol * ba.abs() => res.pairs.push((i, j)),
            _ => res.unpaired.push(i),
        }
    }
    Ok(res)
}

/// `a[t][i]`: accuracy on task `i` after training task `t`, for `i ≤ t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::shape("AccuracyMatrix", t + 1, row.len()));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(Error::Input(format!("accuracy {v} outside [0, 100]")));
            }
        }
        Ok(AccuracyMatrix { rows })
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn last_row(&self) -> &[f64] {
        self.rows.last().map_or(&[], |r| r.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    pub acc: f64,
    pub bwt: Option<f64>,
}

pub fn cl_metrics(m: &AccuracyMatrix) -> Result<ClMetrics> {
    let t = m.num_tasks();
    if t == 0 {
        return Err(Error::Input("accuracy matrix has no tasks".into()));
    }
    let last = m.last_row();
    let acc = last.iter().sum::<f64>() / t as f64;
    let bwt = (t >= 2).then(|| (0..t - 1).map(|i| last[i] - m.rows[i][i]).sum::<f64>() / (t - 1) as f64);
    Ok(ClMetrics { acc, bwt })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualRecord {
    pub matrix: AccuracyMatrix,
    pub acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bwt: Option<f64>,
    pub status: TrialStatus,
    pub params_paper: f64,
    pub params_exact: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains the tasks in order on one model and one optimizer, with no replay.
/// After each task every task seen so far is scored on its test split.
pub fn run_continual(
    cfg: &TrialConfig,
    train: &TaskSequence,
    test: &TaskSequence,
    conv: &FlopsConvention,
) -> Result<ContinualRecord> {
    if train.is_empty() || train.len() != test.len() {
        return Err(Error::Config(format!(
            "need matching non-empty task lists, got {} train / {} test",
            train.len(),
            test.len()
        )));
    }
    let mut trainer = Trainer::new(cfg)?;
    for task in train.tasks.iter().chain(&test.tasks) {
        trainer.check_dataset(&task.data)?;
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(train.len());
    let mut status = TrialStatus::Ok;
    let mut error = None;
    'tasks: for (t, task) in train.tasks.iter().enumerate() {
        let mut row = Vec::with_capacity(t + 1);
        let step = (0..cfg.optim.epochs)
            .try_for_each(|_| trainer.train_epoch(&task.data).map(|_| ()))
            .and_then(|_| {
                for seen in &test.tasks[..=t] {
                    row.push(trainer.evaluate(&seen.data)?);
                }
                Ok(())
            });
        match step {
            Ok(()) => rows.push(row),
            Err(Error::Numeric(msg)) => {
                status = TrialStatus::Diverged;
                error = Some(msg);
                break 'tasks;
            }
            Err(e) => return Err(e),
        }
    }
    let matrix = AccuracyMatrix::new(rows)?;
    let metrics = if matrix.num_tasks() > 0 {
        cl_metrics(&matrix)?
    } else {
        ClMetrics { acc: 0.0, bwt: None }
    };
    Ok(ContinualRecord {
        matrix,
        acc: metrics.acc,
        bwt: metrics.bwt,
        status,
        params_paper: budget_of(&cfg.arch, BudgetKind::Params, ParamMode::Paper, conv)?.value,
        params_exact: params_introspect(&trainer.model),
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::SplineSpec;
    use crate::data::{gen_formula_dataset, split_class_incremental, FormulaId, FormulaSpec};
    use crate::layers::ArchKind;
    use crate::nn::ActivationKind;

    fn tiny_regression() -> Split {
        let mut spec = FormulaSpec::builtin(FormulaId::Product);
        spec.n_train = 64;
        spec.n_test = 32;
        gen_formula_dataset(&spec, &Rng::new(3)).unwrap()
    }

    fn tiny_cfg(epochs: usize) -> TrialConfig {
        TrialConfig {
            arch: ArchSpec::mlp(&[2, 4, 1], ActivationKind::Silu),
            optim: OptimConfig::adam(1e-2, 16, epochs),
            seed: 5,
        }
    }

    fn pt(budget: f64, metric: f64, idx: usize) -> EnvelopePoint {
        EnvelopePoint { budget, metric, idx }
    }

    #[test]
    fn best_follows_orientation() {
        assert_eq!(best_of(&[0.5, 0.7, 0.6], Orientation::Maximize), Some(0.7));
        assert_eq!(best_of(&[0.5, 0.7, 0.6], Orientation::Minimize), Some(0.5));
        assert_eq!(best_of(&[], Orientation::Maximize), None);
    }

    #[test]
    fn single_epoch_trial() {
        let data = tiny_regression();
        let rec = run_trial(&tiny_cfg(1), &data, &FlopsConvention::default()).unwrap();
        assert_eq!(rec.history.len(), 1);
        assert_eq!(rec.best, Some(rec.history[0]));
        assert_eq!(rec.status, TrialStatus::Ok);
        assert_eq!(rec.metric, "rmse");
    }

    #[test]
    fn trials_are_deterministic_and_learn() {
        let data = tiny_regression();
        let conv = FlopsConvention::default();
        let mut a = run_trial(&tiny_cfg(30), &data, &conv).unwrap();
        let mut b = run_trial(&tiny_cfg(30), &data, &conv).unwrap();
        a.wall_s = 0.0;
        b.wall_s = 0.0;
        assert_eq!(a, b);
        assert!(a.history[29] < a.history[0]);
        assert_eq!(a.best, best_of(&a.history, Orientation::Minimize));
    }

    #[test]
    fn lbfgs_trial_runs() {
        let data = tiny_regression();
        let mut cfg = tiny_cfg(5);
        cfg.optim.optimizer = OptimizerKind::Lbfgs;
        cfg.optim.batch_size = 64;
        let rec = run_trial(&cfg, &data, &FlopsConvention::default()).unwrap();
        assert_eq!(rec.status, TrialStatus::Ok);
        assert!(rec.history[4] < rec.history[0]);
    }

    #[test]
    fn huge_learning_rate_is_recorded_as_diverged() {
        let data = tiny_regression();
        let mut cfg = tiny_cfg(50);
        cfg.optim.lr = 1e300;
        let rec = run_trial(&cfg, &data, &FlopsConvention::default()).unwrap();
        assert_eq!(rec.status, TrialStatus::Diverged);
        assert!(rec.history.len() < 50);
    }

    #[test]
    fn sweep_is_ordered_and_isolates_failures() {
        let data = tiny_regression();
        let conv = FlopsConvention::default();
        let mut bad = tiny_cfg(2);
        bad.arch = ArchSpec::mlp(&[3, 1], ActivationKind::Relu);
        let mut kan = tiny_cfg(2);
        kan.arch = ArchSpec::kan(&[2, 2, 1], SplineSpec::new(3, 3, -1.0, 1.0).unwrap());
        let grid = vec![tiny_cfg(2), bad, kan.clone(), tiny_cfg(3)];
        let mut streamed = Vec::new();
        let serial = run_sweep(&grid, &data, &conv, 42, 1, |r| {
            streamed.push(r.idx);
            Ok(())
        })
        .unwrap();
        assert_eq!(streamed, vec![0, 1, 2, 3]);
        assert_eq!(serial[1].status, TrialStatus::Failed);
        assert_eq!(
            serial[2].params_paper,
            budget_of(&kan.arch, BudgetKind::Params, ParamMode::Paper, &conv)
                .unwrap()
                .value
        );
        assert_eq!(
            serial[2].flops,
            budget_of(&kan.arch, BudgetKind::Flops, ParamMode::Paper, &conv)
                .unwrap()
                .value
        );
        for (i, r) in serial.iter().enumerate() {
            assert_eq!(r.seed, derive_seed(42, i as u64));
        }

        let mut order = Vec::new();
        let parallel = run_sweep(&grid, &data, &conv, 42, 3, |r| {
            order.push(r.idx);
            Ok(())
        })
        .unwrap();
        assert_eq!(order, vec![0, 1, 2, 3]);
        let strip = |v: &[TrialRecord]| {
            v.iter()
                .map(|r| TrialRecord {
                    wall_s: 0.0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&serial), strip(&parallel));

        let single = run_sweep(&grid[..1], &data, &conv, 42, 1, |_| Ok(())).unwrap();
        let direct = run_trial(
            &TrialConfig {
                seed: derive_seed(42, 0),
                ..grid[0].clone()
            },
            &data,
            &conv,
        )
        .unwrap();
        assert_eq!(strip(&single), strip(&[direct]));
    }

    #[test]
    fn envelope_examples() {
        let pts = [pt(1.0, 0.5, 0), pt(2.0, 0.4, 1), pt(3.0, 0.7, 2)];
        assert_eq!(upper_envelope(&pts, Orientation::Maximize), vec![pts[0], pts[2]]);
        assert_eq!(upper_envelope(&pts[..1], Orientation::Maximize), vec![pts[0]]);
        let neg: Vec<EnvelopePoint> = pts.iter().map(|p| pt(p.budget, -p.metric, p.idx)).collect();
        let idx = |v: Vec<EnvelopePoint>| v.into_iter().map(|p| p.idx).collect::<Vec<_>>();
        assert_eq!(
            idx(upper_envelope(&neg, Orientation::Minimize)),
            idx(upper_envelope(&pts, Orientation::Maximize))
        );
        let ties = [pt(1.0, 0.5, 3), pt(1.0, 0.5, 1), pt(1.0, 0.6, 2), pt(2.0, 0.6, 0)];
        assert_eq!(upper_envelope(&ties, Orientation::Maximize), vec![ties[2]]);
        let env = upper_envelope(&pts, Orientation::Maximize);
        assert_eq!(upper_envelope(&env, Orientation::Maximize), env);
    }

    #[test]
    fn budget_matching_examples() {
        let m = match_budgets(&[100.0], &[104.0], 0.05).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        let m = match_budgets(&[100.0], &[110.0], 0.05).unwrap();
        assert_eq!(m.unpaired, vec![0]);
        let same = [10.0, 20.0, 30.0];
        assert_eq!(
            match_budgets(&same, &same, 0.01).unwrap().pairs,
            vec![(0, 0), (1, 1), (2, 2)]
        );
        assert!(match_budgets(&same, &same, 0.0).is_err());
    }

    #[test]
    fn continual_metric_examples() {
        let m = AccuracyMatrix::new(vec![vec![90.0], vec![80.0, 85.0], vec![10.0, 20.0, 95.0]]).unwrap();
        let cm = cl_metrics(&m).unwrap();
        assert!((cm.acc - 125.0 / 3.0).abs() < 1e-12);
        assert_eq!(cm.bwt, Some(-72.5));
        let flat = AccuracyMatrix::new(vec![vec![60.0], vec![60.0, 60.0]]).unwrap();
        assert_eq!(
            cl_metrics(&flat).unwrap(),
            ClMetrics {
                acc: 60.0,
                bwt: Some(0.0)
            }
        );
        let one = AccuracyMatrix::new(vec![vec![77.0]]).unwrap();
        assert_eq!(cl_metrics(&one).unwrap().bwt, None);
        assert!(AccuracyMatrix::new(vec![vec![1.0, 2.0]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![101.0]]).is_err());
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, "[[90.0],[80.0,85.0],[10.0,20.0,95.0]]");
    }

    fn blobs() -> (Dataset, Dataset) {
        let make = |seed: u64, n: usize| {
            let mut rng = Rng::new(seed);
            let mut x = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let c = i % 4;
                let (cx, cy) = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)][c];
                x.push(cx + rng.normal(0.0, 0.2));
                x.push(cy + rng.normal(0.0, 0.2));
                labels.push(c);
            }
            Dataset::new(
                "blobs",
                Matrix::from_vec(n, 2, x).unwrap(),
                Targets::Classes { labels, num_classes: 4 },
            )
            .unwrap()
        };
        (make(1, 400), make(2, 200))
    }

    #[test]
    fn continual_single_group_matches_plain_training() {
        let (train, test) = blobs();
        let conv = FlopsConvention::default();
        let cfg = TrialConfig {
            arch: ArchSpec::mlp(&[2, 8, 4], ActivationKind::Relu),
            optim: OptimConfig::adam(1e-2, 32, 3),
            seed: 8,
        };
        let all = vec![vec![0, 1, 2, 3]];
        let rec = run_continual(
            &cfg,
            &split_class_incremental(&train, &all).unwrap(),
            &split_class_incremental(&test, &all).unwrap(),
            &conv,
        )
        .unwrap();
        assert_eq!(rec.matrix.num_tasks(), 1);
        assert_eq!(rec.bwt, None);
        let plain = run_trial(&cfg, &Split { train, test }, &conv).unwrap();
        assert_eq!(rec.matrix.get(0, 0), plain.history.last().copied());
        assert_eq!(rec.acc, rec.matrix.get(0, 0).unwrap());
    }

    #[test]
    fn continual_matrix_is_lower_triangular() {
        let (train, test) = blobs();
        let groups = vec![vec![0, 1], vec![2, 3]];
        let cfg = TrialConfig {
            arch: ArchSpec::spline_mlp(
                ArchKind::MlpSplinePre,
                &[2, 6, 4],
                SplineSpec::new(3, 2, -2.0, 2.0).unwrap(),
            ),
            optim: OptimConfig::adam(1e-2, 32, 2),
            seed: 1,
        };
        let rec = run_continual(
            &cfg,
            &split_class_incremental(&train, &groups).unwrap(),
            &split_class_incremental(&test, &groups).unwrap(),
            &FlopsConvention::default(),
        )
        .unwrap();
        assert_eq!(
            rec.matrix.rows().iter().map(|r| r.len()).collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert!(rec.bwt.is_some());
    }
}
