use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use kanbench::accounting::{
    flops_measured, layer_accounts, params_introspect, BudgetKind, FlopsConvention, LayerAccount, ParamMode,
};
use kanbench::bench::{
    run_continual, run_sweep, run_trial, upper_envelope, EnvelopePoint, Orientation, TrialRecord, TrialStatus,
};
use kanbench::bspline::SplineSpec;
use kanbench::data::{split_class_incremental, validate_groups, TaskKind};
use kanbench::layers::{ArchKind, ArchSpec, Model};
use kanbench::nn::{derive_seed, ActivationKind};

use crate::config::{load_dataset, read_config, ExperimentConfig, LoadedConfig};
use crate::{ArchArgs, BudgetChoice, Cli, Command, EnvelopeArgs, MetricChoice, OrientationChoice};

/// A run that completed but produced nothing to report.
#[derive(Debug)]
pub struct EmptyResult(pub String);

impl fmt::Display for EmptyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for EmptyResult {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<EmptyResult>().is_some() {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Params(args) => cmd_params(&cli, args),
        Command::Flops(args) => cmd_flops(&cli, args),
        Command::Train => cmd_train(&cli),
        Command::Sweep => cmd_sweep(&cli),
        Command::Envelope(args) => cmd_envelope(&cli, args),
        Command::Cl => cmd_cl(&cli),
    }
}

fn require_config(cli: &Cli) -> Result<LoadedConfig> {
    let path = cli.config.as_deref().context("this command needs --config <path>")?;
    read_config(path)
}

fn master_seed(cli: &Cli, cfg: &ExperimentConfig) -> u64 {
    cli.seed.unwrap_or(cfg.seed)
}

fn out_path(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Option<PathBuf> {
    cli.out.clone().or_else(|| cfg.and_then(|c| c.out.clone()))
}

fn arch_from_flags(a: &ArchArgs) -> Result<ArchSpec> {
    let kind = a.kind.unwrap_or(ArchKind::Mlp);
    if a.widths.len() < 2 {
        bail!("--widths needs at least an input and an output width, e.g. --widths 784,10");
    }
    let spline_flags = a.grid.is_some() || a.order.is_some() || !a.range.is_empty();
    let mut arch = if kind == ArchKind::Mlp {
        if spline_flags {
            bail!("--grid, --order and --range only apply to spline kinds");
        }
        ArchSpec::mlp(&a.widths, a.activation.unwrap_or(ActivationKind::Relu))
    } else {
        let (lo, hi) = match a.range.as_slice() {
            [] => (-1.0, 1.0),
            [lo, hi] => (*lo, *hi),
            _ => bail!("--range takes exactly two values: lo,hi"),
        };
        let spline = SplineSpec::new(a.grid.unwrap_or(5), a.order.unwrap_or(3), lo, hi)?;
        let mut arch = match kind {
            ArchKind::Kan => ArchSpec::kan(&a.widths, spline),
            k => ArchSpec::spline_mlp(k, &a.widths, spline),
        };
        if let Some(act) = a.activation {
            arch.activation = act;
        }
        arch
    };
    arch.use_norm = a.use_norm;
    arch.nonlinear_first = a.nonlinear_first;
    arch.validate()?;
    Ok(arch)
}

/// Architecture from flags when `--widths` is given, otherwise from the
/// config. The config's FLOPs convention applies either way.
fn resolve_arch(cli: &Cli, a: &ArchArgs) -> Result<(ArchSpec, FlopsConvention)> {
    let cfg = cli.config.as_deref().map(read_config).transpose()?;
    let conv = cfg.as_ref().map(|c| c.base.flops).unwrap_or_default();
    let arch = match (&cfg, a.widths.is_empty() && a.kind.is_none()) {
        (Some(c), true) => c.base.arch.clone(),
        _ => arch_from_flags(a)?,
    };
    Ok((arch, conv))
}

fn emit(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fmt_widths(w: &[usize]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Serialize)]
struct ParamsReport<'a> {
    arch: &'a ArchSpec,
    layers: &'a [LayerAccount],
    total_paper: u64,
    total_exact: u64,
}

fn cmd_params(cli: &Cli, a: &ArchArgs) -> Result<()> {
    let (arch, conv) = resolve_arch(cli, a)?;
    let layers = layer_accounts(&arch, &conv)?;
    let report = ParamsReport {
        arch: &arch,
        layers: &layers,
        total_paper: layers.iter().map(|l| l.params_paper).sum(),
        total_exact: params_introspect(&Model::zeros(&arch)?),
    };
    if cli.json {
        return emit(cli, &format!("{}\n", serde_json::to_string(&report)?));
    }
    let mut s = format!("{} [{}]\n", arch.kind, fmt_widths(&arch.widths));
    s.push_str(&format!(
        "{:>5}  {:<16} {:>7} {:>7} {:>12} {:>12}\n",
        "layer", "kind", "d_in", "d_out", "paper", "exact"
    ));
    for l in &layers {
        s.push_str(&format!(
            "{:>5}  {:<16} {:>7} {:>7} {:>12} {:>12}\n",
            l.layer, l.kind, l.d_in, l.d_out, l.params_paper, l.params_exact
        ));
    }
    s.push_str(&format!(
        "{:>5}  {:<16} {:>7} {:>7} {:>12} {:>12}\n",
        "total", "", "", "", report.total_paper, report.total_exact
    ));
    emit(cli, &s)
}

#[derive(Serialize)]
struct FlopsReport<'a> {
    arch: &'a ArchSpec,
    convention: FlopsConvention,
    layers: &'a [LayerAccount],
    total: f64,
    /// Instrumented count on an all-ones input row.
    measured_diagnostic: f64,
}

fn cmd_flops(cli: &Cli, a: &ArchArgs) -> Result<()> {
    let (arch, conv) = resolve_arch(cli, a)?;
    let layers = layer_accounts(&arch, &conv)?;
    let model = Model::zeros(&arch)?;
    let report = FlopsReport {
        arch: &arch,
        convention: conv,
        layers: &layers,
        total: layers.iter().map(|l| l.flops).sum(),
        measured_diagnostic: flops_measured(&model, &conv, &vec![1.0; arch.input_dim()])?,
    };
    if cli.json {
        return emit(cli, &format!("{}\n", serde_json::to_string(&report)?));
    }
    let mut s = format!(
        "{} [{}]  relu={} gelu={} silu={}\n",
        arch.kind,
        fmt_widths(&arch.widths),
        conv.relu,
        conv.gelu,
        conv.silu
    );
    s.push_str(&format!(
        "{:>5}  {:<16} {:>7} {:>7} {:>16}\n",
        "layer", "kind", "d_in", "d_out", "flops"
    ));
    for l in &layers {
        s.push_str(&format!(
            "{:>5}  {:<16} {:>7} {:>7} {:>16}\n",
            l.layer, l.kind, l.d_in, l.d_out, l.flops
        ));
    }
    s.push_str(&format!(
        "{:>5}  {:<16} {:>7} {:>7} {:>16}\n",
        "total", "", "", "", report.total
    ));
    s.push_str(&format!(
        "measured (diagnostic, unit probe): {}\n",
        report.measured_diagnostic
    ));
    emit(cli, &s)
}

/// Line-oriented record sink; every record is flushed before the next
/// trial finishes so an interrupted run leaves a valid prefix.
struct JsonlSink {
    file: File,
    path: PathBuf,
}

impl JsonlSink {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(JsonlSink {
            file,
            path: path.to_path_buf(),
        })
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_string(value)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .with_context(|| format!("cannot write {}", self.path.display()))
    }
}

fn describe(rec: &TrialRecord) -> String {
    let status = match rec.status {
        TrialStatus::Ok => "OK",
        TrialStatus::Diverged => "DIVERGED",
        TrialStatus::Failed => "FAILED",
    };
    let best = rec.best.map_or_else(|| "-".to_string(), |b| format!("{b:.6}"));
    format!(
        "{} [{}] params={} {} best {}={}",
        rec.arch.kind,
        fmt_widths(&rec.arch.widths),
        rec.params_paper,
        status,
        rec.metric,
        best
    )
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let loaded = require_config(cli)?;
    if loaded.has_sweep {
        bail!("config declares a sweep; run `kanbench sweep` instead");
    }
    let cfg = &loaded.base;
    let seed = master_seed(cli, cfg);
    let data = load_dataset(cfg.dataset()?, seed)?;
    let rec = run_trial(&cfg.trial(derive_seed(seed, 0)), &data, &cfg.flops)?;
    match out_path(cli, Some(cfg)) {
        Some(path) => {
            JsonlSink::create(&path)?.write(&rec)?;
            if cli.json {
                println!("{}", serde_json::to_string(&rec)?);
            } else {
                println!("{}", describe(&rec));
            }
        }
        None => {
            println!("{}", serde_json::to_string(&rec)?);
            if !cli.json {
                eprintln!("{}", describe(&rec));
            }
        }
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let loaded = require_config(cli)?;
    if !loaded.has_sweep {
        bail!("config has no \"sweep\" block");
    }
    let base = &loaded.base;
    let seed = master_seed(cli, base);
    let data = load_dataset(base.dataset()?, seed)?;
    let grid: Vec<_> = loaded.trials.iter().map(|t| t.trial(0)).collect();
    let mut sink = out_path(cli, Some(base)).map(|p| JsonlSink::create(&p)).transpose()?;
    let total = grid.len();
    let mut sink_err = None;
    let result = run_sweep(&grid, &data, &base.flops, seed, cli.jobs, |rec| {
        eprintln!("[{}/{}] {} ({:.1}s)", rec.idx + 1, total, describe(rec), rec.wall_s);
        let written = match sink.as_mut() {
            Some(s) => s.write(rec),
            None => serde_json::to_string(rec)
                .map(|line| println!("{line}"))
                .map_err(Into::into),
        };
        written.map_err(|e| {
            let msg = e.to_string();
            sink_err = Some(e);
            kanbench::Error::Config(msg)
        })
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let records = result?;
    let ok = records.iter().filter(|r| r.status == TrialStatus::Ok).count();
    eprintln!("{ok}/{total} trials OK");
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let f = File::open(path).with_context(|| format!("cannot open results {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}: not a trial record", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

fn cmd_envelope(cli: &Cli, a: &EnvelopeArgs) -> Result<()> {
    let records = read_records(&a.results)?;
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.status == TrialStatus::Ok).collect();
    let Some(first) = ok.first() else {
        return Err(EmptyResult(format!("{} has no OK records", a.results.display())).into());
    };
    let orientation = match a.orientation {
        Some(OrientationChoice::Max) => Orientation::Maximize,
        Some(OrientationChoice::Min) => Orientation::Minimize,
        None if first.metric == "rmse" => Orientation::Minimize,
        None => Orientation::Maximize,
    };
    let (kind, mode) = match a.budget {
        BudgetChoice::Params => (BudgetKind::Params, ParamMode::Paper),
        BudgetChoice::ParamsExact => (BudgetKind::Params, ParamMode::Exact),
        BudgetChoice::Flops => (BudgetKind::Flops, ParamMode::Paper),
    };
    let points: Vec<EnvelopePoint> = ok
        .iter()
        .filter_map(|r| {
            let metric = match a.metric {
                MetricChoice::Best => r.best,
                MetricChoice::Last => r.history.last().copied(),
            }?;
            Some(EnvelopePoint {
                budget: r.budget(kind, mode),
                metric,
                idx: r.idx,
            })
        })
        .collect();
    let env = upper_envelope(&points, orientation);
    if env.is_empty() {
        return Err(EmptyResult(format!("{} has no scored OK records", a.results.display())).into());
    }
    let mut s = String::from("budget,metric,idx\n");
    for p in &env {
        s.push_str(&format!("{},{},{}\n", p.budget, p.metric, p.idx));
    }
    emit(cli, &s)
}

fn cmd_cl(cli: &Cli) -> Result<()> {
    let loaded = require_config(cli)?;
    if loaded.has_sweep {
        bail!("`cl` does not run sweeps; remove the \"sweep\" block");
    }
    let cfg = &loaded.base;
    let groups = cfg.continual.clone().unwrap_or_default().groups;
    validate_groups(&groups)?;
    let seed = master_seed(cli, cfg);
    let data = load_dataset(cfg.dataset()?, seed)?;
    if data.train.task_kind() != TaskKind::Classify {
        bail!("continual learning needs a classification dataset");
    }
    let train = split_class_incremental(&data.train, &groups)?;
    let test = split_class_incremental(&data.test, &groups)?;
    let rec = run_continual(&cfg.trial(derive_seed(seed, 0)), &train, &test, &cfg.flops)?;
    let json = serde_json::to_string(&rec)?;
    match out_path(cli, Some(cfg)) {
        Some(path) => {
            std::fs::write(&path, format!("{json}\n")).with_context(|| format!("cannot write {}", path.display()))?;
            if cli.json {
                println!("{json}");
            } else {
                let bwt = rec.bwt.map_or_else(|| "n/a".to_string(), |b| format!("{b:.3}"));
                println!("ACC {:.3}  BWT {}  ({} tasks)", rec.acc, bwt, rec.matrix.num_tasks());
            }
        }
        None => println!("{json}"),
    }
    Ok(())
}
