//! `cogrnn` command line: train, eval, analyze, sweep.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    aggregate_curves, read_config_hashes, scale_eval, heatmap_rows, psychometric_curve, read_curve_rewards, time_cell_analysis,
    write_cellstats, write_heatmap_png, write_psychometric, ActivityRecord, Thresholds, PSYCH_HEADER,
};
use crate::checkpoint::Checkpoint;
use crate::env::{EnvSpec, TaskSpec, TrialLog, TrialOutcome};
use crate::error::Error;
use crate::experiment::{output_root, run_dir, run_seed, ExperimentConfig, RunSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cogrnn", version, about = "Laplace-memory agents on interval timing tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint across scales.
    Eval(EvalArgs),
    /// Post-hoc analyses of run artifacts.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Execute every run listed in a manifest.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `a.b=value`, applied before validation; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated environment scales.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub scales: Vec<f64>,
    #[arg(long, default_value_t = 600)]
    pub n_trials: usize,
    /// Environment seed for the evaluation trials.
    #[arg(long, default_value_t = 12345)]
    pub seed: u64,
    /// Output directory (defaults to the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Classify units in `activity.bin`, write cellstats.csv and heatmap.png.
    TimeCells(RunArgs),
    /// P(long) per interval from trials.csv written by `eval`.
    Psychometric(RunArgs),
    /// Mean and standard error of learning curves across seed directories.
    Curves(CurvesArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Directory pattern relative to `--run`.
    #[arg(long, default_value = "seed*")]
    pub glob: String,
    /// Trailing smoothing window in trials.
    #[arg(long, default_value_t = 100)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Checkpoint(_) | Error::MemoryConfig(_) | Error::EnvSpec(_) | Error::TrainConfig(_) => {
            EXIT_USAGE
        }
        _ => EXIT_RUNTIME,
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let out = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(AnalyzeCommand::TimeCells(a)) => cmd_time_cells(&a.run),
        Command::Analyze(AnalyzeCommand::Psychometric(a)) => cmd_psychometric(&a.run),
        Command::Analyze(AnalyzeCommand::Curves(a)) => cmd_curves(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

type CmdResult = Result<i32, Error>;

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "exp".into())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let cfg = ExperimentConfig::load(&a.config, &a.overrides)?;
    let seeds = match a.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let root = output_root(&cfg);
    let name = stem(&a.config);
    for seed in seeds {
        let dir = run_dir(&root, &name, &cfg, seed);
        let (s, _) = run_seed(&cfg, seed, &dir, &mut |line| println!("{line}"))?;
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let agent = ck.agent()?;
    let out = a
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    let base = EnvSpec {
        seed: a.seed,
        ..ck.config.env.clone()
    };
    let hash = &ck.config_hash;
    let timing = matches!(base.task, TaskSpec::IntervalTiming { .. });
    let mut acc = BufWriter::new(File::create(out.join("eval.csv"))?);
    writeln!(acc, "scale,n_trials,accuracy,out_of_range,config_hash")?;
    let mut log = TrialLog::with_config_hash(BufWriter::new(File::create(out.join("trials.csv"))?), hash)?;
    let mut psy = Vec::new();
    writeln!(psy, "{PSYCH_HEADER}")?;
    for &scale in &a.scales {
        let (r, outcomes) = scale_eval(&agent, &base, scale, a.n_trials)?;
        writeln!(acc, "{},{},{},{},{hash}", r.scale, r.n, r.accuracy, r.out_of_range)?;
        println!("scale {} accuracy {:.4}", r.scale, r.accuracy);
        let spec = EnvSpec {
            scale: r.scale,
            ..base.clone()
        };
        for o in &outcomes {
            log.append(&spec, o)?;
        }
        if timing {
            write_psychometric(&mut psy, r.scale, &psychometric_curve(&outcomes, &spec.duration_set(), 0)?, hash)?;
        }
    }
    acc.flush()?;
    log.into_inner().flush()?;
    if timing {
        fs::write(out.join("psychometric.csv"), psy)?;
    }
    Ok(EXIT_OK)
}

fn cmd_time_cells(run: &Path) -> CmdResult {
    let bin = run.join("activity.bin");
    if !bin.exists() {
        return Err(Error::Analysis(format!(
            "{} not found; train with record_activity enabled",
            bin.display()
        )));
    }
    let rec = ActivityRecord::load(&bin)?;
    let rep = time_cell_analysis(&rec, &Thresholds::default())?;
    write_cellstats(BufWriter::new(File::create(run.join("cellstats.csv"))?), &rep.cells, &rec.sidecar.config_hash)?;
    let (rows, _) = heatmap_rows(&rep.traces, &rep.cells);
    if !rows.is_empty() {
        write_heatmap_png(&run.join("heatmap.png"), &rows, 12)?;
    }
    let summary = serde_json::json!({
        "core": rec.sidecar.core,
        "config_hash": rec.sidecar.config_hash,
        "n_trials": rep.n_trials,
        "time_cells": rows.len(),
        "diagonality": rep.diagonality,
        "regression": rep.regression,
    });
    fs::write(run.join("timecells.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(EXIT_OK)
}

/// Parse a trial log written by `eval`.
fn read_trial_log(path: &Path) -> Result<Vec<(f64, TrialOutcome, String)>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Analysis(format!("{}: {e}", path.display())))?;
    let bad = |l: &str| Error::Analysis(format!("{}: bad row {l:?}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 && f.len() != 8 {
                return Err(bad(l));
            }
            if f[1] != "interval_timing" {
                return Err(Error::Analysis(format!("psychometric needs interval_timing trials, found {}", f[1])));
            }
            let durations = f[3]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|d| d.parse().map_err(|_| bad(l)))
                .collect::<Result<Vec<usize>, _>>()?;
            let action = if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad(l))?) };
            Ok((
                f[2].parse().map_err(|_| bad(l))?,
                TrialOutcome {
                    trial_id: f[0].parse().map_err(|_| bad(l))?,
                    durations,
                    is_long: None,
                    action,
                    response_time: None,
                    reward: f[5].parse().map_err(|_| bad(l))?,
                    length: f[6].parse().map_err(|_| bad(l))?,
                },
                f.get(7).map(|h| h.to_string()).unwrap_or_default(),
            ))
        })
        .collect()
}

fn cmd_psychometric(run: &Path) -> CmdResult {
    let rows = read_trial_log(&run.join("trials.csv"))?;
    let mut scales: Vec<f64> = rows.iter().map(|r| r.0).collect();
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    let mut out = BufWriter::new(File::create(run.join("psychometric.csv"))?);
    writeln!(out, "{PSYCH_HEADER}")?;
    for s in scales {
        let outcomes: Vec<TrialOutcome> = rows.iter().filter(|r| r.0 == s).map(|r| r.1.clone()).collect();
        let mut intervals: Vec<usize> = outcomes.iter().filter_map(|o| o.durations.first().copied()).collect();
        intervals.sort_unstable();
        intervals.dedup();
        let pts = psychometric_curve(&outcomes, &intervals, 1)?;
        let hash = rows.iter().find(|r| r.0 == s).map(|r| r.2.as_str()).unwrap_or_default();
        write_psychometric(&mut out, s, &pts, hash)?;
    }
    out.flush()?;
    Ok(EXIT_OK)
}

fn cmd_curves(a: &CurvesArgs) -> CmdResult {
    let pattern = a.run.join(&a.glob);
    let pattern = pattern.to_string_lossy();
    let paths = glob::glob(&pattern).map_err(|e| Error::Config {
        field: "glob".into(),
        msg: e.to_string(),
    })?;
    let mut dirs: Vec<PathBuf> = paths.filter_map(|p| p.ok()).filter(|p| p.join("curve.csv").exists()).collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Analysis(format!("no curve.csv under {pattern}")));
    }
    let runs = dirs
        .iter()
        .map(|d| read_curve_rewards(&d.join("curve.csv")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut hashes: Vec<String> = Vec::new();
    for d in &dirs {
        for h in read_config_hashes(&d.join("curve.csv"))? {
            if !hashes.contains(&h) {
                hashes.push(h);
            }
        }
    }
    let hash = hashes.join(";");
    let mut out = BufWriter::new(File::create(a.run.join("curves.csv"))?);
    writeln!(out, "trial,mean,stderr,n_runs,config_hash")?;
    for p in aggregate_curves(&runs, a.window) {
        writeln!(out, "{},{},{},{},{hash}", p.trial, p.mean, p.stderr, p.n)?;
    }
    out.flush()?;
    println!("aggregated {} runs", runs.len());
    Ok(EXIT_OK)
}

/// One entry of a sweep: a config file, a seed and overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRun {
    pub config: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub overrides: Vec<String>,
    #[serde(default)]
    pub tag: Option<String>,
}

/// Cartesian product of override axes and seeds over one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestGrid {
    pub config: PathBuf,
    pub seeds: Vec<u64>,
    /// `key -> values`; every combination becomes a run.
    #[serde(default)]
    pub axes: std::collections::BTreeMap<String, Vec<serde_json::Value>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub runs: Vec<ManifestRun>,
    #[serde(default)]
    pub grids: Vec<ManifestGrid>,
}

impl Manifest {
    /// Expand grids into explicit runs; config paths resolve against `base`.
    pub fn expand(&self, base: &Path) -> Vec<ManifestRun> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut out: Vec<ManifestRun> = self
            .runs
            .iter()
            .map(|r| ManifestRun {
                config: resolve(&r.config),
                ..r.clone()
            })
            .collect();
        for g in &self.grids {
            let mut combos: Vec<Vec<String>> = vec![Vec::new()];
            for (k, vals) in &g.axes {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        vals.iter().map(move |v| {
                            let mut c = c.clone();
                            c.push(format!("{k}={v}"));
                            c
                        })
                    })
                    .collect();
            }
            for c in &combos {
                for &seed in &g.seeds {
                    out.push(ManifestRun {
                        config: resolve(&g.config),
                        seed,
                        overrides: c.clone(),
                        tag: (!c.is_empty()).then(|| c.join(",")),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub config: String,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub tag: Option<String>,
    pub status: String,
    pub error: Option<String>,
    pub summary: Option<RunSummary>,
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    let text = fs::read_to_string(&a.manifest)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config {
        field: "manifest".into(),
        msg: e.to_string(),
    })?;
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let runs = manifest.expand(&base);
    if runs.is_empty() {
        println!("empty manifest: nothing to run");
        return Ok(EXIT_OK);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Error::Config {
            field: "jobs".into(),
            msg: e.to_string(),
        })?;
    let stdout = Mutex::new(());
    let roots = Mutex::new(Vec::<PathBuf>::new());
    let entries: Vec<IndexEntry> = pool.install(|| {
        runs.par_iter()
            .map(|r| {
                let res = (|| -> Result<RunSummary, Error> {
                    let cfg = ExperimentConfig::load(&r.config, &r.overrides)?;
                    let root = output_root(&cfg);
                    roots.lock().expect("lock").push(root.clone());
                    let dir = run_dir(&root, &stem(&r.config), &cfg, r.seed);
                                let (s, _) = run_seed(&cfg, r.seed, &dir, &mut |line| {
                        let _g = stdout.lock();
                        println!("[{}] {line}", r.tag.as_deref().unwrap_or("run"));
                    })?;
                    Ok(s)
                })();
                IndexEntry {
                    config: r.config.display().to_string(),
                    seed: r.seed,
                    overrides: r.overrides.clone(),
                    tag: r.tag.clone(),
                    status: if res.is_ok() { "ok".into() } else { "failed".into() },
                    error: res.as_ref().err().map(|e| e.to_string()),
                    summary: res.ok(),
                }
            })
            .collect()
    });
    let mut roots = roots.into_inner().expect("lock");
    roots.sort();
    roots.dedup();
    let index_root = roots.first().cloned().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&index_root)?;
    let index = index_root.join(format!("sweep-{}.json", stem(&a.manifest)));
    fs::write(&index, serde_json::to_string_pretty(&entries)?)?;
    let failed = entries.iter().filter(|e| e.status != "ok").count();
    println!("{} runs, {failed} failed; index at {}", entries.len(), index.display());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}
