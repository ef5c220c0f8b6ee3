//! Experiment configuration files, overrides, hashing and single-seed runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::record_activity;
use crate::checkpoint::Checkpoint;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::laplace::MemoryConfig;
use crate::nets::{AgentSpec, CoreSpec};
use crate::trainer::{write_curve_row, TrainConfig, Trainer, CURVE_HEADER};

fn d_dense() -> usize {
    64
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_activity_trials() -> usize {
    300
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub core: CoreSpec,
    #[serde(default)]
    pub memory: MemoryConfig,
    /// Width of the dense layer feeding the heads.
    #[serde(default = "d_dense")]
    pub dense: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Output root; `LAPLACE_RL_OUT` takes precedence.
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Record core activity on greedy rollouts after training.
    #[serde(default)]
    pub record_activity: bool,
    #[serde(default = "d_activity_trials")]
    pub activity_trials: usize,
}

/// Fields that change what a run computes; seeds and paths are excluded.
#[derive(Serialize)]
struct Hashed<'a> {
    env: &'a EnvSpec,
    core: &'a CoreSpec,
    memory: &'a MemoryConfig,
    dense: usize,
    train: &'a TrainConfig,
    record_activity: bool,
    activity_trials: usize,
}

impl ExperimentConfig {
    pub fn agent_spec(&self) -> AgentSpec {
        AgentSpec {
            core: self.core.clone(),
            memory: self.memory.clone(),
            dense: self.dense,
        }
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON of the
    /// run-defining fields.
    pub fn hash(&self) -> String {
        let h = Hashed {
            env: &self.env,
            core: &self.core,
            memory: &self.memory,
            dense: self.dense,
            train: &self.train,
            record_activity: self.record_activity,
            activity_trials: self.activity_trials,
        };
        let json = serde_json::to_string(&h).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, e: Error| Error::Config {
            field: f.into(),
            msg: e.to_string(),
        };
        self.env.validate().map_err(|e| field("env", e))?;
        let mut mem = self.memory.clone();
        mem.input_dim = self.env.task.obs_dim();
        mem.validate().map_err(|e| field("memory", e))?;
        self.train.validate()?;
        if self.dense == 0 {
            return Err(Error::Config {
                field: "dense".into(),
                msg: "must be positive".into(),
            });
        }
        if self.core.hidden == 0 {
            return Err(Error::Config {
                field: "core.hidden".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                field: if path == "." { "config".into() } else { path },
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load, apply `a.b=value` overrides, deserialize and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "config".into(),
            msg: format!("{}: {e}", path.display()),
        })?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }
}

/// Set a dotted path in a JSON document. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        field: spec.into(),
        msg: "override must look like a.b=value".into(),
    })?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config {
            field: path.into(),
            msg: "empty key in override path".into(),
        });
    }
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            return Err(Error::Config {
                field: path.into(),
                msg: format!("`{k}` is not inside an object"),
            });
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(m) => {
            m.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config {
            field: path.into(),
            msg: "parent is not an object".into(),
        }),
    }
}

/// Output root: `LAPLACE_RL_OUT`, else the config's `output_dir`, else `runs`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    if let Ok(p) = std::env::var("LAPLACE_RL_OUT") {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from(cfg.output_dir.clone().unwrap_or_else(|| "runs".into()))
}

pub fn run_dir(root: &Path, stem: &str, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    root.join(format!("{stem}-{}", cfg.hash())).join(format!("seed{seed}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub trials: usize,
    pub trials_to_criterion: Option<usize>,
    pub final_trailing_mean: f64,
    pub run_dir: String,
}

/// Write `config.json` (hash plus resolved config) into `dir`.
pub fn write_config_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let echo = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg });
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
    Ok(())
}

/// Train one seed and write `curve.csv`, checkpoints and optional activity
/// dumps into `dir`, and `config.json` into its parent. `progress` receives
/// human-readable status lines.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<(RunSummary, Trainer)> {
    fs::create_dir_all(dir)?;
    if let Some(parent) = dir.parent() {
        write_config_echo(parent, cfg)?;
    }
    let hash = cfg.hash();
    let mut trainer = Trainer::new(&cfg.env, &cfg.agent_spec(), &cfg.train, seed)?;
    let mut curve = BufWriter::new(File::create(dir.join("curve.csv"))?);
    writeln!(curve, "{CURVE_HEADER}")?;
    let every = cfg.train.checkpoint_every;
    let report = (cfg.train.n_trials / 10).max(1);
    trainer
        .run(|t, r| {
            write_curve_row(&mut curve, r, seed, &hash)?;
            if every > 0 && r.trial % every == 0 {
                Checkpoint::capture(cfg, t).save(&dir.join(format!("ckpt-{:07}.json", r.trial)))?;
            }
            if r.trial % report == 0 {
                progress(&format!(
                    "seed {seed} trial {} trailing mean {:.3}",
                    r.trial,
                    t.trailing_mean()
                ));
            }
            Ok(())
        })?;
    curve.flush()?;
    let final_path = dir.join(format!("ckpt-{:07}.json", trainer.trial()));
    if !final_path.exists() {
        Checkpoint::capture(cfg, &trainer).save(&final_path)?;
    }
    if cfg.record_activity {
        let rec = record_activity(&trainer.agent, &cfg.env, cfg.activity_trials, &hash)?;
        rec.save(&dir.join("activity.bin"))?;
    }
    let summary = RunSummary {
        seed,
        config_hash: hash,
        trials: trainer.trial(),
        trials_to_criterion: trainer.criterion_met(),
        final_trailing_mean: trainer.trailing_mean(),
        run_dir: dir.display().to_string(),
    };
    progress(&format!(
        "seed {seed} done: {} trials, criterion at {}",
        summary.trials,
        summary.trials_to_criterion.map(|t| t.to_string()).unwrap_or_else(|| "never".into())
    ));
    Ok((summary, trainer))
}
