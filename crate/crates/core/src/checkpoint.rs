//! Versioned JSON checkpoints of a training run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::nets::{Agent, CoreKind};
use crate::trainer::{Trainer, TrainerState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub core_kind: CoreKind,
    pub seed: u64,
    /// Parameters (with shapes), optimizer, rng streams and trial counter.
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn capture(cfg: &ExperimentConfig, t: &Trainer) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            core_kind: cfg.core.kind,
            seed: t.seed,
            state: t.state(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unparseable: {e}")))?;
        ck.check()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match the embedded config".into()));
        }
        if self.config.core.kind != self.core_kind {
            return Err(Error::Checkpoint("core kind does not match the embedded config".into()));
        }
        Ok(())
    }

    /// Rebuild the agent with the stored parameters.
    pub fn agent(&self) -> Result<Agent> {
        let env = Env::new(self.config.env.clone())?;
        let mut agent = Agent::new(self.config.agent_spec(), env.obs_dim(), env.n_actions(), self.seed)?;
        agent
            .set_params(self.state.params.clone())
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit the configured agent: {e}")))?;
        Ok(agent)
    }

    /// Rebuild a trainer positioned exactly where the checkpoint was taken.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(&self.config.env, &self.config.agent_spec(), &self.config.train, self.seed)?;
        t.restore(&self.state)?;
        Ok(t)
    }
}
