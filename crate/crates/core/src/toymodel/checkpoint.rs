//! Versioned JSON snapshot of a training run for exact resume.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::CentroidBank;
use crate::error::{Error, Result};
use crate::stats::{ClassStats, StatsSnapshot};

use super::config::TrainConfig;
use super::model::Model;
use super::scene::GeneratorConfig;
use super::train::{Dataset, Trainer};

pub const CHECKPOINT_FORMAT: &str = "pixcon-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Floats are written as the shortest decimal that parses back to the same
/// bits, so a resumed run continues bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub iteration: usize,
    pub config: TrainConfig,
    pub generator: GeneratorConfig,
    pub student: Model,
    pub teacher: Model,
    pub stats: StatsSnapshot,
    pub bank: CentroidBank,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            iteration: trainer.iteration,
            config: trainer.config.clone(),
            generator: trainer.generator.clone(),
            student: trainer.student.clone(),
            teacher: trainer.teacher.clone(),
            stats: trainer.stats.to_snapshot(),
            bank: trainer.bank.clone(),
        }
    }

    /// Rebuilds the trainer; the scenes are regenerated from the stored
    /// configuration and seed.
    pub fn restore(&self) -> Result<Trainer> {
        self.check()?;
        let data = Dataset::generate(&self.generator, &self.config)?;
        let student = Model::from_params(self.student.shape, self.student.params.clone())?;
        let teacher = Model::from_params(self.teacher.shape, self.teacher.params.clone())?;
        Trainer::assemble(
            self.config.clone(),
            self.generator.clone(),
            data,
            student,
            teacher,
            ClassStats::from_snapshot(&self.stats)?,
            self.bank.clone(),
            self.iteration,
        )
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        if self.iteration > self.config.iterations {
            return Err(Error::Config("checkpoint iteration exceeds configured iterations".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.check()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
