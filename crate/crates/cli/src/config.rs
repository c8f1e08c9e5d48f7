use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dppnet::error::{Error, Result};
use dppnet::model::ModelConfig;
use dppnet::synthetic::GenConfig;
use dppnet::trainer::TrainSchedule;
use serde::{Deserialize, Serialize};

use crate::args::Global;

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything a command needs, merged from the config file and the flags.
/// Checkpoint directories get a copy, so `--config <ckpt>/run.json`
/// repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialization and batch order.
    pub seed: u64,
    pub precision: Precision,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub generator: GenConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            precision: Precision::default(),
            data: None,
            out: None,
            pretrained: None,
            generator: GenConfig::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// The config file (or defaults) with command-line overrides applied.
    pub fn resolve(global: &Global) -> Result<Self> {
        let mut cfg = match &global.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Some(seed) = global.seed {
            cfg.seed = seed;
        }
        if let Some(p) = global.precision {
            cfg.precision = p;
        }
        if let Some(v) = global.variant {
            cfg.model.variant = v;
        }
        if let Some(out) = &global.out {
            cfg.out = Some(out.clone());
        }
        cfg.model.init_seed = cfg.seed;
        cfg.schedule.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn out_dir(&self, fallback: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|source| Error::Io {
            context: format!("writing {}", path.display()),
            source,
        })
    }
}
