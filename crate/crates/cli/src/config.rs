//! TOML configuration file; every section mirrors a library settings type.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ulrn_core::data::synth::SynthConfig;
use ulrn_core::evaluator::EvalSettings;
use ulrn_core::model::{LoraConfig, ModelConfig};
use ulrn_core::objectives::UnlearnOptions;
use ulrn_core::unlearner::RunConfig;
use ulrn_core::Error;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSettings {
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings { epochs: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    /// Training corpus for pretraining and finetuning.
    pub data: Option<PathBuf>,
    pub forget: Option<PathBuf>,
    pub normal: Option<PathBuf>,
    pub labeled: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
    pub reference_checkpoint: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub unlearn: UnlearnOptions,
    pub lora: LoraConfig,
    pub eval: EvalSettings,
    pub synth: SynthConfig,
    pub classifier: ClassifierSettings,
    pub paths: Paths,
}

pub const EFFECTIVE_CONFIG: &str = "effective-config.toml";

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {}", path.display(), e.message())))
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let checks = [
            self.model.validate(),
            self.run.validate(),
            self.unlearn.weights.validate(),
            self.lora.validate(),
        ];
        for c in checks {
            match c {
                Ok(()) => {}
                Err(Error::Config(p)) => problems.extend(p),
                Err(e) => problems.push(e.to_string()),
            }
        }
        if self.eval.samples == 0 {
            problems.push("eval.samples must be at least 1".into());
        }
        if self.unlearn.random_samples == 0 {
            problems.push("unlearn.random_samples must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(problems.join("; ")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serialisable")
    }

    /// Writes the fully resolved configuration next to the run outputs.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(())
    }
}
