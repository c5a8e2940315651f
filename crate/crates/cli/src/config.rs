use std::path::{Path, PathBuf};

use egostan::model::ModelConfig;
use egostan::synth::SynthConfig;
use egostan::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::SEED_ENV;
use crate::error::CliError;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Everything a subcommand needs, read from a JSON file and then
/// overridden by flags. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub align_to: usize,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Seeds from the flag, else the config file, else `$EGOSTAN_SEED`
    /// (comma-separated), else `[0]`.
    pub fn resolve_seeds(&mut self, flag: &[u64]) -> Result<(), CliError> {
        if !flag.is_empty() {
            self.seeds = flag.to_vec();
        } else if self.seeds.is_empty() {
            self.seeds = match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Usage(format!("{SEED_ENV}={v:?}: {e}")))?,
                Err(_) => vec![0],
            };
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("no seeds given".into()));
        }
        Ok(())
    }

    pub fn single_seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        self.resolve_seeds(flag.as_slice())?;
        match self.seeds.as_slice() {
            [s] => Ok(*s),
            many => Err(CliError::Usage(format!("expected one seed, got {many:?}"))),
        }
    }
}

/// Resolved configuration echoed into an output directory.
#[derive(Serialize)]
pub struct Echo<'a, T: Serialize> {
    pub command: &'a str,
    pub config: &'a T,
}

pub fn echo<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<(), CliError> {
    egostan::train::write_json(dir.join(RUN_CONFIG_FILE), &Echo { command, config })?;
    Ok(())
}
