//! Resolution of config file, flags and environment into one experiment spec.
//! Precedence: flags, then the config file, then built-in defaults.

use std::path::{Path, PathBuf};

use nuca_core::experiments::{ScenarioParams, DEFAULT_SEED};
use nuca_core::machine::MachineConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "NUCA_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "results";

/// Everything a config file may set. Missing sections take defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub machine: MachineConfig,
    /// Replaces the built-in (or `--reduced`) parameter set when present.
    pub params: Option<ScenarioParams>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config {
            field: json_field(&e.to_string()),
            reason: e.to_string(),
        })?;
        cfg.machine.validate()?;
        Ok(cfg)
    }
}

/// The field name serde quotes in its message, when it quotes one.
fn json_field(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<config file>").to_string()
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub machine: MachineConfig,
    pub params: ScenarioParams,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn resolve(
        file: Option<ConfigFile>,
        base_params: ScenarioParams,
        seeds: Option<Vec<u64>>,
        out: Option<PathBuf>,
    ) -> Self {
        let (machine, params, file_seeds, file_out) = match file {
            Some(f) => (
                f.machine,
                f.params.unwrap_or(base_params),
                f.seeds,
                f.output_dir,
            ),
            None => (MachineConfig::default(), base_params, None, None),
        };
        let output_dir = out
            .or(file_out)
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        Self {
            machine,
            params,
            seeds: seeds.or(file_seeds).unwrap_or_else(|| vec![DEFAULT_SEED]),
            output_dir,
        }
    }
}

/// `N` or an inclusive range `N..M`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<u64>()
            .map_err(|e| format!("bad seed `{t}`: {e}"))
    };
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(format!("empty seed range {s}"));
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![num(s)?]),
    }
}

/// `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_rates(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|e| format!("bad rate `{t}`: {e}"))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if step.is_nan() || step <= 0.0 || b < a {
                return Err(format!("rates {s}: need start <= stop and step > 0"));
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            // Rounded so 0.01 steps print as 0.03, not 0.030000000000000002.
            Ok((0..=n)
                .map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(format!("rates {s}: expected start:stop:step or a list")),
    }
}
