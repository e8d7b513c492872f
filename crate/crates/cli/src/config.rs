//! Flat key/value run configuration, flag overrides and the run manifest.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use ntil::loss::LossMode;
use ntil::train::TrainingConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Contract;

/// Environment variable consulted for the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "NTIL_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub training: TrainingConfig,
    /// Directory receiving the manifest, metric log and checkpoints.
    pub out_dir: Option<PathBuf>,
}

/// Values given on the command line; each one wins over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long, value_parser = parse_mode)]
    pub loss: Option<LossMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training data (line-delimited JSON examples).
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Held-out data evaluated after training.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<LossMode, String> {
    s.parse()
}

fn known_keys() -> BTreeSet<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("config serializes to an object"),
    }
}

/// A resolved configuration plus the file it came from, if any.
pub struct Loaded {
    pub config: RunConfig,
    pub source: Option<PathBuf>,
}

/// Reads a TOML config, or the `config` object of a run manifest when the
/// path ends in `.json`, then applies `overrides`. The seed comes from the
/// flag, then the file, then [`SEED_ENV`], then the default.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Loaded> {
    let (mut config, file_has_seed) = match path {
        None => (RunConfig::default(), false),
        Some(p) => {
            let text = read_input(p)?;
            if p.extension().is_some_and(|e| e == "json") {
                let manifest: RunManifest = serde_json::from_str(&text)
                    .map_err(|e| Contract(format!("{}: not a run manifest: {e}", p.display())))?;
                let config = serde_json::from_value(manifest.config)
                    .map_err(|e| Contract(format!("{}: bad config in manifest: {e}", p.display())))?;
                (config, true)
            } else {
                parse_toml(&text).map_err(|e| Contract(format!("{}: {e}", p.display())))?
            }
        }
    };
    if !file_has_seed {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            config.training.seed = raw
                .trim()
                .parse()
                .map_err(|_| Contract(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
    }
    apply(&mut config, overrides);
    config.training.validate().map_err(|e| Contract(e.to_string()))?;
    Ok(Loaded {
        config,
        source: path.map(Path::to_path_buf),
    })
}

/// Parses a flat TOML document, rejecting keys the config does not know.
/// Also reports whether the document sets `seed`.
pub fn parse_toml(text: &str) -> Result<(RunConfig, bool), String> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let known = known_keys();
    let unknown: Vec<&String> = table.keys().filter(|k| !known.contains(*k)).collect();
    if !unknown.is_empty() {
        return Err(format!("unknown config keys {unknown:?}"));
    }
    let has_seed = table.contains_key("seed");
    let config = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    Ok((config, has_seed))
}

pub fn apply(config: &mut RunConfig, o: &Overrides) {
    let t = &mut config.training;
    if let Some(v) = o.loss {
        t.loss = v;
    }
    if let Some(v) = o.alpha {
        t.ntil.alpha = v;
    }
    if let Some(v) = o.beta {
        t.ntil.beta = v;
    }
    if let Some(v) = o.sigma {
        t.ntil.sigma = v;
    }
    if let Some(v) = o.lambda {
        t.ntil.lambda = v;
    }
    if let Some(v) = o.tau {
        t.ntil.tau = v;
    }
    if let Some(v) = o.lr {
        t.learning_rate = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = &o.train_data {
        t.train_data = Some(v.clone());
    }
    if let Some(v) = &o.test_data {
        t.test_data = Some(v.clone());
    }
    if let Some(v) = &o.out {
        config.out_dir = Some(v.clone());
    }
}

/// Reads an input file; a missing or unreadable input is a usage error.
pub fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Contract(format!("cannot read {}: {e}", path.display())).into())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Contract(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run: the fully resolved config, the tool
/// version, the seed and digests of every input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.to_path_buf(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            inputs,
            started_unix: unix_now(),
            finished_unix: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Stamps the finish time and rewrites the manifest.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = Some(unix_now());
        self.write(dir)
    }
}
