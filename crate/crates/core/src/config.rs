//! Flat `key = value` training configuration files.
//!
//! `#` starts a comment, blank lines are skipped, keys are single-level.
//! Unknown and duplicate keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossScheme};
use crate::models::DecoderKind;
use crate::synthdata::Task;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// cross-checked against the dataset header when present
    pub task: Option<Task>,
    pub scheme: LossScheme,
    pub k: usize,
    pub nu: f64,
    pub kl_weight: f64,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    /// cross-checked against the dataset header when present
    pub nf: Option<usize>,
    pub decoder: DecoderKind,
    pub checkpoint: PathBuf,
    /// run-log CSV; defaults to `<checkpoint>.log.csv`
    pub log: Option<PathBuf>,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn loss_config(&self) -> Result<LossConfig> {
        LossConfig::new(self.scheme, self.k, self.nu, self.kl_weight)
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let mut s = self.checkpoint.as_os_str().to_owned();
            s.push(".log.csv");
            PathBuf::from(s)
        })
    }
}

const KNOWN_KEYS: &[&str] = &[
    "task",
    "scheme",
    "k",
    "nu",
    "kl_weight",
    "latent_dim",
    "learning_rate",
    "epochs",
    "batch_size",
    "seed",
    "dataset",
    "nf",
    "decoder",
    "checkpoint",
    "log",
    "eval_every",
];

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::usage(format!(
                "config line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::usage(format!(
                "config line {}: unknown key '{key}'",
                lineno + 1
            )));
        }
        if kv.insert(key.clone(), value).is_some() {
            return Err(Error::usage(format!(
                "config line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }

    let get = |key: &str| kv.get(key).map(|s| s.as_str());
    let require = |key: &str| {
        get(key).ok_or_else(|| Error::usage(format!("config is missing required key '{key}'")))
    };
    fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::usage(format!("config key '{key}': cannot parse '{v}'")))
    }

    let scheme = LossScheme::parse(require("scheme")?)?;
    let k = match get("k") {
        Some(v) => parse_num("k", v)?,
        None => scheme.default_k(),
    };
    let cfg = TrainConfig {
        task: get("task").map(Task::parse).transpose()?,
        scheme,
        k,
        nu: get("nu").map(|v| parse_num("nu", v)).transpose()?.unwrap_or(0.5),
        kl_weight: get("kl_weight")
            .map(|v| parse_num("kl_weight", v))
            .transpose()?
            .unwrap_or(1.0),
        latent_dim: get("latent_dim")
            .map(|v| parse_num("latent_dim", v))
            .transpose()?
            .unwrap_or(8),
        learning_rate: get("learning_rate")
            .map(|v| parse_num("learning_rate", v))
            .transpose()?
            .unwrap_or(1e-3),
        epochs: get("epochs")
            .map(|v| parse_num("epochs", v))
            .transpose()?
            .unwrap_or(300),
        batch_size: get("batch_size")
            .map(|v| parse_num("batch_size", v))
            .transpose()?
            .unwrap_or(32),
        seed: get("seed").map(|v| parse_num("seed", v)).transpose()?.unwrap_or(0),
        dataset: PathBuf::from(require("dataset")?),
        nf: get("nf").map(|v| parse_num("nf", v)).transpose()?,
        decoder: DecoderKind::parse(require("decoder")?)?,
        checkpoint: PathBuf::from(require("checkpoint")?),
        log: get("log").map(PathBuf::from),
        eval_every: get("eval_every")
            .map(|v| parse_num("eval_every", v))
            .transpose()?
            .unwrap_or(0),
    };
    cfg.loss_config()?;
    Ok(cfg)
}
