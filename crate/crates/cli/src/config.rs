//! Run configuration: flags, then the config file, then defaults.
//!
//! The config file holds `key = value` lines using the long flag names
//! (`max-iterations = 400`). Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Train,
    Test,
}

/// Options shared by every subcommand. Unset options fall back to the config
/// file and then to [`RunConfig::default`].
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Key-value config file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of experts (and simulated workers).
    #[arg(long, global = true)]
    pub experts: Option<usize>,
    /// Tokens per worker.
    #[arg(long, global = true)]
    pub tokens: Option<usize>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Feedforward blocks per expert.
    #[arg(long, global = true)]
    pub blocks: Option<usize>,
    /// Auction bid increment; defaults to a per-instance value.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Auction bid budget before the greedy fallback.
    #[arg(long, global = true)]
    pub max_iterations: Option<usize>,
    /// Threshold on the shared-gradient norm.
    #[arg(long, global = true)]
    pub clip: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<RunMode>,
    /// Output file (solve) or directory (other commands).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Clusters in the synthetic task.
    #[arg(long, global = true)]
    pub clusters: Option<usize>,
    /// Entries per expert in the specialization table.
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    /// Timing repetitions per bench setting.
    #[arg(long, global = true)]
    pub repetitions: Option<usize>,
}

/// The effective configuration, echoed into every output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub experts: usize,
    pub tokens: usize,
    pub dim: usize,
    pub blocks: usize,
    /// `None` selects the per-instance default.
    pub epsilon: Option<f64>,
    pub max_iterations: Option<usize>,
    pub clip: f64,
    pub mode: RunMode,
    pub format: Format,
    pub steps: usize,
    pub learning_rate: f64,
    pub clusters: usize,
    pub top_k: usize,
    pub repetitions: usize,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        RunConfig {
            command: command.to_string(),
            seed: 0,
            experts: 4,
            tokens: 32,
            dim: 8,
            blocks: 1,
            epsilon: None,
            max_iterations: None,
            clip: baselayer::ClipConfig::DEFAULT_THRESHOLD,
            mode: RunMode::Train,
            format: Format::Json,
            steps: 500,
            learning_rate: 0.3,
            clusters: 4,
            top_k: 5,
            repetitions: 3,
            out: None,
        }
    }

    pub fn resolve(command: &str, args: &CommonArgs) -> Result<Self, Failure> {
        let file = match &args.config {
            Some(path) => read_config_file(path)?,
            None => ConfigFile::default(),
        };
        let mut c = RunConfig::defaults(command);
        macro_rules! layer {
            ($field:ident, $key:literal) => {
                if let Some(v) = args.$field.clone() {
                    c.$field = v;
                } else if let Some(v) = file.get($key)? {
                    c.$field = v;
                }
            };
            (opt $field:ident, $key:literal) => {
                if let Some(v) = args.$field.clone() {
                    c.$field = Some(v);
                } else if let Some(v) = file.get($key)? {
                    c.$field = Some(v);
                }
            };
        }
        layer!(seed, "seed");
        layer!(experts, "experts");
        layer!(tokens, "tokens");
        layer!(dim, "dim");
        layer!(blocks, "blocks");
        layer!(opt epsilon, "epsilon");
        layer!(opt max_iterations, "max-iterations");
        layer!(clip, "clip");
        layer!(steps, "steps");
        layer!(learning_rate, "learning-rate");
        layer!(clusters, "clusters");
        layer!(top_k, "top-k");
        layer!(repetitions, "repetitions");
        layer!(opt out, "out");
        c.mode = match args.mode {
            Some(m) => m,
            None => file.get_enum("mode")?.unwrap_or(c.mode),
        };
        c.format = match args.format {
            Some(f) => f,
            None => file.get_enum("format")?.unwrap_or(c.format),
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), Failure> {
        let positive = [
            ("experts", self.experts),
            ("tokens", self.tokens),
            ("dim", self.dim),
            ("blocks", self.blocks),
            ("clusters", self.clusters),
            ("top-k", self.top_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Failure::contract(format!("--{name} must be at least 1")));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Failure::contract(format!(
                "--clip must be positive, got {}",
                self.clip
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Failure::contract(
                "--learning-rate must be finite and non-negative",
            ));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Failure::contract(format!(
                    "--epsilon must be positive, got {eps}"
                )));
            }
        }
        Ok(())
    }

    pub fn auction(&self) -> baselayer::AuctionSettings {
        baselayer::AuctionSettings {
            epsilon: self.epsilon,
            max_iterations: self.max_iterations,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// `# config: {...}` line for text outputs.
    pub fn comment_line(&self) -> String {
        format!("# config: {}\n", self.to_value())
    }
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "experts",
    "tokens",
    "dim",
    "blocks",
    "epsilon",
    "max-iterations",
    "clip",
    "mode",
    "out",
    "format",
    "steps",
    "learning-rate",
    "clusters",
    "top-k",
    "repetitions",
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Failure::parse(format!("config line {line_no}: expected key = value"))
            })?;
            let key = key.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Failure::parse(format!(
                    "config line {line_no}: unknown key {key:?}"
                )));
            }
            if entries
                .insert(key.clone(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(Failure::parse(format!(
                    "config line {line_no}: duplicate key {key:?}"
                )));
            }
        }
        Ok(ConfigFile { entries })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        self.entries
            .get(key)
            .map(|(line, v)| {
                v.parse().map_err(|_| {
                    Failure::parse(format!("config line {line}: invalid value {v:?} for {key}"))
                })
            })
            .transpose()
    }

    fn get_enum<T: ValueEnum>(&self, key: &str) -> Result<Option<T>, Failure> {
        self.entries
            .get(key)
            .map(|(line, v)| {
                T::from_str(v, true).map_err(|_| {
                    Failure::parse(format!("config line {line}: invalid value {v:?} for {key}"))
                })
            })
            .transpose()
    }
}

fn read_config_file(path: &Path) -> Result<ConfigFile, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("cannot read config file {}: {e}", path.display())))?;
    ConfigFile::parse(&text)
}
