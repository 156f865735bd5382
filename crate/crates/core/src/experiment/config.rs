use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationStrategy, ScheduleParams};
use crate::data::{BENCHMARK_COUNTS, CLASSES, DEFAULT_DIM};
use crate::det::DetConfig;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Training protocol.
///
/// `PfaNoDet` and `DetFedAvg` are the two ablations: PFA aggregates written
/// straight into the client model, and DET clients fed a FedAvg aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    PfaDet,
    #[serde(rename = "FEDAVG")]
    FedAvg,
    #[serde(rename = "FEDPROX")]
    FedProx,
    LocalOnly,
    PfaNoDet,
    #[serde(rename = "DET_FEDAVG")]
    DetFedAvg,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::PfaDet,
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::LocalOnly,
        Strategy::PfaNoDet,
        Strategy::DetFedAvg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PfaDet => "PFA_DET",
            Strategy::FedAvg => "FEDAVG",
            Strategy::FedProx => "FEDPROX",
            Strategy::LocalOnly => "LOCAL_ONLY",
            Strategy::PfaNoDet => "PFA_NO_DET",
            Strategy::DetFedAvg => "DET_FEDAVG",
        }
    }

    pub fn uses_det(self) -> bool {
        matches!(self, Strategy::PfaDet | Strategy::DetFedAvg)
    }

    /// Server rule, or `None` when clients never communicate.
    pub fn server(self) -> Option<AggregationStrategy> {
        match self {
            Strategy::PfaDet | Strategy::PfaNoDet => Some(AggregationStrategy::Pfa),
            Strategy::FedAvg | Strategy::FedProx | Strategy::DetFedAvg => Some(AggregationStrategy::FedAvg),
            Strategy::LocalOnly => None,
        }
    }

    /// Clients are scored with the shared global model.
    pub fn evaluates_global(self) -> bool {
        matches!(self, Strategy::FedAvg | Strategy::FedProx)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    /// Number of clients, taken in order from the default profiles.
    pub k: usize,
    /// Local epochs between communications.
    pub e: usize,
    /// Total local epochs.
    pub t: usize,
    pub model: String,
    pub r0: f64,
    pub r1: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_halving: usize,
    pub data_scale: f64,
    pub dim: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Client-level worker threads; 0 uses the global pool.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::PfaDet,
            k: 4,
            e: 5,
            t: 250,
            model: "mlp".into(),
            r0: ScheduleParams::DEFAULT_R0,
            r1: ScheduleParams::DEFAULT_R1,
            lambda1: 0.7,
            lambda2: 0.9,
            mu: 0.01,
            batch_size: 16,
            base_lr: 0.01,
            lr_halving: 25,
            data_scale: 0.1,
            dim: DEFAULT_DIM,
            seed: 7,
            output_dir: None,
            workers: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 18] = [
    "strategy",
    "K",
    "E",
    "T",
    "model",
    "r0",
    "r1",
    "lambda1",
    "lambda2",
    "mu",
    "batch_size",
    "base_lr",
    "lr_halving",
    "data_scale",
    "dim",
    "seed",
    "output_dir",
    "workers",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl ExperimentConfig {
    /// Sets one key. Keys are case-sensitive.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "strategy" => self.strategy = v.parse()?,
            "K" => self.k = parse_value(key, v)?,
            "E" => self.e = parse_value(key, v)?,
            "T" => self.t = parse_value(key, v)?,
            "model" => self.model = v.to_string(),
            "r0" => self.r0 = parse_value(key, v)?,
            "r1" => self.r1 = parse_value(key, v)?,
            "lambda1" => self.lambda1 = parse_value(key, v)?,
            "lambda2" => self.lambda2 = parse_value(key, v)?,
            "mu" => self.mu = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "base_lr" => self.base_lr = parse_value(key, v)?,
            "lr_halving" => self.lr_halving = parse_value(key, v)?,
            "data_scale" => self.data_scale = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "workers" => self.workers = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            r0: self.r0,
            r1: self.r1,
            total_epochs: self.t,
        }
    }

    pub fn det(&self) -> DetConfig {
        DetConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::by_id(&self.model, self.dim, CLASSES).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 || self.k > BENCHMARK_COUNTS.len() {
            return bad(format!("K must be in 1..={}, got {}", BENCHMARK_COUNTS.len(), self.k));
        }
        if self.e == 0 || self.t == 0 {
            return bad("E and T must be positive".into());
        }
        if !self.t.is_multiple_of(self.e) {
            return bad(format!("T = {} is not divisible by E = {}", self.t, self.e));
        }
        self.schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.det().validate()?;
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad(format!("mu must be finite and non-negative, got {}", self.mu));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if self.lr_halving == 0 {
            return bad("lr_halving must be positive".into());
        }
        if !(self.data_scale > 0.0 && self.data_scale <= 1.0) {
            return bad(format!("data_scale must be in (0, 1], got {}", self.data_scale));
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        self.model_spec()?;
        Ok(())
    }

    /// Communication events over the run.
    pub fn rounds(&self) -> usize {
        self.t / self.e
    }

    /// Resolved key/value pairs in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let out_dir = self
            .output_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let values = [
            self.strategy.to_string(),
            self.k.to_string(),
            self.e.to_string(),
            self.t.to_string(),
            self.model.clone(),
            self.r0.to_string(),
            self.r1.to_string(),
            self.lambda1.to_string(),
            self.lambda2.to_string(),
            self.mu.to_string(),
            self.batch_size.to_string(),
            self.base_lr.to_string(),
            self.lr_halving.to_string(),
            self.data_scale.to_string(),
            self.dim.to_string(),
            self.seed.to_string(),
            out_dir,
            self.workers.to_string(),
        ];
        CONFIG_KEYS.into_iter().zip(values).collect()
    }

    /// Text form accepted by [`ExperimentConfig::parse`].
    pub fn to_config_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_defaults() {
        let cfg = ExperimentConfig::parse("# run\nstrategy = FEDAVG\nK = 2\n\nT=20\nE = 5\nseed = 3\n").unwrap();
        assert_eq!(cfg.strategy, Strategy::FedAvg);
        assert_eq!((cfg.k, cfg.e, cfg.t, cfg.seed), (2, 5, 20, 3));
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.rounds(), 4);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.strategy = Strategy::DetFedAvg;
        cfg.output_dir = Some("out/run1".into());
        cfg.base_lr = 0.003;
        assert_eq!(ExperimentConfig::parse(&cfg.to_config_string()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::parse(&ExperimentConfig::default().to_config_string()).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "bogus = 1",
            "k = 4",
            "T = 12",
            "E = 0",
            "K = 5",
            "r0 = 0.6",
            "lambda1 = 0.95",
            "strategy = SCAFFOLD",
            "batch_size = x",
            "model = resnet",
            "data_scale = 0",
            "seed = 1\nseed = 2",
            "no equals sign",
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
            assert_eq!(err.exit_code(), 2);
        }
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert_eq!(Strategy::LocalOnly.server(), None);
        assert!(Strategy::DetFedAvg.uses_det());
    }
}
