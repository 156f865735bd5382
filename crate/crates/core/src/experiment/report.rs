//! Run artifacts: `curves.csv`, `results.json`, `config.echo`, and the
//! summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Strategy};
use super::{RoundLog, RoundRow};
use crate::det::DetPhase;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub f1: f64,
    /// `None` when no class has both positives and negatives.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client: usize,
    pub name: String,
    pub best_epoch: usize,
    pub val_f1: f64,
    pub test: MetricPair,
    pub ood: Option<MetricPair>,
    pub mean_boundary_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub test: MetricPair,
    pub ood: Option<MetricPair>,
    pub mean_boundary_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub strategy: Strategy,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub aggregation_events: usize,
    pub clients: Vec<ClientResult>,
    pub average: Average,
    pub created_unix: u64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn mean_pair<'a>(pairs: impl Iterator<Item = &'a MetricPair> + Clone) -> Option<MetricPair> {
    Some(MetricPair {
        f1: mean(pairs.clone().map(|p| p.f1))?,
        auc: mean(pairs.filter_map(|p| p.auc)),
    })
}

impl Results {
    pub fn new(cfg: &ExperimentConfig, aggregation_events: usize, clients: Vec<ClientResult>) -> Self {
        let test = mean_pair(clients.iter().map(|c| &c.test)).unwrap_or(MetricPair { f1: 0.0, auc: None });
        let ood = if clients.iter().all(|c| c.ood.is_some()) {
            mean_pair(clients.iter().filter_map(|c| c.ood.as_ref()))
        } else {
            None
        };
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            strategy: cfg.strategy,
            seed: cfg.seed,
            config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            aggregation_events,
            average: Average {
                test,
                ood,
                mean_boundary_change: mean(clients.iter().filter_map(|c| c.mean_boundary_change)),
            },
            clients,
            created_unix,
        }
    }

    /// Copy with the timestamp cleared, for run-to-run comparison.
    pub fn without_timestamp(&self) -> Self {
        Self {
            created_unix: 0,
            ..self.clone()
        }
    }
}

/// CSV form of a [`RoundRow`]; optional cells are left empty.
#[derive(Serialize, Deserialize)]
struct CurveRecord {
    epoch: usize,
    client: usize,
    phase: Option<DetPhase>,
    ce_loss: f64,
    kl_loss: Option<f64>,
    phi_d: Option<f64>,
    phi_p: f64,
    r: Option<f64>,
    comm_event: u8,
}

impl From<&RoundRow> for CurveRecord {
    fn from(r: &RoundRow) -> Self {
        Self {
            epoch: r.epoch,
            client: r.client,
            phase: r.phase,
            ce_loss: r.ce_loss,
            kl_loss: r.kl_loss,
            phi_d: r.phi_d,
            phi_p: r.phi_p,
            r: r.r,
            comm_event: r.comm_event.into(),
        }
    }
}

impl From<CurveRecord> for RoundRow {
    fn from(r: CurveRecord) -> Self {
        Self {
            epoch: r.epoch,
            client: r.client,
            phase: r.phase,
            ce_loss: r.ce_loss,
            kl_loss: r.kl_loss,
            phi_d: r.phi_d,
            phi_p: r.phi_p,
            r: r.r,
            comm_event: r.comm_event != 0,
        }
    }
}

/// Appends rows to `curves.csv`, header first.
pub struct CurveWriter {
    path: std::path::PathBuf,
    inner: csv::Writer<File>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidDataset(format!("{}: {other:?}", path.display())),
    }
}

impl CurveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let inner = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write(&mut self, row: &RoundRow) -> Result<()> {
        self.inner
            .serialize(CurveRecord::from(row))
            .map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_curves(path: &Path) -> Result<RoundLog> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let rows = rdr
        .deserialize::<CurveRecord>()
        .map(|r| r.map(RoundRow::from).map_err(|e| csv_err(path, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundLog { rows })
}

pub fn write_config_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = dir.join("config.echo");
    std::fs::write(&path, cfg.to_config_string()).map_err(|e| Error::io(path, e))
}

pub fn write_results(dir: &Path, results: &Results) -> Result<()> {
    let path = dir.join("results.json");
    let text = serde_json::to_string_pretty(results).expect("results serialize");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Results> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))
}

/// Writes all three artifacts for a finished or aborted run.
pub fn emit_report(log: &RoundLog, results: &Results, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = CurveWriter::create(&dir.join("curves.csv"))?;
    for row in &log.rows {
        w.write(row)?;
    }
    w.flush()?;
    write_results(dir, results)?;
    write_config_echo(dir, cfg)
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Per-client and average test F1/AUC, one line per run, in percent.
pub fn summary_table(runs: &[Results]) -> String {
    let names: Vec<String> = runs
        .iter()
        .max_by_key(|r| r.clients.len())
        .map(|r| r.clients.iter().map(|c| c.name.clone()).collect())
        .unwrap_or_default();
    let mut out = String::new();
    let _ = write!(out, "{:<12} {:>6}", "strategy", "seed");
    for metric in ["F1", "AUC"] {
        for n in &names {
            let _ = write!(out, " {:>8}", format!("{metric}:{n}"));
        }
        let _ = write!(out, " {:>8}", format!("{metric}:avg"));
    }
    let _ = writeln!(out, " {:>8} {:>8} {:>9}", "OOD:F1", "OOD:AUC", "boundary");
    for r in runs {
        let _ = write!(out, "{:<12} {:>6}", r.strategy.as_str(), r.seed);
        for n in 0..names.len() {
            let _ = write!(out, " {:>8}", pct(r.clients.get(n).map(|c| c.test.f1)));
        }
        let _ = write!(out, " {:>8}", pct(Some(r.average.test.f1)));
        for n in 0..names.len() {
            let _ = write!(out, " {:>8}", pct(r.clients.get(n).and_then(|c| c.test.auc)));
        }
        let _ = write!(out, " {:>8}", pct(r.average.test.auc));
        let ood = r.average.ood;
        let _ = writeln!(
            out,
            " {:>8} {:>8} {:>9}",
            pct(ood.map(|o| o.f1)),
            pct(ood.and_then(|o| o.auc)),
            r.average
                .mean_boundary_change
                .map_or_else(|| "-".into(), |b| format!("{:+.4}", b))
        );
    }
    out
}
