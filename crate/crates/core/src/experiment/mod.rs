//! The federated training loop.
//!
//! Every client trains `E` local epochs, uploads its model, and receives the
//! server aggregate; this repeats until `T` local epochs have run. Clients
//! train in parallel between communication barriers. Each client owns its
//! RNG stream and every reduction runs in client order, so results do not
//! depend on the number of worker threads.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, Strategy, CONFIG_KEYS};
pub use report::{emit_report, read_curves, read_results, summary_table, ClientResult, MetricPair, Results};

use crate::aggregate::{fedavg_aggregate, pfa_aggregate, schedule_r, AggregationStrategy};
use crate::data::{default_profiles_with_dim, mix_seed, ood_client, synth, ClientDataset, FederatedDataset, Samples, Split};
use crate::det::{validation_f1, ClientState, DetPhase};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{predict_probs, train_epoch_ce, ModelSpec, OptimizerState, Proximal};
use crate::parallel::{with_workers, Exec};
use crate::tensor::NamedTensorMap;

const INIT_STREAM: u64 = 0x1417_0000_0000_0001;
const TRAIN_STREAM: u64 = 0x7a1e_0000_0000_0002;

/// Initialization RNG of the client with profile seed `client_seed`.
pub fn init_rng(seed: u64, client_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, INIT_STREAM), client_seed))
}

/// Batch-order RNG of the client with profile seed `client_seed`.
pub fn client_rng(seed: u64, client_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, TRAIN_STREAM), client_seed))
}

/// One client's record for one local epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub epoch: usize,
    pub client: usize,
    /// DET phase during the epoch; `None` for single-model strategies.
    pub phase: Option<DetPhase>,
    pub ce_loss: f64,
    pub kl_loss: Option<f64>,
    pub phi_d: Option<f64>,
    /// Validation macro F1 of the client's own model after the epoch.
    pub phi_p: f64,
    /// Low-frequency threshold at this point of the schedule (PFA only).
    pub r: Option<f64>,
    /// The epoch ended with an upload/aggregate/download.
    pub comm_event: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundLog {
    pub rows: Vec<RoundRow>,
}

impl RoundLog {
    pub fn clients(&self) -> usize {
        self.rows.iter().map(|r| r.client + 1).max().unwrap_or(0)
    }

    /// `phi_p` by epoch for one client.
    pub fn phi_series(&self, client: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.client == client).map(|r| r.phi_p).collect()
    }

    /// Change in `phi_p` across each communication that is followed by
    /// another epoch: score after the next epoch minus score just before
    /// the upload.
    pub fn boundary_changes(&self, client: usize) -> Vec<f64> {
        let rows: Vec<&RoundRow> = self.rows.iter().filter(|r| r.client == client).collect();
        rows.windows(2)
            .filter(|w| w[0].comm_event)
            .map(|w| w[1].phi_p - w[0].phi_p)
            .collect()
    }

    pub fn mean_boundary_change(&self, client: usize) -> Option<f64> {
        let c = self.boundary_changes(client);
        (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn aggregation_events(&self) -> usize {
        let mut epochs: Vec<usize> = self.rows.iter().filter(|r| r.comm_event).map(|r| r.epoch).collect();
        epochs.dedup();
        epochs.len()
    }
}

#[derive(Clone, Debug)]
struct Best {
    f1: f64,
    epoch: usize,
    params: NamedTensorMap,
    dirty: bool,
}

struct ClientRun {
    train: Samples,
    val: Samples,
    rng: ChaCha8Rng,
    state: ClientState,
    best: Best,
}

impl ClientRun {
    fn offer(&mut self, f1: f64, epoch: usize, params: &NamedTensorMap) {
        if f1 > self.best.f1 {
            self.best = Best {
                f1,
                epoch,
                params: params.clone(),
                dirty: true,
            };
        }
    }

    fn epoch(&mut self, cfg: &ExperimentConfig, spec: &ModelSpec) -> Result<RoundRow> {
        let epoch = self.state.epoch;
        let row = if cfg.strategy.uses_det() {
            let log = self
                .state
                .local_epoch(spec, &self.train, &self.val, &cfg.det(), cfg.batch_size, &mut self.rng)?;
            RoundRow {
                epoch,
                client: self.state.id,
                phase: Some(log.phase),
                ce_loss: log.ce_loss,
                kl_loss: Some(log.kl_loss),
                phi_d: Some(log.phi_d),
                phi_p: log.phi_p,
                r: None,
                comm_event: false,
            }
        } else {
            let st = &mut self.state;
            st.opt_p.epoch = epoch;
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut self.rng);
            let prox = (cfg.strategy == Strategy::FedProx).then_some(Proximal {
                anchor: &st.deputy,
                mu: cfg.mu,
            });
            let ce = train_epoch_ce(
                &mut st.personalized,
                spec,
                &self.train.features,
                &self.train.labels,
                &order,
                cfg.batch_size,
                &st.opt_p,
                prox,
            )?;
            st.phi_p = validation_f1(&st.personalized, spec, &self.val)?;
            st.epoch += 1;
            RoundRow {
                epoch,
                client: st.id,
                phase: None,
                ce_loss: ce,
                kl_loss: None,
                phi_d: None,
                phi_p: st.phi_p,
                r: None,
                comm_event: false,
            }
        };
        if !cfg.strategy.evaluates_global() {
            let p = self.state.personalized.clone();
            self.offer(row.phi_p, epoch, &p);
        }
        Ok(row)
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub log: RoundLog,
    pub results: Results,
    /// Best model of each client by validation macro F1.
    pub best: Vec<NamedTensorMap>,
    /// Each client's own model after the last epoch.
    pub finals: Vec<NamedTensorMap>,
}

/// Synthesizes the default client profiles for `cfg` and runs on them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (data, ood) = synth_for(cfg)?;
    run_experiment_on(cfg, &data, Some(&ood))
}

/// The training clients and the OOD client `cfg` describes.
pub fn synth_for(cfg: &ExperimentConfig) -> Result<(FederatedDataset, ClientDataset)> {
    let profiles = default_profiles_with_dim(cfg.data_scale, cfg.dim)?;
    let profiles = &profiles[..cfg.k];
    Ok((synth(profiles, cfg.seed)?, ood_client(profiles, cfg.seed)?))
}

struct Sink {
    dir: PathBuf,
    curves: report::CurveWriter,
}

impl Sink {
    fn open(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report::write_config_echo(dir, cfg)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            curves: report::CurveWriter::create(&dir.join("curves.csv"))?,
        })
    }
}

/// Runs `cfg` on prepared clients. The first `cfg.k` clients of `data`
/// take part; `ood`, when given, is scored by every client's best model.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    data: &FederatedDataset,
    ood: Option<&ClientDataset>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    if data.clients.len() < cfg.k {
        return Err(Error::InvalidDataset(format!(
            "{} clients requested, dataset has {}",
            cfg.k,
            data.clients.len()
        )));
    }
    if data.dim != spec.input_len() || data.classes != spec.classes() {
        return Err(Error::InvalidDataset(format!(
            "dataset is {}-dim with {} classes, model expects {} and {}",
            data.dim,
            data.classes,
            spec.input_len(),
            spec.classes()
        )));
    }
    let mut sink = cfg.output_dir.as_deref().map(|d| Sink::open(d, cfg)).transpose()?;
    let mut body = |exec: Exec| run_loop(cfg, &spec, &data.clients[..cfg.k], ood, exec, &mut sink);
    let out = if cfg.workers == 0 {
        body(Exec::Parallel)
    } else {
        with_workers(cfg.workers, body)
    };
    if let Some(s) = sink.as_mut() {
        s.curves.flush()?;
    }
    let out = out?;
    if let Some(s) = &sink {
        report::write_results(&s.dir, &out.results)?;
        for (k, p) in out.finals.iter().enumerate() {
            save_checkpoint(&s.dir.join(format!("final_client{k}.ckpt")), spec.id(), p)?;
        }
    }
    Ok(out)
}

fn run_loop(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    clients: &[ClientDataset],
    ood: Option<&ClientDataset>,
    exec: Exec,
    sink: &mut Option<Sink>,
) -> Result<RunOutput> {
    let opt = OptimizerState {
        base_lr: cfg.base_lr,
        halving_period: cfg.lr_halving,
        epoch: 0,
    };
    let mut runs: Vec<ClientRun> = clients
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let client_seed = c.profile.as_ref().map_or(k as u64, |p| p.seed);
            let init = spec.init_params(&mut init_rng(cfg.seed, client_seed));
            ClientRun {
                train: c.samples(Split::Train),
                val: c.samples(Split::Val),
                rng: client_rng(cfg.seed, client_seed),
                state: ClientState::new(k, init.clone(), opt),
                best: Best {
                    f1: -1.0,
                    epoch: 0,
                    params: init,
                    dirty: false,
                },
            }
        })
        .collect();

    let schedule = cfg.schedule();
    let pfa = cfg.strategy.server() == Some(AggregationStrategy::Pfa);
    let mut log = RoundLog::default();
    for t in 0..cfg.t {
        let mut rows = exec
            .map_mut(&mut runs, |_, run| run.epoch(cfg, spec))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let r = schedule_r(t + 1, &schedule)?;
        let comm = (t + 1) % cfg.e == 0 && cfg.strategy.server().is_some();
        if comm {
            let uploads: Vec<NamedTensorMap> = runs.iter().map(|c| c.state.upload_model()).collect();
            communicate(cfg, spec, &mut runs, &uploads, r, t, exec)?;
        }
        for row in &mut rows {
            row.comm_event = comm;
            row.r = pfa.then_some(r);
        }
        if let Some(s) = sink.as_mut() {
            for row in &rows {
                s.curves.write(row)?;
            }
            s.curves.flush()?;
            for run in runs.iter_mut().filter(|r| r.best.dirty) {
                let path = s.dir.join(format!("best_client{}.ckpt", run.state.id));
                save_checkpoint(&path, spec.id(), &run.best.params)?;
                run.best.dirty = false;
            }
        }
        log.rows.extend(rows);
    }

    let evals = exec
        .map(&runs, |k, run| -> Result<(EvalResult, Option<EvalResult>)> {
            let test = clients[k].samples(Split::Test);
            let t = eval_on(&run.best.params, spec, &test)?;
            let o = ood.map(|o| eval_on(&run.best.params, spec, &o.all())).transpose()?;
            Ok((t, o))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let client_results = runs
        .iter()
        .zip(&evals)
        .enumerate()
        .map(|(k, (run, (test, o)))| ClientResult {
            client: k,
            name: clients[k]
                .profile
                .as_ref()
                .map_or_else(|| k.to_string(), |p| p.name.clone()),
            best_epoch: run.best.epoch,
            val_f1: run.best.f1,
            test: MetricPair {
                f1: test.macro_f1,
                auc: test.macro_auc,
            },
            ood: o.as_ref().map(|o| MetricPair {
                f1: o.macro_f1,
                auc: o.macro_auc,
            }),
            mean_boundary_change: log.mean_boundary_change(k),
        })
        .collect();
    let results = Results::new(cfg, log.aggregation_events(), client_results);
    Ok(RunOutput {
        config: cfg.clone(),
        best: runs.iter().map(|r| r.best.params.clone()).collect(),
        finals: runs.iter().map(|r| r.state.personalized.clone()).collect(),
        log,
        results,
    })
}

fn communicate(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    runs: &mut [ClientRun],
    uploads: &[NamedTensorMap],
    r: f64,
    t: usize,
    exec: Exec,
) -> Result<()> {
    let det = cfg.strategy.uses_det();
    match cfg.strategy.server() {
        Some(AggregationStrategy::Pfa) => {
            let out = pfa_aggregate(uploads, r, exec)?;
            for (run, agg) in runs.iter_mut().zip(out) {
                if det {
                    run.state.receive_deputy(&agg)?;
                } else {
                    run.state.personalized = agg;
                }
            }
        }
        Some(AggregationStrategy::FedAvg) => {
            let global = fedavg_aggregate(uploads, exec)?;
            if det {
                for run in runs.iter_mut() {
                    run.state.receive_deputy(&global)?;
                }
            } else {
                let scores = exec
                    .map(runs, |_, run| validation_f1(&global, spec, &run.val))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                for (run, f1) in runs.iter_mut().zip(scores) {
                    run.state.personalized = global.clone();
                    run.state.deputy = global.clone();
                    if cfg.strategy.evaluates_global() {
                        run.offer(f1, t, &global);
                    }
                }
            }
        }
        None => {}
    }
    Ok(())
}

/// Scores `params` on `samples`.
pub fn eval_on(params: &NamedTensorMap, spec: &ModelSpec, samples: &Samples) -> Result<EvalResult> {
    let probs = predict_probs(params, spec, &samples.features)?;
    evaluate(&probs, &samples.labels, spec.classes())
}
