use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedfreq::aggregate::{aggregate, AggregationOutput, AggregationRequest, AggregationStrategy};
use fedfreq::data::{default_profiles_with_dim, ood_client, read_fsd, synth, write_fsd, ClientProfile, FederatedDataset, Split};
use fedfreq::experiment::{
    eval_on, load_checkpoint, read_curves, read_results, run_experiment, run_experiment_on, save_checkpoint,
    summary_table, ExperimentConfig,
};
use fedfreq::model::ModelSpec;
use fedfreq::parallel::Exec;
use fedfreq::{Error, Result};

#[derive(Parser)]
#[command(name = "fedfreq", version, about = "Federated learning with frequency-domain aggregation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the default synthetic clients and the OOD client as FSD1 files.
    SynthData {
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Number of clients, 1 to 4.
        #[arg(long, default_value_t = 4)]
        clients: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run an experiment from a key = value config file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Use clients from a synth-data directory instead of generating them.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Aggregate checkpoints offline.
    Aggregate {
        /// PFA or FEDAVG.
        #[arg(long)]
        strategy: AggregationStrategy,
        /// Low-frequency threshold for PFA.
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Summarize finished runs.
    Report {
        /// Run directories or results.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::SynthData {
            scale,
            seed,
            dim,
            clients,
            out_dir,
        } => synth_data(scale, seed, dim, clients, &out_dir),
        Cmd::Run {
            config,
            overrides,
            data_dir,
            out_dir,
        } => run(config.as_deref(), &overrides, data_dir.as_deref(), out_dir),
        Cmd::Aggregate {
            strategy,
            r,
            out_dir,
            inputs,
        } => aggregate_cmd(strategy, r, &out_dir, &inputs),
        Cmd::Eval { checkpoint, data, split } => eval(&checkpoint, &data, &split),
        Cmd::Report { runs } => report(&runs),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth_data(scale: f64, seed: u64, dim: usize, clients: usize, out_dir: &Path) -> Result<()> {
    let profiles = default_profiles_with_dim(scale, dim)?;
    if clients == 0 || clients > profiles.len() {
        return Err(Error::Config(format!("clients must be in 1..={}", profiles.len())));
    }
    let profiles = &profiles[..clients];
    let data = synth(profiles, seed)?;
    let ood = ood_client(profiles, seed)?;
    create_dir(out_dir)?;
    for c in &data.clients {
        let name = c.profile.as_ref().map_or("x", |p| p.name.as_str());
        let path = out_dir.join(format!("client_{name}.fsd"));
        write_fsd(&path, c)?;
        println!("{}: {} train, {} val, {} test", path.display(), c.train.len(), c.val.len(), c.test.len());
    }
    write_fsd(&out_dir.join("ood.fsd"), &ood)?;
    let json = serde_json::to_string_pretty(profiles).expect("profiles serialize");
    write_text(&out_dir.join("profiles.json"), &json)?;
    println!("{}: {} samples", out_dir.join("ood.fsd").display(), ood.len());
    Ok(())
}

/// Clients `client_*.fsd` in name order, with generating profiles attached
/// when `profiles.json` is present.
fn load_data_dir(dir: &Path) -> Result<(FederatedDataset, Option<fedfreq::data::ClientDataset>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("client_") && n.ends_with(".fsd"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidDataset(format!("no client_*.fsd files in {}", dir.display())));
    }
    let profiles: Option<Vec<ClientProfile>> = match std::fs::read_to_string(dir.join("profiles.json")) {
        Ok(text) => Some(
            serde_json::from_str(&text).map_err(|e| Error::InvalidDataset(format!("profiles.json: {e}")))?,
        ),
        Err(_) => None,
    };
    let mut clients = Vec::new();
    for p in &paths {
        let mut c = read_fsd(p)?;
        if let Some(profiles) = &profiles {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").trim_start_matches("client_");
            c.profile = profiles.iter().find(|pr| pr.name == name).cloned();
        }
        clients.push(c);
    }
    let dim = clients[0].dim;
    let classes = clients[0].classes;
    if clients.iter().any(|c| c.dim != dim || c.classes != classes) {
        return Err(Error::InvalidDataset("client files disagree on dimension or classes".into()));
    }
    let ood_path = dir.join("ood.fsd");
    let ood = if ood_path.exists() { Some(read_fsd(&ood_path)?) } else { None };
    Ok((FederatedDataset { dim, classes, clients }, ood))
}

fn run(config: Option<&Path>, overrides: &[String], data_dir: Option<&Path>, out_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k, v)?;
    }
    if out_dir.is_some() {
        cfg.output_dir = out_dir;
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from(format!("runs/{}_seed{}", cfg.strategy, cfg.seed)));
    }
    cfg.validate()?;
    let out = match data_dir {
        Some(dir) => {
            let (data, ood) = load_data_dir(dir)?;
            if data.dim != cfg.dim {
                cfg.dim = data.dim;
                cfg.validate()?;
            }
            run_experiment_on(&cfg, &data, ood.as_ref())?
        }
        None => run_experiment(&cfg)?,
    };
    print!("{}", summary_table(std::slice::from_ref(&out.results)));
    if let Some(dir) = &cfg.output_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn aggregate_cmd(strategy: AggregationStrategy, r: Option<f64>, out_dir: &Path, inputs: &[PathBuf]) -> Result<()> {
    let cks = inputs.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let spec_id = cks[0].spec_id.clone();
    if cks.iter().any(|c| c.spec_id != spec_id) {
        return Err(Error::InvalidCheckpoint("inputs come from different model specs".into()));
    }
    let r = match (strategy, r) {
        (AggregationStrategy::Pfa, None) => return Err(Error::Config("PFA needs --r".into())),
        (_, r) => r.unwrap_or(0.0),
    };
    let req = AggregationRequest {
        client_params: cks.into_iter().map(|c| c.params).collect(),
        r,
        strategy,
    };
    let out = aggregate(&req, Exec::Parallel)?;
    create_dir(out_dir)?;
    match out {
        AggregationOutput::Personalized(maps) => {
            for (k, m) in maps.iter().enumerate() {
                let path = out_dir.join(format!("agg_{k}.ckpt"));
                save_checkpoint(&path, &spec_id, m)?;
                println!("{}", path.display());
            }
        }
        AggregationOutput::Global(m) => {
            let path = out_dir.join("global.ckpt");
            save_checkpoint(&path, &spec_id, &m)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: &str) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let client = read_fsd(data)?;
    let spec = ModelSpec::by_id(&ck.spec_id, client.dim, client.classes)?;
    spec.check_params(&ck.params)
        .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
    let samples = match split {
        "train" => client.samples(Split::Train),
        "val" => client.samples(Split::Val),
        "test" => client.samples(Split::Test),
        "all" => client.all(),
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let res = eval_on(&ck.params, &spec, &samples)?;
    let json = serde_json::json!({
        "samples": samples.len(),
        "macro_f1": res.macro_f1,
        "macro_auc": res.macro_auc,
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("json"));
    Ok(())
}

fn report(runs: &[PathBuf]) -> Result<()> {
    let mut results = Vec::new();
    let mut curves = Vec::new();
    for p in runs {
        let (file, dir) = if p.is_dir() {
            (p.join("results.json"), p.clone())
        } else {
            (p.clone(), p.parent().map(Path::to_path_buf).unwrap_or_default())
        };
        results.push(read_results(&file)?);
        let curve = dir.join("curves.csv");
        if curve.exists() {
            curves.push((dir, read_curves(&curve)?));
        }
    }
    print!("{}", summary_table(&results));
    for (dir, log) in curves {
        let changes: Vec<String> = (0..log.clients())
            .map(|k| log.mean_boundary_change(k).map_or_else(|| "-".into(), |c| format!("{c:+.4}")))
            .collect();
        println!("{}: {} rows, boundary change per client [{}]", dir.display(), log.rows.len(), changes.join(" "));
    }
    Ok(())
}
