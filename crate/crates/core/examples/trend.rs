//! Compares strategies over several seeds on the default synthetic clients.
//!
//! cargo run --release --example trend -- [T] [seeds] [key=value ...]

use std::time::Instant;

use fedfreq::experiment::{run_experiment, ExperimentConfig, Strategy};

fn main() -> fedfreq::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let t: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(100);
    let seeds: u64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let mut base = ExperimentConfig {
        t,
        ..ExperimentConfig::default()
    };
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        base.set(k, v)?;
    }
    for strategy in Strategy::ALL {
        let start = Instant::now();
        let mut f1 = 0.0;
        let mut ood = 0.0;
        let mut boundary = vec![0.0; base.k];
        let mut per_client = vec![0.0; base.k];
        let mut phases = [0usize; 3];
        for seed in 0..seeds {
            let cfg = ExperimentConfig {
                strategy,
                seed,
                ..base.clone()
            };
            let out = run_experiment(&cfg)?;
            f1 += out.results.average.test.f1;
            ood += out.results.average.ood.map_or(0.0, |o| o.f1);
            for (b, c) in boundary.iter_mut().zip(&out.results.clients) {
                *b += c.mean_boundary_change.unwrap_or(0.0);
            }
            for (p, c) in per_client.iter_mut().zip(&out.results.clients) {
                *p += c.test.f1;
            }
            for row in &out.log.rows {
                if let Some(ph) = row.phase {
                    phases[ph as usize] += 1;
                }
            }
        }
        let n = seeds as f64;
        let b: Vec<String> = boundary.iter().map(|b| format!("{:+.4}", b / n)).collect();
        let pc: Vec<String> = per_client.iter().map(|p| format!("{:.3}", p / n)).collect();
        println!(
            "{:<11} f1 {:.4} [{}] ood {:.4} boundary [{}] phases {:?} {:.1}s",
            strategy.as_str(),
            f1 / n,
            pc.join(" "),
            ood / n,
            b.join(" "),
            phases,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
