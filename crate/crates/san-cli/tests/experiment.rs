//! Hand-run experiment driver for the synthetic benchmark: trains the
//! baseline (lambda3 = 0) and the siamese objective (lambda3 = 2) across
//! seeds and prints test token error rates in attention-rescore mode.
//!
//! Run with:
//!   cargo test -p san-cli --test experiment -- --ignored --nocapture

use std::sync::Mutex;
use std::time::Instant;

use san_cli::config::RunConfig;
use san_cli::evalrun::{mode_error_rate, Mode};
use san_cli::train::train_in_memory;
use san_core::synth::generate_dataset;

fn run_matrix(dropout: f64, seeds: &[u64]) {
    let mut run_cfg = RunConfig::default();
    run_cfg.model.dropout_p = dropout;
    let synth = run_cfg.synth_config().unwrap();
    let corpus = generate_dataset(&synth).unwrap();
    let cfg = run_cfg.model_config().unwrap();

    struct Job {
        seed: u64,
        lambda3: f64,
    }
    let mut jobs = Vec::new();
    for &seed in seeds {
        for lambda3 in [0.0, 2.0] {
            jobs.push(Job { seed, lambda3 });
        }
    }
    let results: Mutex<Vec<(u64, f64, f64, f64)>> = Mutex::new(Vec::new());
    let next: Mutex<usize> = Mutex::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(4);
    let started = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = {
                    let mut n = next.lock().unwrap();
                    if *n >= jobs.len() {
                        break;
                    }
                    let i = *n;
                    *n += 1;
                    i
                };
                let job = &jobs[idx];
                let mut settings = run_cfg.train_settings().unwrap();
                settings.master_seed = job.seed;
                settings.lambda3 = job.lambda3;
                let t0 = Instant::now();
                let run = train_in_memory(&cfg, &settings, &corpus.train, 1).unwrap();
                let train_secs = t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                let test_err = mode_error_rate(
                    &run.final_params,
                    &cfg,
                    &corpus.test,
                    Mode::AttentionRescore,
                    8,
                    8,
                )
                .unwrap();
                let eval_secs = t1.elapsed().as_secs_f64();
                eprintln!(
                    "dropout {dropout} seed {} lambda3 {}: test TER {:.4} (train {:.0}s eval {:.0}s)",
                    job.seed, job.lambda3, test_err, train_secs, eval_secs
                );
                results
                    .lock()
                    .unwrap()
                    .push((job.seed, job.lambda3, test_err, train_secs));
            });
        }
    });
    let mut rows = results.into_inner().unwrap();
    rows.sort_by(|a, b| (a.0, a.1.to_bits()).cmp(&(b.0, b.1.to_bits())));
    let mut base_mean = 0.0;
    let mut san_mean = 0.0;
    let mut wins = 0;
    for &seed in seeds {
        let base = rows
            .iter()
            .find(|r| r.0 == seed && r.1 == 0.0)
            .map(|r| r.2)
            .unwrap();
        let san = rows
            .iter()
            .find(|r| r.0 == seed && r.1 == 2.0)
            .map(|r| r.2)
            .unwrap();
        base_mean += base;
        san_mean += san;
        if san < base {
            wins += 1;
        }
        eprintln!("dropout {dropout} seed {seed}: baseline {base:.4} vs san {san:.4}");
    }
    base_mean /= seeds.len() as f64;
    san_mean /= seeds.len() as f64;
    eprintln!(
        "== dropout {dropout}: baseline mean {base_mean:.4}, san mean {san_mean:.4}, san wins {wins}/{} ({:.0}s total)",
        seeds.len(),
        started.elapsed().as_secs_f64()
    );
}

#[test]
#[ignore = "multi-minute hyperparameter sweep, run by hand"]
fn benchmark_sweep() {
    let seeds = [11u64, 22, 33, 44, 55];
    let dropouts: Vec<f64> = std::env::var("SWEEP_DROPOUTS")
        .unwrap_or_else(|_| "0.1".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    for dropout in dropouts {
        run_matrix(dropout, &seeds);
    }
}
