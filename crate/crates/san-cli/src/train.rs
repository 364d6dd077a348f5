//! The training loop: deterministic epochs over padded batches, per-step
//! JSON-lines logging, one checkpoint pair per epoch, resume, and optional
//! per-utterance parallelism capped by the SAN_THREADS environment variable
//! (gradients are always reduced in slot order, so the thread count never
//! changes the result).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use san_core::model::{init_params, ModelConfig};
use san_core::optim::AdamState;
use san_core::siamese::{
    apply_reduced, mask_seed_for, utterance_grad, LossBreakdown, StepStatus, TrainSettings,
};
use san_core::synth::{batch_iter, Dataset, FeatureSequence};
use san_core::{GradMap, Params};

use crate::config::RunConfig;
use crate::errors::{CmdError, CmdResult};
use crate::formats;

pub fn ckpt_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch-{epoch:03}.ckpt"))
}

pub fn opt_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch-{epoch:03}.opt"))
}

/// Worker-thread cap; 1 (the default) is fully sequential.
pub fn thread_cap() -> usize {
    std::env::var("SAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(out_dir: &Path) -> CmdResult<Self> {
        let path = out_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CmdError::io(format!(
                "{} exists; another training run owns this directory (delete the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Per-utterance gradients for one batch, computed on up to `threads`
/// workers, returned in slot order with infeasible slots dropped.
fn batch_grads(
    params: &Params,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    utterances: &[FeatureSequence],
    step: u64,
    threads: usize,
) -> CmdResult<(Vec<GradMap>, Vec<LossBreakdown>, usize)> {
    let mut slots: Vec<Option<(GradMap, LossBreakdown)>> = Vec::with_capacity(utterances.len());
    if threads <= 1 || utterances.len() <= 1 {
        for (slot, utt) in utterances.iter().enumerate() {
            let seed = mask_seed_for(settings.master_seed, step, slot as u64);
            slots.push(utterance_grad(params, cfg, settings, utt, seed)?);
        }
    } else {
        let results: Mutex<Vec<Option<Result<Option<(GradMap, LossBreakdown)>, san_core::Error>>>> =
            Mutex::new((0..utterances.len()).map(|_| None).collect());
        let next: Mutex<usize> = Mutex::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads.min(utterances.len()) {
                scope.spawn(|| loop {
                    let slot = {
                        let mut n = next.lock().unwrap();
                        if *n >= utterances.len() {
                            break;
                        }
                        let s = *n;
                        *n += 1;
                        s
                    };
                    let seed = mask_seed_for(settings.master_seed, step, slot as u64);
                    let out = utterance_grad(params, cfg, settings, &utterances[slot], seed);
                    results.lock().unwrap()[slot] = Some(out);
                });
            }
        });
        for cell in results.into_inner().unwrap() {
            slots.push(cell.expect("worker filled every slot")?);
        }
    }
    let mut grads = Vec::new();
    let mut losses = Vec::new();
    let mut skipped = 0;
    for slot in slots {
        match slot {
            Some((g, l)) => {
                grads.push(g);
                losses.push(l);
            }
            None => skipped += 1,
        }
    }
    Ok((grads, losses, skipped))
}

pub struct TrainOutcome {
    pub final_epoch: usize,
    pub steps: u64,
    pub skipped_infeasible: usize,
    pub rejected_steps: usize,
}

pub fn run_training(
    run_cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: bool,
    no_timing: bool,
) -> CmdResult<TrainOutcome> {
    let cfg = run_cfg.model_config()?;
    let settings = run_cfg.train_settings()?;
    let started = Instant::now();

    let train_set = formats::read_dataset(&data_dir.join("train.bin"))?;
    if train_set.items.is_empty() {
        return Err(CmdError::usage("training set is empty"));
    }
    formats::validate_dataset(&train_set, cfg.feature_dim, cfg.vocab_size)?;
    let vocab = formats::read_vocab(&data_dir.join("vocab.txt"))?;
    if vocab.len() != cfg.vocab_size {
        return Err(CmdError::usage(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let _lock = LockGuard::acquire(out_dir)?;
    run_cfg.echo(&out_dir.join("config.json"))?;

    let (mut params, mut state, start_epoch) = if resume {
        let mut latest = None;
        for epoch in (1..=settings.epochs).rev() {
            if ckpt_path(out_dir, epoch).exists() {
                latest = Some(epoch);
                break;
            }
        }
        match latest {
            Some(epoch) => {
                // Anything wrong with declared-present resume state is
                // corruption, not usage.
                let params = formats::read_checkpoint(&ckpt_path(out_dir, epoch))
                    .map_err(|e| CmdError::io(e.to_string()))?;
                let state = formats::read_opt_state(&opt_path(out_dir, epoch))
                    .map_err(|e| CmdError::io(e.to_string()))?;
                if state.m.len() != params.len() {
                    return Err(CmdError::io(format!(
                        "resume state at epoch {epoch} does not match its checkpoint"
                    )));
                }
                (params, state, epoch)
            }
            None => {
                let params = init_params(&cfg, settings.master_seed)?;
                let state = AdamState::new(&params);
                (params, state, 0)
            }
        }
    } else {
        let params = init_params(&cfg, settings.master_seed)?;
        let state = AdamState::new(&params);
        (params, state, 0)
    };

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("train.log"))?;
    let threads = thread_cap();
    let mut skipped_total = 0usize;
    let mut rejected_total = 0usize;

    for epoch in start_epoch + 1..=settings.epochs {
        let batches = batch_iter(
            &train_set,
            settings.batch_size,
            settings.master_seed,
            epoch as u64,
        )?;
        for batch in &batches {
            let utterances: Vec<FeatureSequence> =
                (0..batch.len()).map(|i| batch.utterance(i)).collect();
            // The step index is 1-based and counts applied steps only, so it
            // must be derived before the attempt.
            let step = state.step + 1;
            let (grads, losses, skipped) =
                batch_grads(&params, &cfg, &settings, &utterances, step, threads)?;
            skipped_total += skipped;
            let outcome = apply_reduced(&mut params, &mut state, &settings, &grads, &losses, skipped)?;
            match outcome.status {
                StepStatus::Applied => {
                    let l = outcome.losses.expect("applied step has losses");
                    writeln!(
                        log,
                        "{}",
                        serde_json::json!({
                            "step": state.step,
                            "lr": outcome.lr,
                            "l_ctc": l.l_ctc,
                            "l_attn": l.l_attn,
                            "l_kl": l.l_kl,
                            "l_all": l.l_all,
                        })
                    )?;
                }
                StepStatus::SkippedEmptyBatch => {}
                StepStatus::RejectedNonFinite => {
                    rejected_total += 1;
                }
            }
        }
        formats::write_checkpoint(&ckpt_path(out_dir, epoch), &params)?;
        formats::write_opt_state(&opt_path(out_dir, epoch), &state)?;
        eprintln!("epoch {epoch}/{} done ({} steps so far)", settings.epochs, state.step);
    }

    let mut summary = serde_json::json!({
        "summary": true,
        "epochs": settings.epochs,
        "steps": state.step,
        "skipped_infeasible": skipped_total,
        "rejected_steps": rejected_total,
    });
    if !no_timing {
        summary["wall_seconds"] = serde_json::json!(started.elapsed().as_secs_f64());
    }
    writeln!(log, "{summary}")?;
    log.flush()?;

    Ok(TrainOutcome {
        final_epoch: settings.epochs,
        steps: state.step,
        skipped_infeasible: skipped_total,
        rejected_steps: rejected_total,
    })
}

/// In-memory variant used by tests and the acceptance experiment driver:
/// same loop, no files, returns the per-epoch checkpoints.
pub struct MemoryRun {
    pub per_epoch: Vec<Params>,
    pub final_params: Params,
    pub steps: u64,
    pub skipped_infeasible: usize,
}

pub fn train_in_memory(
    cfg: &ModelConfig,
    settings: &TrainSettings,
    train_set: &Dataset,
    threads: usize,
) -> CmdResult<MemoryRun> {
    let mut params = init_params(cfg, settings.master_seed)?;
    let mut state = AdamState::new(&params);
    let mut per_epoch = Vec::with_capacity(settings.epochs);
    let mut skipped_total = 0;
    for epoch in 1..=settings.epochs {
        let batches = batch_iter(train_set, settings.batch_size, settings.master_seed, epoch as u64)?;
        for batch in &batches {
            let utterances: Vec<FeatureSequence> =
                (0..batch.len()).map(|i| batch.utterance(i)).collect();
            let step = state.step + 1;
            let (grads, losses, skipped) =
                batch_grads(&params, cfg, settings, &utterances, step, threads)?;
            skipped_total += skipped;
            apply_reduced(&mut params, &mut state, settings, &grads, &losses, skipped)?;
        }
        per_epoch.push(params.clone());
    }
    Ok(MemoryRun {
        final_params: params.clone(),
        per_epoch,
        steps: state.step,
        skipped_infeasible: skipped_total,
    })
}

/// Wire-level checkpoint averaging for `san avg`.
pub fn average_checkpoint_files(inputs: &[PathBuf], out: &Path) -> CmdResult<()> {
    if inputs.is_empty() {
        return Err(CmdError::usage("avg: need at least one input checkpoint"));
    }
    let mut sets = Vec::with_capacity(inputs.len());
    for path in inputs {
        sets.push(formats::read_checkpoint(path)?);
    }
    let averaged = Params::average(&sets).map_err(|e| CmdError::usage(e.to_string()))?;
    formats::write_checkpoint(out, &averaged)?;
    Ok(())
}

/// Marker so eval can sanity-check that a directory is a run directory.
pub fn find_run_config(checkpoint: &Path) -> CmdResult<RunConfig> {
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let candidate = dir.join("config.json");
    if !candidate.exists() {
        return Err(CmdError::usage(format!(
            "no config.json next to {}; eval needs the run directory's echoed config",
            checkpoint.display()
        )));
    }
    RunConfig::from_file(&candidate)
}
