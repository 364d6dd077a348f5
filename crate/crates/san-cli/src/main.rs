//! `san`: data generation, training, evaluation, gradient checking, and
//! checkpoint averaging for the siamese CTC/attention recognizer.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config error,
//! 3 I/O or corruption.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use san_cli::config::RunConfig;
use san_cli::errors::{CmdError, CmdResult};
use san_cli::{datagen, evalrun, formats, gradcheckcmd, train};

#[derive(Parser)]
#[command(name = "san", version, about = "siamese CTC/attention sequence recognizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic confusable-token corpus and vocabulary.
    Datagen {
        /// JSON run configuration (synth section drives generation).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.bin/dev.bin/test.bin/vocab.txt.
        #[arg(long)]
        out: PathBuf,
        /// Overrides synth.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model, writing one checkpoint pair per epoch plus train.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory produced by datagen.
        #[arg(long = "data-dir")]
        data_dir: PathBuf,
        /// Run directory for checkpoints, config echo, and the log.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Continue from the latest epoch checkpoint in --out-dir.
        #[arg(long)]
        resume: bool,
        /// Omit wall-time fields so outputs are byte-reproducible.
        #[arg(long = "no-timing")]
        no_timing: bool,
    },
    /// Evaluate a checkpoint over a dataset in one or more decode modes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (e.g. test.bin); vocab.txt must sit next to it.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: greedy,ctc_prefix,attention,attention_rescore.
        #[arg(long, default_value = "greedy,ctc_prefix,attention,attention_rescore")]
        modes: String,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        /// n-best size fed to attention rescoring.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report seconds as 0.0 so outputs are byte-reproducible.
        #[arg(long = "no-timing")]
        no_timing: bool,
    },
    /// Check model gradients against central finite differences.
    Gradcheck {
        /// Optional config; defaults to the built-in tiny reference model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dropout mask seed; dropout is disabled during the check, so the
        /// result does not depend on it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference probe step.
        #[arg(long, default_value_t = 3e-5)]
        eps: f64,
        /// Test hook: corrupt one gradient coordinate; must exit 1.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Average checkpoints parameter-wise.
    Avg {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> CmdResult<()> {
    match cmd {
        Cmd::Datagen { config, out, seed } => {
            let mut run_cfg = RunConfig::from_file(&config)?;
            if let Some(seed) = seed {
                run_cfg.synth.seed = seed;
            }
            let outcome = datagen::run_datagen(&run_cfg, &out)?;
            println!(
                "wrote {} train / {} dev / {} test utterances to {}",
                outcome.n_train,
                outcome.n_dev,
                outcome.n_test,
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            data_dir,
            out_dir,
            resume,
            no_timing,
        } => {
            let run_cfg = RunConfig::from_file(&config)?;
            let outcome = train::run_training(&run_cfg, &data_dir, &out_dir, resume, no_timing)?;
            println!(
                "trained {} epochs ({} steps, {} infeasible skipped, {} steps rejected)",
                outcome.final_epoch,
                outcome.steps,
                outcome.skipped_infeasible,
                outcome.rejected_steps
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            modes,
            beam,
            k,
            out,
            no_timing,
        } => {
            let modes = evalrun::parse_modes(&modes)?;
            let run_cfg = train::find_run_config(&checkpoint)?;
            let cfg = run_cfg.model_config()?;
            let params = formats::read_checkpoint(&checkpoint)?;
            let set = formats::read_dataset(&data)?;
            formats::validate_dataset(&set, cfg.feature_dim, cfg.vocab_size)?;
            let vocab_path = data
                .parent()
                .unwrap_or_else(|| std::path::Path::new("."))
                .join("vocab.txt");
            if vocab_path.exists() {
                let vocab = formats::read_vocab(&vocab_path)?;
                if vocab.len() != cfg.vocab_size {
                    return Err(CmdError::usage(format!(
                        "vocabulary {} has {} entries, checkpoint expects {}",
                        vocab_path.display(),
                        vocab.len(),
                        cfg.vocab_size
                    )));
                }
            }
            let reports = evalrun::evaluate(&params, &cfg, &set, &modes, beam, k, no_timing)?;
            let rendered = evalrun::render_report(reports, &checkpoint, &data)?;
            match out {
                Some(path) => std::fs::write(&path, rendered)?,
                None => print!("{rendered}"),
            }
            Ok(())
        }
        Cmd::Gradcheck {
            config,
            seed,
            eps,
            corrupt_gradient,
        } => {
            let run_cfg = match config {
                Some(path) => RunConfig::from_file(&path)?,
                None => RunConfig::tiny_reference(),
            };
            let out = gradcheckcmd::run_gradcheck(&run_cfg, seed, eps, corrupt_gradient)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst: {})",
                out.max_rel_err, out.coordinates, out.worst
            );
            if out.passed {
                println!("gradcheck PASS (threshold {:.0e})", gradcheckcmd::PASS_THRESHOLD);
                Ok(())
            } else {
                Err(CmdError::Check(format!(
                    "max relative error {:.3e} >= {:.0e}",
                    out.max_rel_err,
                    gradcheckcmd::PASS_THRESHOLD
                )))
            }
        }
        Cmd::Avg { inputs, out } => {
            train::average_checkpoint_files(&inputs, &out)?;
            println!("averaged {} checkpoints into {}", inputs.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("san: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
