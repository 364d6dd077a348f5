//! The `datagen` command: generates the three splits plus the vocabulary
//! file and echoes the effective configuration next to them.

use std::path::Path;

use san_core::synth::generate_dataset;

use crate::config::RunConfig;
use crate::errors::CmdResult;
use crate::formats;

pub struct DatagenOutcome {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

pub fn run_datagen(run_cfg: &RunConfig, out_dir: &Path) -> CmdResult<DatagenOutcome> {
    let synth_cfg = run_cfg.synth_config()?;
    let corpus = generate_dataset(&synth_cfg)?;
    std::fs::create_dir_all(out_dir)?;
    formats::write_dataset(&out_dir.join("train.bin"), &corpus.train)?;
    formats::write_dataset(&out_dir.join("dev.bin"), &corpus.dev)?;
    formats::write_dataset(&out_dir.join("test.bin"), &corpus.test)?;
    formats::write_vocab(&out_dir.join("vocab.txt"), synth_cfg.n_tokens)?;
    run_cfg.echo(&out_dir.join("config.json"))?;
    Ok(DatagenOutcome {
        n_train: corpus.train.items.len(),
        n_dev: corpus.dev.items.len(),
        n_test: corpus.test.items.len(),
    })
}
