//! The `gradcheck` command: reverse-mode gradients of the full training
//! objective against central finite differences on a fixed probe utterance.
//!
//! Dropout is forced off for the check, so the optional `--seed` (which
//! feeds only the dropout mask stream) cannot change the result; it exists
//! so the flag surface matches the other commands.

use san_core::gradcheck::grad_check;
use san_core::model::init_params;
use san_core::siamese::{utterance_grad, utterance_loss};
use san_core::synth::FeatureSequence;
use san_core::{Params, Rng, Tensor};

use crate::config::RunConfig;
use crate::errors::{CmdError, CmdResult};

/// Everything about the probe is fixed so the command is reproducible.
const INIT_SEED: u64 = 1234;
const FEATURE_SEED: u64 = 90210;
const TARGET_LEN: usize = 3;
const FRAMES: usize = 7;

/// Threshold pinned by the command contract: exit 0 iff the maximum
/// relative error is below this.
pub const PASS_THRESHOLD: f64 = 1e-4;

pub struct GradCheckOutput {
    pub max_rel_err: f64,
    pub worst: String,
    pub coordinates: usize,
    pub passed: bool,
}

pub fn run_gradcheck(
    run_cfg: &RunConfig,
    mask_seed: u64,
    eps: f64,
    corrupt_gradient: bool,
) -> CmdResult<GradCheckOutput> {
    let mut cfg = run_cfg.model_config()?;
    // The check compares against finite differences of a deterministic
    // function, so dropout is off no matter what the config says.
    cfg.dropout_p = 0.0;
    let settings = run_cfg.train_settings()?;

    let frames = FRAMES * cfg.subsample;
    let mut rng = Rng::new(FEATURE_SEED);
    let mut features = Tensor::zeros(vec![frames, cfg.feature_dim]);
    for v in features.data_mut() {
        *v = rng.normal();
    }
    let tokens: Vec<usize> = (0..TARGET_LEN).map(|i| 2 + i % (cfg.vocab_size - 2)).collect();
    let utt = FeatureSequence {
        features,
        tokens,
        utterance_id: "gradcheck-probe".into(),
    };

    let params = init_params(&cfg, INIT_SEED)?;
    let Some((mut grads, _)) = utterance_grad(&params, &cfg, &settings, &utt, mask_seed)? else {
        return Err(CmdError::usage(
            "gradcheck probe utterance is CTC-infeasible under this config",
        ));
    };
    if corrupt_gradient {
        // Test hook: a deliberately wrong gradient must be caught.
        let first = grads.values_mut().next().expect("non-empty gradient map");
        first.data_mut()[0] += 1.0;
    }
    let report = grad_check(
        |p: &Params| {
            utterance_loss(p, &cfg, &settings, &utt, mask_seed)
                .map(|v| v.expect("feasibility is independent of parameter values"))
        },
        &params,
        &grads,
        eps,
    )?;
    Ok(GradCheckOutput {
        max_rel_err: report.max_rel_err,
        worst: format!("{}[{}]", report.worst_param, report.worst_index),
        coordinates: report.coordinates,
        passed: report.max_rel_err < PASS_THRESHOLD,
    })
}
