//! Four-mode evaluation harness: greedy, CTC prefix beam, attention beam,
//! and attention rescoring of the CTC n-best, each scored with token error
//! rate and a substitution/insertion/deletion split.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use san_core::ctc::{greedy_decode, prefix_beam_decode};
use san_core::metrics::edit_distance;
use san_core::model::{attention_decode, rescore, Hypothesis, InferenceContext, ModelConfig};
use san_core::synth::Dataset;
use san_core::Params;

use crate::errors::{CmdError, CmdResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    Greedy,
    CtcPrefix,
    Attention,
    AttentionRescore,
}

impl Mode {
    pub fn parse(name: &str) -> CmdResult<Mode> {
        match name {
            "greedy" => Ok(Mode::Greedy),
            "ctc_prefix" => Ok(Mode::CtcPrefix),
            "attention" => Ok(Mode::Attention),
            "attention_rescore" => Ok(Mode::AttentionRescore),
            other => Err(CmdError::usage(format!(
                "unknown decode mode \"{other}\" (greedy|ctc_prefix|attention|attention_rescore)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Greedy => "greedy",
            Mode::CtcPrefix => "ctc_prefix",
            Mode::Attention => "attention",
            Mode::AttentionRescore => "attention_rescore",
        }
    }
}

pub fn parse_modes(spec: &str) -> CmdResult<Vec<Mode>> {
    let mut modes = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mode = Mode::parse(part)?;
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    if modes.is_empty() {
        return Err(CmdError::usage("no decode modes requested"));
    }
    Ok(modes)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub err: f64,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub n_ref: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub modes: std::collections::BTreeMap<String, ModeReport>,
    pub checkpoint: String,
    pub dataset: String,
}

/// Decodes one utterance in the given mode. Dropout is always disabled.
pub fn decode_utterance(
    params: &Params,
    cfg: &ModelConfig,
    features: &san_core::Tensor,
    mode: Mode,
    beam: usize,
    k: usize,
) -> CmdResult<Hypothesis> {
    let mut ctx = InferenceContext::new(params, cfg, features)?;
    match mode {
        Mode::Greedy => {
            let lp = ctx.frame_log_probs()?;
            Ok(greedy_decode(&lp))
        }
        Mode::CtcPrefix => {
            let lp = ctx.frame_log_probs()?;
            let out = prefix_beam_decode(&lp, beam, 1)?;
            Ok(out.hyps.into_iter().next().unwrap_or(Hypothesis {
                tokens: vec![],
                log_score: f64::NEG_INFINITY,
            }))
        }
        Mode::Attention => {
            let max_len = cfg.max_decode_len(ctx.frame_count());
            Ok(attention_decode(&mut ctx, beam, max_len)?.hyp)
        }
        Mode::AttentionRescore => {
            let lp = ctx.frame_log_probs()?;
            let out = prefix_beam_decode(&lp, beam.max(k), k)?;
            if out.hyps.is_empty() {
                return Ok(Hypothesis {
                    tokens: vec![],
                    log_score: f64::NEG_INFINITY,
                });
            }
            Ok(rescore(&mut ctx, &out.hyps)?)
        }
    }
}

/// Runs the requested modes over a dataset.
pub fn evaluate(
    params: &Params,
    cfg: &ModelConfig,
    set: &Dataset,
    modes: &[Mode],
    beam: usize,
    k: usize,
    no_timing: bool,
) -> CmdResult<std::collections::BTreeMap<String, ModeReport>> {
    if beam < k.max(1) || k == 0 {
        return Err(CmdError::usage("need beam >= k >= 1"));
    }
    let n_ref: usize = set.items.iter().map(|i| i.tokens.len()).sum();
    if n_ref == 0 {
        return Err(CmdError::usage("dataset has zero reference tokens"));
    }
    let mut out = std::collections::BTreeMap::new();
    for &mode in modes {
        let start = Instant::now();
        let mut sub = 0;
        let mut ins = 0;
        let mut del = 0;
        for item in &set.items {
            let hyp = decode_utterance(params, cfg, &item.features, mode, beam, k)?;
            let counts = edit_distance(&item.tokens, &hyp.tokens);
            sub += counts.substitutions;
            ins += counts.insertions;
            del += counts.deletions;
        }
        let seconds = if no_timing {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        out.insert(
            mode.name().to_string(),
            ModeReport {
                err: (sub + ins + del) as f64 / n_ref as f64,
                sub,
                ins,
                del,
                n_ref,
                seconds,
            },
        );
    }
    Ok(out)
}

/// Token error rate in a single mode; convenience for tests and experiments.
pub fn mode_error_rate(
    params: &Params,
    cfg: &ModelConfig,
    set: &Dataset,
    mode: Mode,
    beam: usize,
    k: usize,
) -> CmdResult<f64> {
    let reports = evaluate(params, cfg, set, &[mode], beam, k, true)?;
    Ok(reports[mode.name()].err)
}

pub fn render_report(
    modes: std::collections::BTreeMap<String, ModeReport>,
    checkpoint: &Path,
    dataset: &Path,
) -> CmdResult<String> {
    let report = EvalReport {
        modes,
        checkpoint: checkpoint.display().to_string(),
        dataset: dataset.display().to_string(),
    };
    serde_json::to_string_pretty(&report)
        .map(|s| s + "\n")
        .map_err(|e| CmdError::io(format!("serializing report: {e}")))
}
