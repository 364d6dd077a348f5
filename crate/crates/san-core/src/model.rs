//! The encoder-decoder network: a pluggable acoustic encoder producing H,
//! a linear+log-softmax CTC head over the frames of H, and an autoregressive
//! attention decoder with cross-attention into H, plus beam decoding and
//! n-best rescoring.
//!
//! Vocabulary convention: id 0 is the CTC blank, id 1 is the attention
//! sentinel (start and end marker), ids >= 2 are real tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{glorot, ParamNodes, Params};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const BLANK_ID: usize = 0;
pub const SENTINEL_ID: usize = 1;

/// Width of the feed-forward hidden layer relative to the model dimension.
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Recurrent,
    SelfAttention,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub encoder_kind: EncoderKind,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub dropout_p: f64,
    pub subsample: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.model_dim == 0
            || self.encoder_layers == 0
            || self.decoder_layers == 0
            || self.attention_heads == 0
        {
            return Err(Error::InvalidParameter("model dimensions must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::InvalidParameter(format!(
                "vocab_size {} < 3 (blank, sentinel, >=1 token)",
                self.vocab_size
            )));
        }
        if self.model_dim % self.attention_heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "model_dim {} not divisible by attention_heads {}",
                self.model_dim, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidParameter(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.subsample != 1 && self.subsample != 2 {
            return Err(Error::InvalidParameter(format!(
                "subsample {} must be 1 or 2",
                self.subsample
            )));
        }
        Ok(())
    }

    /// Output frame count for an input of length `frames`.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }

    /// Default decode length bound.
    pub fn max_decode_len(&self, enc_frames: usize) -> usize {
        2 * enc_frames + 5
    }
}

/// A token sequence with an accumulated log score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_score: f64,
}

/// Encoder output on a tape.
pub struct Encoding {
    pub hidden: NodeId,
    pub frames: usize,
}

fn ln_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.g"), format!("{prefix}.b"))
}

fn init_layer_norm(params: &mut Params, prefix: &str, dim: usize) {
    let (g, b) = ln_names(prefix);
    params.insert(&g, Tensor::full(vec![dim], 1.0));
    params.insert(&b, Tensor::zeros(vec![dim]));
}

/// Fresh parameters for the configuration. Matrices are Glorot-uniform,
/// biases zero, normalization gains one. Draw order is the sorted parameter
/// name order, so identical seeds give identical parameters.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let dm = cfg.model_dim;
    let mut shapes: Vec<(String, usize, usize)> = Vec::new();
    let mut params = Params::new();

    // Declare everything first so initialization order is name order, not
    // construction order.
    let mut declare = |params: &mut Params, name: &str, rows: usize, cols: usize| {
        shapes.push((String::from(name), rows, cols));
        params.insert(name, Tensor::zeros(vec![rows, cols]));
    };

    declare(&mut params, "enc.in.w", cfg.feature_dim, dm);
    params.insert("enc.in.b", Tensor::zeros(vec![dm]));
    for layer in 0..cfg.encoder_layers {
        match cfg.encoder_kind {
            EncoderKind::SelfAttention => {
                let p = format!("enc.l{layer}");
                init_layer_norm(&mut params, &format!("{p}.ln1"), dm);
                init_layer_norm(&mut params, &format!("{p}.ln2"), dm);
                for name in ["q", "k", "v", "o"] {
                    declare(&mut params, &format!("{p}.attn.{name}.w"), dm, dm);
                    // Key projections carry no bias: softmax scores are
                    // invariant to a constant added to every key, so the
                    // parameter would be permanently gradient-free.
                    if name != "k" {
                        params.insert(&format!("{p}.attn.{name}.b"), Tensor::zeros(vec![dm]));
                    }
                }
                declare(&mut params, &format!("{p}.ffn.w1.w"), dm, FFN_MULT * dm);
                params.insert(&format!("{p}.ffn.w1.b"), Tensor::zeros(vec![FFN_MULT * dm]));
                declare(&mut params, &format!("{p}.ffn.w2.w"), FFN_MULT * dm, dm);
                params.insert(&format!("{p}.ffn.w2.b"), Tensor::zeros(vec![dm]));
            }
            EncoderKind::Recurrent => {
                let p = format!("enc.l{layer}.lstm");
                declare(&mut params, &format!("{p}.wx"), dm, 4 * dm);
                declare(&mut params, &format!("{p}.wh"), dm, 4 * dm);
                params.insert(&format!("{p}.b"), Tensor::zeros(vec![4 * dm]));
            }
        }
    }
    if cfg.encoder_kind == EncoderKind::SelfAttention {
        init_layer_norm(&mut params, "enc.ln_out", dm);
    }

    declare(&mut params, "dec.embed", cfg.vocab_size, dm);
    for layer in 0..cfg.decoder_layers {
        let p = format!("dec.l{layer}");
        init_layer_norm(&mut params, &format!("{p}.ln1"), dm);
        init_layer_norm(&mut params, &format!("{p}.ln2"), dm);
        init_layer_norm(&mut params, &format!("{p}.ln3"), dm);
        for block in ["self", "cross"] {
            for name in ["q", "k", "v", "o"] {
                declare(&mut params, &format!("{p}.{block}.{name}.w"), dm, dm);
                if name != "k" {
                    params.insert(&format!("{p}.{block}.{name}.b"), Tensor::zeros(vec![dm]));
                }
            }
        }
        declare(&mut params, &format!("{p}.ffn.w1.w"), dm, FFN_MULT * dm);
        params.insert(&format!("{p}.ffn.w1.b"), Tensor::zeros(vec![FFN_MULT * dm]));
        declare(&mut params, &format!("{p}.ffn.w2.w"), FFN_MULT * dm, dm);
        params.insert(&format!("{p}.ffn.w2.b"), Tensor::zeros(vec![dm]));
    }
    init_layer_norm(&mut params, "dec.ln_out", dm);
    declare(&mut params, "dec.out.w", dm, cfg.vocab_size);
    params.insert("dec.out.b", Tensor::zeros(vec![cfg.vocab_size]));
    declare(&mut params, "ctc.w", dm, cfg.vocab_size);
    params.insert("ctc.b", Tensor::zeros(vec![cfg.vocab_size]));

    // Now fill matrices in sorted name order from one seeded stream.
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = Rng::fork(seed, 0x696e_6974, 0); // "init"
    for (name, rows, cols) in shapes {
        params.insert(&name, glorot(rows, cols, &mut rng));
    }
    Ok(params)
}

/// Sinusoidal positions, rows x dim.
fn sinusoid(rows: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, dim]);
    for pos in 0..rows {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let freq = libm::pow(10000.0, -2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            t.data_mut()[pos * dim + c] = if c % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
        }
    }
    t
}

/// Upper-triangular -inf mask so position i attends only to positions <= i.
fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in i + 1..n {
            t.data_mut()[i * n + j] = f64::NEG_INFINITY;
        }
    }
    t
}

fn linear(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let y = tape.matmul(x, nodes.node(&format!("{prefix}.w")))?;
    tape.add_bias(y, nodes.node(&format!("{prefix}.b")))
}

fn layer_norm(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    tape.layer_norm(
        x,
        nodes.node(&format!("{prefix}.g")),
        nodes.node(&format!("{prefix}.b")),
    )
}

fn multi_head_attention(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    queries: NodeId,
    keys_values: NodeId,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<NodeId> {
    let dm = tape.value(queries).rows_cols().1;
    let dk = dm / heads;
    let q = linear(tape, nodes, &format!("{prefix}.q"), queries)?;
    let k = tape.matmul(keys_values, nodes.node(&format!("{prefix}.k.w")))?;
    let v = linear(tape, nodes, &format!("{prefix}.v"), keys_values)?;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add_const(scores, m)?;
        }
        let weights = tape.softmax(scores)?;
        contexts.push(tape.matmul(weights, vh)?);
    }
    let ctx = tape.concat_cols(contexts)?;
    linear(tape, nodes, &format!("{prefix}.o"), ctx)
}

fn feed_forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    x: NodeId,
    dropout_p: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<NodeId> {
    let h = linear(tape, nodes, &format!("{prefix}.w1"), x)?;
    let h = tape.tanh(h);
    let h = tape.dropout(h, dropout_p, rng, training)?;
    linear(tape, nodes, &format!("{prefix}.w2"), h)
}

fn lstm_layer(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let (frames, dm) = tape.value(x).rows_cols();
    let wx = nodes.node(&format!("{prefix}.wx"));
    let wh = nodes.node(&format!("{prefix}.wh"));
    let b = nodes.node(&format!("{prefix}.b"));
    let mut h_prev = tape.constant(Tensor::zeros(vec![1, dm]));
    let mut c_prev = tape.constant(Tensor::zeros(vec![1, dm]));
    let mut outputs = Vec::with_capacity(frames);
    for t in 0..frames {
        let xt = tape.gather(x, vec![t])?;
        let zx = tape.matmul(xt, wx)?;
        let zx = tape.add_bias(zx, b)?;
        let zh = tape.matmul(h_prev, wh)?;
        let z = tape.add(zx, zh)?;
        let i_gate = tape.slice_cols(z, 0, dm)?;
        let f_gate = tape.slice_cols(z, dm, dm)?;
        let g_gate = tape.slice_cols(z, 2 * dm, dm)?;
        let o_gate = tape.slice_cols(z, 3 * dm, dm)?;
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.sigmoid(f_gate);
        let g_gate = tape.tanh(g_gate);
        let o_gate = tape.sigmoid(o_gate);
        let fc = tape.mul(f_gate, c_prev)?;
        let ig = tape.mul(i_gate, g_gate)?;
        let c = tape.add(fc, ig)?;
        let ct = tape.tanh(c);
        let h = tape.mul(o_gate, ct)?;
        outputs.push(h);
        h_prev = h;
        c_prev = c;
    }
    tape.concat_rows(outputs)
}

/// Runs the encoder over a T x d feature matrix, producing H on the tape.
pub fn encode(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    features: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Encoding> {
    let (frames, dim) = features.rows_cols();
    if frames == 0 {
        return Err(Error::Contract("encode: empty input (T = 0)"));
    }
    if dim != cfg.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: features.shape().to_vec(),
            rhs: vec![frames, cfg.feature_dim],
        });
    }
    // Strided frame decimation happens on the raw features; they carry no
    // gradient, so this stays off the tape.
    let decimated = if cfg.subsample == 1 {
        features.clone()
    } else {
        let kept: Vec<usize> = (0..frames).step_by(cfg.subsample).collect();
        let mut t = Tensor::zeros(vec![kept.len(), dim]);
        for (i, &r) in kept.iter().enumerate() {
            t.data_mut()[i * dim..(i + 1) * dim]
                .copy_from_slice(&features.data()[r * dim..(r + 1) * dim]);
        }
        t
    };
    let out_frames = decimated.rows_cols().0;
    debug_assert_eq!(out_frames, cfg.subsampled_len(frames));

    let input = tape.leaf(decimated, false);
    let mut x = linear(tape, nodes, "enc.in", input)?;
    match cfg.encoder_kind {
        EncoderKind::SelfAttention => {
            x = tape.add_const(x, &sinusoid(out_frames, cfg.model_dim))?;
            x = tape.dropout(x, cfg.dropout_p, rng, training)?;
            for layer in 0..cfg.encoder_layers {
                let p = format!("enc.l{layer}");
                let normed = layer_norm(tape, nodes, &format!("{p}.ln1"), x)?;
                let attn = multi_head_attention(
                    tape,
                    nodes,
                    &format!("{p}.attn"),
                    normed,
                    normed,
                    cfg.attention_heads,
                    None,
                )?;
                x = tape.add(x, attn)?;
                let normed = layer_norm(tape, nodes, &format!("{p}.ln2"), x)?;
                let ffn = feed_forward(tape, nodes, &format!("{p}.ffn"), normed, 0.0, rng, false)?;
                x = tape.add(x, ffn)?;
            }
            x = layer_norm(tape, nodes, "enc.ln_out", x)?;
        }
        EncoderKind::Recurrent => {
            x = tape.dropout(x, cfg.dropout_p, rng, training)?;
            for layer in 0..cfg.encoder_layers {
                x = lstm_layer(tape, nodes, &format!("enc.l{layer}.lstm"), x)?;
            }
        }
    }
    Ok(Encoding {
        hidden: x,
        frames: out_frames,
    })
}

/// Per-frame log-posteriors over the vocabulary: log_softmax(H W + b).
pub fn ctc_head(
    tape: &mut Tape,
    nodes: &ParamNodes,
    enc: &Encoding,
) -> Result<NodeId> {
    let logits = linear(tape, nodes, "ctc", enc.hidden)?;
    tape.log_softmax(logits)
}

/// Teacher-forced decoder pass: returns the n x V log-posterior matrix for
/// `input_ids` (which must start with the sentinel and contain no blank).
#[allow(clippy::too_many_arguments)]
pub fn decoder_log_probs(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    enc: &Encoding,
    input_ids: &[usize],
    training: bool,
    rng: &mut Rng,
) -> Result<NodeId> {
    if input_ids.first() != Some(&SENTINEL_ID) {
        return Err(Error::Contract("decoder prefix must begin with the sentinel"));
    }
    if input_ids.contains(&BLANK_ID) {
        return Err(Error::Contract("decoder prefix must not contain the blank id"));
    }
    if let Some(&bad) = input_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::InvalidParameter(format!(
            "decoder token id {bad} >= vocab {}",
            cfg.vocab_size
        )));
    }
    let n = input_ids.len();
    let emb = tape.gather(nodes.node("dec.embed"), input_ids.to_vec())?;
    let emb = tape.scale(emb, libm::sqrt(cfg.model_dim as f64));
    let mut x = tape.add_const(emb, &sinusoid(n, cfg.model_dim))?;
    let mask = causal_mask(n);
    // The decoder carries no dropout: the twin passes are differentiated on
    // the acoustic side only, so their token posteriors disagree exactly as
    // much as the encoder states do. Decoder-side noise would make the
    // always-present sentinel the one reliably-agreeing prediction and bias
    // the consistency loss toward early termination.
    let _ = training;
    for layer in 0..cfg.decoder_layers {
        let p = format!("dec.l{layer}");
        let normed = layer_norm(tape, nodes, &format!("{p}.ln1"), x)?;
        let self_attn = multi_head_attention(
            tape,
            nodes,
            &format!("{p}.self"),
            normed,
            normed,
            cfg.attention_heads,
            Some(&mask),
        )?;
        x = tape.add(x, self_attn)?;
        let normed = layer_norm(tape, nodes, &format!("{p}.ln2"), x)?;
        let cross = multi_head_attention(
            tape,
            nodes,
            &format!("{p}.cross"),
            normed,
            enc.hidden,
            cfg.attention_heads,
            None,
        )?;
        x = tape.add(x, cross)?;
        let normed = layer_norm(tape, nodes, &format!("{p}.ln3"), x)?;
        let ffn = feed_forward(tape, nodes, &format!("{p}.ffn"), normed, 0.0, rng, false)?;
        x = tape.add(x, ffn)?;
    }
    x = layer_norm(tape, nodes, "dec.ln_out", x)?;
    let logits = linear(tape, nodes, "dec.out", x)?;
    tape.log_softmax(logits)
}

/// Mean negative log-probability of the gold tokens: CrossEntropy(P_attn, Y).
pub fn attention_loss(
    tape: &mut Tape,
    token_log_probs: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    let (rows, _) = tape.value(token_log_probs).rows_cols();
    if rows != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "attention_loss",
            lhs: vec![rows],
            rhs: vec![targets.len()],
        });
    }
    let picked = tape.pick_per_row(token_log_probs, targets.to_vec())?;
    let neg = tape.scale(picked, -1.0);
    Ok(tape.mean(neg))
}

/// Inference-side view of one utterance: parameters bound once to a private
/// tape, encoder run with dropout off, decoder passes appended on demand.
pub struct InferenceContext<'a> {
    tape: Tape,
    nodes: ParamNodes,
    cfg: &'a ModelConfig,
    enc: Encoding,
    rng: Rng,
}

impl<'a> InferenceContext<'a> {
    pub fn new(params: &Params, cfg: &'a ModelConfig, features: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        // Inference never differentiates; bind as constants.
        let nodes = params.bind_constant(&mut tape);
        let mut rng = Rng::new(0);
        let enc = encode(&mut tape, &nodes, cfg, features, false, &mut rng)?;
        Ok(InferenceContext {
            tape,
            nodes,
            cfg,
            enc,
            rng,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.enc.frames
    }

    /// CTC head output as an owned T' x V matrix.
    pub fn frame_log_probs(&mut self) -> Result<Tensor> {
        let node = ctc_head(&mut self.tape, &self.nodes, &self.enc)?;
        Ok(self.tape.value(node).clone())
    }

    /// Log-distribution over the next token given a prefix that starts with
    /// the sentinel.
    pub fn next_token_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let node = decoder_log_probs(
            &mut self.tape,
            &self.nodes,
            self.cfg,
            &self.enc,
            prefix,
            false,
            &mut self.rng,
        )?;
        let t = self.tape.value(node);
        let (rows, cols) = t.rows_cols();
        Ok(t.data()[(rows - 1) * cols..rows * cols].to_vec())
    }

    /// Attention score of a candidate: sum of log-probs of its tokens plus
    /// the terminating sentinel under teacher forcing.
    pub fn score_candidate(&mut self, tokens: &[usize]) -> Result<f64> {
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(SENTINEL_ID);
        input.extend_from_slice(tokens);
        let node = decoder_log_probs(
            &mut self.tape,
            &self.nodes,
            self.cfg,
            &self.enc,
            &input,
            false,
            &mut self.rng,
        )?;
        let t = self.tape.value(node);
        let (_, cols) = t.rows_cols();
        let mut score = 0.0;
        for (pos, &tok) in tokens.iter().chain(core::iter::once(&SENTINEL_ID)).enumerate() {
            score += t.data()[pos * cols + tok];
        }
        Ok(score)
    }
}

/// Outcome of length-bounded attention beam search.
#[derive(Debug, Clone)]
pub struct AttentionDecode {
    pub hyp: Hypothesis,
    /// False when max_len ran out before any beam emitted the sentinel.
    pub terminated: bool,
}

/// Beam search over next-token distributions, scored by summed
/// log-probabilities, returning the best sentinel-terminated hypothesis.
///
/// Terminated hypotheses compete for beam slots with live ones, so beam = 1
/// reduces to stepwise greedy argmax, while a beam wide enough to hold every
/// candidate is exhaustive.
pub fn attention_decode(
    ctx: &mut InferenceContext<'_>,
    beam: usize,
    max_len: usize,
) -> Result<AttentionDecode> {
    if beam == 0 {
        return Err(Error::Contract("attention_decode: beam must be >= 1"));
    }
    struct Candidate {
        hyp: Hypothesis,
        finished: bool,
    }
    let vocab = ctx.cfg.vocab_size;
    let mut beam_set = vec![Candidate {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_score: 0.0,
        },
        finished: false,
    }];
    for _ in 0..max_len {
        if beam_set.iter().all(|c| c.finished) {
            break;
        }
        let mut next: Vec<Candidate> = Vec::new();
        for cand in &beam_set {
            if cand.finished {
                next.push(Candidate {
                    hyp: cand.hyp.clone(),
                    finished: true,
                });
                continue;
            }
            let mut prefix = Vec::with_capacity(cand.hyp.tokens.len() + 1);
            prefix.push(SENTINEL_ID);
            prefix.extend_from_slice(&cand.hyp.tokens);
            let dist = ctx.next_token_log_probs(&prefix)?;
            next.push(Candidate {
                hyp: Hypothesis {
                    tokens: cand.hyp.tokens.clone(),
                    log_score: cand.hyp.log_score + dist[SENTINEL_ID],
                },
                finished: true,
            });
            for v in 2..vocab {
                let mut tokens = cand.hyp.tokens.clone();
                tokens.push(v);
                next.push(Candidate {
                    hyp: Hypothesis {
                        tokens,
                        log_score: cand.hyp.log_score + dist[v],
                    },
                    finished: false,
                });
            }
        }
        next.sort_by(|a, b| {
            b.hyp
                .log_score
                .total_cmp(&a.hyp.log_score)
                .then_with(|| a.hyp.tokens.len().cmp(&b.hyp.tokens.len()))
                .then_with(|| a.hyp.tokens.cmp(&b.hyp.tokens))
        });
        next.truncate(beam);
        beam_set = next;
    }
    // Best finished candidate, else best unterminated with the flag unset.
    if let Some(best) = beam_set.iter().filter(|c| c.finished).map(|c| &c.hyp).next() {
        return Ok(AttentionDecode {
            hyp: best.clone(),
            terminated: true,
        });
    }
    Ok(AttentionDecode {
        hyp: beam_set[0].hyp.clone(),
        terminated: false,
    })
}

/// Applies the rescoring selection rule: highest attention score, ties by
/// original CTC score, then by shorter hypothesis, then lexicographic.
pub fn pick_best_rescored(mut scored: Vec<(Hypothesis, f64)>) -> Option<Hypothesis> {
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| b.0.log_score.total_cmp(&a.0.log_score))
            .then_with(|| a.0.tokens.len().cmp(&b.0.tokens.len()))
            .then_with(|| a.0.tokens.cmp(&b.0.tokens))
    });
    scored.into_iter().next().map(|(mut hyp, att)| {
        hyp.log_score = att;
        hyp
    })
}

/// Rescores CTC n-best candidates with the attention decoder and returns the
/// winner.
pub fn rescore(
    ctx: &mut InferenceContext<'_>,
    candidates: &[Hypothesis],
) -> Result<Hypothesis> {
    if candidates.is_empty() {
        return Err(Error::Contract("rescore: empty candidate list"));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let att = ctx.score_candidate(&cand.tokens)?;
        scored.push((cand.clone(), att));
    }
    Ok(pick_best_rescored(scored).expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn test_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 5,
            model_dim: 8,
            vocab_size: 5,
            encoder_kind: EncoderKind::SelfAttention,
            encoder_layers: 2,
            decoder_layers: 1,
            attention_heads: 2,
            dropout_p: 0.0,
            subsample: 1,
        }
    }

    fn random_features(frames: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(vec![frames, dim]);
        for v in t.data_mut() {
            *v = rng.normal();
        }
        t
    }

    fn run_encoder(cfg: &ModelConfig, features: &Tensor, training: bool, seed: u64) -> Tensor {
        let params = init_params(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let nodes = params.bind_constant(&mut tape);
        let mut rng = Rng::new(seed);
        let enc = encode(&mut tape, &nodes, cfg, features, training, &mut rng).unwrap();
        tape.value(enc.hidden).clone()
    }

    #[test]
    fn config_validation() {
        let mut cfg = test_config();
        assert!(cfg.validate().is_ok());
        cfg.vocab_size = 2;
        assert!(cfg.validate().is_err());
        cfg = test_config();
        cfg.model_dim = 9; // not divisible by 2 heads
        assert!(cfg.validate().is_err());
        cfg = test_config();
        cfg.subsample = 3;
        assert!(cfg.validate().is_err());
        cfg = test_config();
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_shape_contracts() {
        let cfg = test_config();
        let h = run_encoder(&cfg, &random_features(1, 5, 2), false, 0);
        assert_eq!(h.shape(), &[1, 8]);

        let cfg2 = ModelConfig {
            subsample: 2,
            ..test_config()
        };
        let h = run_encoder(&cfg2, &random_features(5, 5, 2), false, 0);
        assert_eq!(h.shape(), &[3, 8], "ceil(5/2) frames");
        assert_eq!(cfg2.subsampled_len(5), 3);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let cfg = test_config();
        let params = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let nodes = params.bind_constant(&mut tape);
        let mut rng = Rng::new(0);
        let empty = Tensor::zeros(vec![0, 5]);
        assert!(encode(&mut tape, &nodes, &cfg, &empty, false, &mut rng).is_err());
        let wrong_dim = Tensor::zeros(vec![3, 4]);
        assert!(encode(&mut tape, &nodes, &cfg, &wrong_dim, false, &mut rng).is_err());
    }

    #[test]
    fn encode_is_deterministic_under_training_with_same_seed() {
        for kind in [EncoderKind::SelfAttention, EncoderKind::Recurrent] {
            let cfg = ModelConfig {
                encoder_kind: kind,
                dropout_p: 0.25,
                ..test_config()
            };
            let features = random_features(6, 5, 3);
            let a = run_encoder(&cfg, &features, true, 9);
            let b = run_encoder(&cfg, &features, true, 9);
            assert_eq!(a.data(), b.data());
            let c = run_encoder(&cfg, &features, true, 10);
            assert_ne!(a.data(), c.data(), "different mask seed must differ");
            // Inference ignores the rng entirely.
            let d = run_encoder(&cfg, &features, false, 9);
            let e = run_encoder(&cfg, &features, false, 10);
            assert_eq!(d.data(), e.data());
        }
    }

    #[test]
    fn no_dropout_forward_ignores_rng_state() {
        let cfg = test_config(); // dropout_p = 0
        let features = random_features(4, 5, 4);
        let a = run_encoder(&cfg, &features, true, 1);
        let b = run_encoder(&cfg, &features, true, 2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ctc_head_zero_weights_give_uniform_rows() {
        let cfg = test_config();
        let mut params = init_params(&cfg, 1).unwrap();
        params.insert("ctc.w", Tensor::zeros(vec![8, 5]));
        params.insert("ctc.b", Tensor::zeros(vec![5]));
        let mut tape = Tape::new();
        let nodes = params.bind_constant(&mut tape);
        let mut rng = Rng::new(0);
        let enc = encode(&mut tape, &nodes, &cfg, &random_features(3, 5, 5), false, &mut rng)
            .unwrap();
        let head = ctc_head(&mut tape, &nodes, &enc).unwrap();
        let expected = -libm::log(5.0);
        for v in tape.value(head).data() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_rows_are_normalized_for_random_params() {
        let cfg = test_config();
        let params = init_params(&cfg, 77).unwrap();
        let mut tape = Tape::new();
        let nodes = params.bind_constant(&mut tape);
        let mut rng = Rng::new(0);
        let enc = encode(&mut tape, &nodes, &cfg, &random_features(4, 5, 6), false, &mut rng)
            .unwrap();
        let head = ctc_head(&mut tape, &nodes, &enc).unwrap();
        let dec = decoder_log_probs(
            &mut tape,
            &nodes,
            &cfg,
            &enc,
            &[SENTINEL_ID, 2, 3],
            false,
            &mut rng,
        )
        .unwrap();
        for node in [head, dec] {
            let t = tape.value(node);
            let (rows, cols) = t.rows_cols();
            for r in 0..rows {
                let s: f64 = t.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|&v| libm::exp(v))
                    .sum();
                assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn decoder_rejects_bad_prefixes() {
        let cfg = test_config();
        let params = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let nodes = params.bind_constant(&mut tape);
        let mut rng = Rng::new(0);
        let enc = encode(&mut tape, &nodes, &cfg, &random_features(3, 5, 7), false, &mut rng)
            .unwrap();
        // Must start with the sentinel.
        assert!(decoder_log_probs(&mut tape, &nodes, &cfg, &enc, &[2, 3], false, &mut rng)
            .is_err());
        // Blank is never a decoder token.
        assert!(decoder_log_probs(
            &mut tape,
            &nodes,
            &cfg,
            &enc,
            &[SENTINEL_ID, BLANK_ID],
            false,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn decode_step_is_causal_and_matches_full_pass() {
        let cfg = test_config();
        let params = init_params(&cfg, 13).unwrap();
        let features = random_features(5, 5, 8);
        let mut ctx = InferenceContext::new(&params, &cfg, &features).unwrap();

        // Two different continuations of the same prefix see the same
        // next-token distribution at the shared position.
        let d1 = ctx.next_token_log_probs(&[SENTINEL_ID, 2]).unwrap();
        let d2 = ctx.next_token_log_probs(&[SENTINEL_ID, 2]).unwrap();
        assert_eq!(d1, d2);

        // Teacher-forced full pass equals step-by-step decoding row by row.
        let ids = [SENTINEL_ID, 2, 3, 4, 2];
        let mut tape = Tape::new();
        let nodes = params.bind_constant(&mut tape);
        let mut rng = Rng::new(0);
        let enc = encode(&mut tape, &nodes, &cfg, &features, false, &mut rng).unwrap();
        let full = decoder_log_probs(&mut tape, &nodes, &cfg, &enc, &ids, false, &mut rng)
            .unwrap();
        let full_t = tape.value(full);
        let (_, cols) = full_t.rows_cols();
        for n in 1..=ids.len() {
            let step = ctx.next_token_log_probs(&ids[..n]).unwrap();
            let row = &full_t.data()[(n - 1) * cols..n * cols];
            for (a, b) in step.iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "row {n} mismatch");
            }
        }
    }

    #[test]
    fn attention_loss_cases() {
        // One-hot on gold gives zero loss.
        let mut tape = Tape::new();
        // log probs: row puts probability ~1 on the gold column.
        let mut lp = Tensor::full(vec![2, 4], -40.0);
        lp.data_mut()[0 * 4 + 1] = 0.0;
        lp.data_mut()[1 * 4 + 3] = 0.0;
        let node = tape.leaf(lp, false);
        let loss = attention_loss(&mut tape, node, &[1, 3]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        // Uniform posteriors with four classes cost ln 4 per position.
        let mut tape = Tape::new();
        let lp = Tensor::full(vec![3, 4], -libm::log(4.0));
        let node = tape.leaf(lp, false);
        let loss = attention_loss(&mut tape, node, &[0, 1, 2]).unwrap();
        assert!((tape.value(loss).item() - libm::log(4.0)).abs() < 1e-12);

        // Length mismatch is a dimension error.
        let mut tape = Tape::new();
        let lp = Tensor::full(vec![3, 4], -libm::log(4.0));
        let node = tape.leaf(lp, false);
        assert!(attention_loss(&mut tape, node, &[0, 1]).is_err());
    }

    #[test]
    fn attention_beam_matches_exhaustive_argmax() {
        let cfg = ModelConfig {
            vocab_size: 3, // blank, sentinel, one real token
            ..test_config()
        };
        let params = init_params(&cfg, 21).unwrap();
        let features = random_features(4, 5, 9);
        let max_len = 2;

        // Oracle: enumerate all token sequences of length <= max_len and
        // score them with the same teacher-forced scorer.
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut ctx = InferenceContext::new(&params, &cfg, &features).unwrap();
        let mut sequences: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=max_len {
            let mut more = Vec::new();
            for seq in sequences.iter().filter(|s| s.len() == len - 1) {
                for v in 2..cfg.vocab_size {
                    let mut s = seq.clone();
                    s.push(v);
                    more.push(s);
                }
            }
            sequences.extend(more);
        }
        for seq in &sequences {
            let score = ctx.score_candidate(seq).unwrap();
            let better = match &best {
                None => true,
                Some((bs, bscore)) => {
                    score > *bscore
                        || (score == *bscore
                            && (seq.len() < bs.len() || (seq.len() == bs.len() && seq < bs)))
                }
            };
            if better {
                best = Some((seq.clone(), score));
            }
        }
        let (best_seq, best_score) = best.unwrap();

        let mut ctx2 = InferenceContext::new(&params, &cfg, &features).unwrap();
        let out = attention_decode(&mut ctx2, 64, max_len).unwrap();
        assert!(out.terminated);
        assert_eq!(out.hyp.tokens, best_seq);
        assert!((out.hyp.log_score - best_score).abs() < 1e-9);
    }

    #[test]
    fn beam_one_equals_stepwise_greedy() {
        let cfg = test_config();
        let params = init_params(&cfg, 31).unwrap();
        let features = random_features(6, 5, 10);
        let mut ctx = InferenceContext::new(&params, &cfg, &features).unwrap();
        let max_len = cfg.max_decode_len(ctx.frame_count());

        // Stepwise greedy trace over {sentinel} + real tokens.
        let mut tokens: Vec<usize> = Vec::new();
        let mut score = 0.0;
        for _ in 0..max_len {
            let mut prefix = vec![SENTINEL_ID];
            prefix.extend_from_slice(&tokens);
            let dist = ctx.next_token_log_probs(&prefix).unwrap();
            let mut best_v = SENTINEL_ID;
            for v in 2..cfg.vocab_size {
                if dist[v] > dist[best_v] {
                    best_v = v;
                }
            }
            score += dist[best_v];
            if best_v == SENTINEL_ID {
                break;
            }
            tokens.push(best_v);
        }

        let mut ctx2 = InferenceContext::new(&params, &cfg, &features).unwrap();
        let out = attention_decode(&mut ctx2, 1, max_len).unwrap();
        assert_eq!(out.hyp.tokens, tokens);
        assert!((out.hyp.log_score - score).abs() < 1e-9);
    }

    #[test]
    fn rescore_selection_rules() {
        let hyp = |tokens: Vec<usize>, ctc: f64| Hypothesis {
            tokens,
            log_score: ctc,
        };
        // Per-token products 0.81 vs 0.495: the first wins.
        let winner = pick_best_rescored(vec![
            (hyp(vec![2, 3], -1.0), libm::log(0.9 * 0.9)),
            (hyp(vec![2, 4], -0.5), libm::log(0.99 * 0.5)),
        ])
        .unwrap();
        assert_eq!(winner.tokens, vec![2, 3]);
        assert!((winner.log_score - libm::log(0.81)).abs() < 1e-12);

        // Attention tie: higher original CTC score wins.
        let winner = pick_best_rescored(vec![
            (hyp(vec![2, 3], -2.0), -1.0),
            (hyp(vec![2, 4], -0.5), -1.0),
        ])
        .unwrap();
        assert_eq!(winner.tokens, vec![2, 4]);

        // Attention and CTC tie: shorter hypothesis wins.
        let winner = pick_best_rescored(vec![
            (hyp(vec![2, 3], -1.0), -1.0),
            (hyp(vec![2], -1.0), -1.0),
        ])
        .unwrap();
        assert_eq!(winner.tokens, vec![2]);
    }

    #[test]
    fn rescore_contract() {
        let cfg = test_config();
        let params = init_params(&cfg, 41).unwrap();
        let features = random_features(5, 5, 11);
        let mut ctx = InferenceContext::new(&params, &cfg, &features).unwrap();
        assert!(rescore(&mut ctx, &[]).is_err());

        // Singleton candidate is returned regardless of score.
        let sole = Hypothesis {
            tokens: vec![4, 4, 2],
            log_score: -9.0,
        };
        let out = rescore(&mut ctx, core::slice::from_ref(&sole)).unwrap();
        assert_eq!(out.tokens, sole.tokens);

        // The winner always carries the maximal attention score.
        let candidates = vec![
            Hypothesis { tokens: vec![2], log_score: -1.0 },
            Hypothesis { tokens: vec![3, 2], log_score: -1.5 },
            Hypothesis { tokens: vec![4], log_score: -2.0 },
            Hypothesis { tokens: vec![], log_score: -2.5 },
        ];
        let winner = rescore(&mut ctx, &candidates).unwrap();
        for cand in &candidates {
            let s = ctx.score_candidate(&cand.tokens).unwrap();
            assert!(winner.log_score >= s - 1e-12);
        }
    }

    #[test]
    fn recurrent_encoder_trains_and_decodes() {
        let cfg = ModelConfig {
            encoder_kind: EncoderKind::Recurrent,
            ..test_config()
        };
        let params = init_params(&cfg, 51).unwrap();
        let features = random_features(5, 5, 12);
        let mut ctx = InferenceContext::new(&params, &cfg, &features).unwrap();
        let lp = ctx.frame_log_probs().unwrap();
        assert_eq!(lp.shape(), &[5, 5]);
        let out = attention_decode(&mut ctx, 2, 8).unwrap();
        assert!(out.hyp.tokens.iter().all(|&t| t >= 2));
    }
}
