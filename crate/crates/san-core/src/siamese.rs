//! The siamese training mechanism: two dropout-differentiated forward passes
//! through one shared parameter set, a KL loss pulling their output
//! distributions together, and the weighted total objective.

use alloc::vec;
use alloc::vec::Vec;

use crate::ctc::{self, CtcOutcome};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, SENTINEL_ID};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::{GradMap, ParamNodes, Params};
use crate::rng::Rng;
use crate::synth::FeatureSequence;
use crate::tape::{KlDirection, NodeId, Tape};

/// Rng stream tags; children of the master seed.
pub const TAG_MASKS: u64 = 0x6d61_736b; // dropout masks per step
pub const TAG_SHUFFLE: u64 = 0x7368_7566; // batch shuffling per epoch

/// Training-time knobs of the siamese objective and optimizer.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub kl_direction: KlDirection,
    pub kl_on_ctc: bool,
    pub kl_on_attn: bool,
    pub kl_stop_grad_pass2: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub average_last_n: usize,
    pub master_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            adam: AdamConfig::default(),
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 2.0,
            kl_direction: KlDirection::Symmetric,
            kl_on_ctc: true,
            kl_on_attn: true,
            kl_stop_grad_pass2: false,
            batch_size: 16,
            epochs: 15,
            average_last_n: 5,
            master_seed: 42,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::InvalidParameter("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sub-network forward pass, as tape nodes.
pub struct SiamesePass {
    pub frame_log_probs: NodeId,
    pub token_log_probs: NodeId,
    pub ctc_loss: NodeId,
    pub attn_loss: NodeId,
}

/// Two passes over identical input and identical parameters, differing only
/// in their dropout mask seeds.
pub struct SiamesePair {
    pub pass1: SiamesePass,
    pub pass2: SiamesePass,
    pub mask_seed1: u64,
    pub mask_seed2: u64,
    pub enc_frames: usize,
    pub token_positions: usize,
}

/// The three scalar losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_attn: f64,
    pub l_kl: f64,
    pub l_all: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// Builds one encoder -> CTC head -> teacher-forced decoder pass.
fn single_pass(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    utt: &FeatureSequence,
    training: bool,
    rng: &mut Rng,
) -> Result<Option<SiamesePass>> {
    let enc = model::encode(tape, nodes, cfg, &utt.features, training, rng)?;
    let frame_log_probs = model::ctc_head(tape, nodes, &enc)?;
    let ctc_outcome = ctc::ctc_loss(tape.value(frame_log_probs), &utt.tokens)?;
    let CtcOutcome::Feasible(ctc_result) = ctc_outcome else {
        return Ok(None);
    };
    let ctc_loss = tape.fused_loss(frame_log_probs, ctc_result.loss, ctc_result.grad)?;

    let mut decoder_input = Vec::with_capacity(utt.tokens.len() + 1);
    decoder_input.push(SENTINEL_ID);
    decoder_input.extend_from_slice(&utt.tokens);
    let token_log_probs =
        model::decoder_log_probs(tape, nodes, cfg, &enc, &decoder_input, training, rng)?;
    let mut gold = utt.tokens.clone();
    gold.push(SENTINEL_ID);
    let attn_loss = model::attention_loss(tape, token_log_probs, &gold)?;
    Ok(Some(SiamesePass {
        frame_log_probs,
        token_log_probs,
        ctc_loss,
        attn_loss,
    }))
}

/// Outcome of [`dual_forward`]: an utterance whose target admits no CTC
/// alignment is skipped rather than crashing the batch.
pub enum ForwardOutcome {
    Pair(SiamesePair),
    CtcInfeasible,
}

/// Runs the network twice with identical parameters and two distinct dropout
/// seeds drawn from `step_rng`. With dropout disabled the two passes are
/// bitwise identical.
pub fn dual_forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    utt: &FeatureSequence,
    step_rng: &mut Rng,
) -> Result<ForwardOutcome> {
    let mask_seed1 = step_rng.next_u64();
    let mut mask_seed2 = step_rng.next_u64();
    while mask_seed2 == mask_seed1 {
        mask_seed2 = step_rng.next_u64();
    }
    let mut rng1 = Rng::new(mask_seed1);
    let Some(pass1) = single_pass(tape, nodes, cfg, utt, true, &mut rng1)? else {
        return Ok(ForwardOutcome::CtcInfeasible);
    };
    let mut rng2 = Rng::new(mask_seed2);
    let Some(pass2) = single_pass(tape, nodes, cfg, utt, true, &mut rng2)? else {
        return Ok(ForwardOutcome::CtcInfeasible);
    };
    let enc_frames = tape.value(pass1.frame_log_probs).rows_cols().0;
    let token_positions = tape.value(pass1.token_log_probs).rows_cols().0;
    Ok(ForwardOutcome::Pair(SiamesePair {
        pass1,
        pass2,
        mask_seed1,
        mask_seed2,
        enc_frames,
        token_positions,
    }))
}

/// KL unification loss between the two passes, applied to the CTC frame
/// posteriors and/or the attention token posteriors and summed.
pub fn kl_loss(
    tape: &mut Tape,
    pair: &SiamesePair,
    settings: &TrainSettings,
    frame_mask: &[bool],
    token_mask: &[bool],
) -> Result<NodeId> {
    let mut terms: Vec<NodeId> = Vec::new();
    if settings.kl_on_ctc {
        terms.push(tape.kl_loss(
            pair.pass1.frame_log_probs,
            pair.pass2.frame_log_probs,
            settings.kl_direction,
            settings.kl_stop_grad_pass2,
            frame_mask,
        )?);
    }
    if settings.kl_on_attn {
        terms.push(tape.kl_loss(
            pair.pass1.token_log_probs,
            pair.pass2.token_log_probs,
            settings.kl_direction,
            settings.kl_stop_grad_pass2,
            token_mask,
        )?);
    }
    match terms.len() {
        0 => Ok(tape.constant(crate::tensor::Tensor::scalar(0.0))),
        1 => Ok(terms[0]),
        _ => tape.add(terms[0], terms[1]),
    }
}

/// l_all = lambda1 * (L_CTC1 + L_CTC2) + lambda2 * (L_Attn1 + L_Attn2)
///       + lambda3 * L_KL. With lambda3 == 0 the KL node is left out of the
/// graph entirely, so the objective is exactly the joint baseline.
pub fn total_loss(
    tape: &mut Tape,
    pair: &SiamesePair,
    kl: NodeId,
    settings: &TrainSettings,
) -> Result<(NodeId, LossBreakdown)> {
    let l_ctc = tape.add(pair.pass1.ctc_loss, pair.pass2.ctc_loss)?;
    let l_attn = tape.add(pair.pass1.attn_loss, pair.pass2.attn_loss)?;
    let weighted_ctc = tape.scale(l_ctc, settings.lambda1);
    let weighted_attn = tape.scale(l_attn, settings.lambda2);
    let mut l_all = tape.add(weighted_ctc, weighted_attn)?;
    if settings.lambda3 != 0.0 {
        let weighted_kl = tape.scale(kl, settings.lambda3);
        l_all = tape.add(l_all, weighted_kl)?;
    }
    let breakdown = LossBreakdown {
        l_ctc: tape.value(l_ctc).item(),
        l_attn: tape.value(l_attn).item(),
        l_kl: tape.value(kl).item(),
        l_all: tape.value(l_all).item(),
        lambda1: settings.lambda1,
        lambda2: settings.lambda2,
        lambda3: settings.lambda3,
    };
    Ok((l_all, breakdown))
}

/// Gradient of the full siamese objective for one utterance, or None when
/// the CTC target is infeasible at the encoder frame rate.
pub fn utterance_grad(
    params: &Params,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    utt: &FeatureSequence,
    mask_seed: u64,
) -> Result<Option<(GradMap, LossBreakdown)>> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape);
    let mut step_rng = Rng::new(mask_seed);
    let pair = match dual_forward(&mut tape, &nodes, cfg, utt, &mut step_rng)? {
        ForwardOutcome::Pair(p) => p,
        ForwardOutcome::CtcInfeasible => return Ok(None),
    };
    let frame_mask = vec![true; pair.enc_frames];
    let token_mask = vec![true; pair.token_positions];
    let kl = kl_loss(&mut tape, &pair, settings, &frame_mask, &token_mask)?;
    let (l_all, breakdown) = total_loss(&mut tape, &pair, kl, settings)?;
    let mut grads = tape.backward(l_all)?;
    let grad_map = nodes.extract_grads(&tape, &mut grads);
    Ok(Some((grad_map, breakdown)))
}

/// Value of the full siamese objective for one utterance without building
/// gradients; the probe function for finite-difference checking. None when
/// the CTC target is infeasible.
pub fn utterance_loss(
    params: &Params,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    utt: &FeatureSequence,
    mask_seed: u64,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let nodes = params.bind_constant(&mut tape);
    let mut step_rng = Rng::new(mask_seed);
    let pair = match dual_forward(&mut tape, &nodes, cfg, utt, &mut step_rng)? {
        ForwardOutcome::Pair(p) => p,
        ForwardOutcome::CtcInfeasible => return Ok(None),
    };
    let frame_mask = vec![true; pair.enc_frames];
    let token_mask = vec![true; pair.token_positions];
    let kl = kl_loss(&mut tape, &pair, settings, &frame_mask, &token_mask)?;
    let (_, breakdown) = total_loss(&mut tape, &pair, kl, settings)?;
    Ok(Some(breakdown.l_all))
}

/// What a training step did.
#[derive(Debug, Clone, PartialEq)]
pub enum StepStatus {
    Applied,
    /// Every utterance in the batch was CTC-infeasible; parameters unchanged.
    SkippedEmptyBatch,
    /// A non-finite gradient appeared; parameters unchanged.
    RejectedNonFinite,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub status: StepStatus,
    pub losses: Option<LossBreakdown>,
    pub skipped_infeasible: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Derives the per-utterance dropout-mask seed for a (step, slot) position.
/// Stateless in the training history, so an interrupted run resumes bitwise.
pub fn mask_seed_for(master_seed: u64, step: u64, slot: u64) -> u64 {
    let mut rng = Rng::fork(master_seed, TAG_MASKS, step.wrapping_mul(1 << 20).wrapping_add(slot));
    rng.next_u64()
}

/// Accumulates per-utterance gradient maps in slot order into a batch mean.
pub fn reduce_batch_grads(per_utt: &[GradMap], params: &Params) -> GradMap {
    let mut total = GradMap::new();
    for (name, t) in params.iter() {
        total.insert(name.clone(), crate::tensor::Tensor::zeros(t.shape().to_vec()));
    }
    for gm in per_utt {
        for (name, g) in gm {
            let acc = total.get_mut(name).expect("known parameter");
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    let n = per_utt.len().max(1) as f64;
    for g in total.values_mut() {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    total
}

fn mean_losses(per_utt: &[LossBreakdown]) -> Option<LossBreakdown> {
    let first = per_utt.first()?;
    let n = per_utt.len() as f64;
    let mut out = LossBreakdown {
        l_ctc: 0.0,
        l_attn: 0.0,
        l_kl: 0.0,
        l_all: 0.0,
        lambda1: first.lambda1,
        lambda2: first.lambda2,
        lambda3: first.lambda3,
    };
    for b in per_utt {
        out.l_ctc += b.l_ctc;
        out.l_attn += b.l_attn;
        out.l_kl += b.l_kl;
        out.l_all += b.l_all;
    }
    out.l_ctc /= n;
    out.l_attn /= n;
    out.l_kl /= n;
    out.l_all /= n;
    Some(out)
}

/// One optimizer step over a batch: per-utterance gradients reduced in slot
/// order to a batch mean, clipped, then applied with Adam. `step` is the
/// 1-based global step index.
pub fn train_step(
    params: &mut Params,
    state: &mut AdamState,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    batch: &[FeatureSequence],
    step: u64,
) -> Result<StepOutcome> {
    settings.validate()?;
    let mut grads: Vec<GradMap> = Vec::with_capacity(batch.len());
    let mut losses: Vec<LossBreakdown> = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for (slot, utt) in batch.iter().enumerate() {
        let seed = mask_seed_for(settings.master_seed, step, slot as u64);
        match utterance_grad(params, cfg, settings, utt, seed)? {
            Some((gm, lb)) => {
                grads.push(gm);
                losses.push(lb);
            }
            None => skipped += 1,
        }
    }
    apply_reduced(params, state, settings, &grads, &losses, skipped)
}

/// Applies pre-computed per-utterance gradients (already in slot order).
/// Split out so a multi-threaded driver can compute `grads` in parallel and
/// still reduce deterministically.
pub fn apply_reduced(
    params: &mut Params,
    state: &mut AdamState,
    settings: &TrainSettings,
    grads: &[GradMap],
    losses: &[LossBreakdown],
    skipped_infeasible: usize,
) -> Result<StepOutcome> {
    if grads.is_empty() {
        return Ok(StepOutcome {
            status: StepStatus::SkippedEmptyBatch,
            losses: None,
            skipped_infeasible,
            lr: 0.0,
            grad_norm: 0.0,
        });
    }
    let mut mean = reduce_batch_grads(grads, params);
    let finite = mean.values().all(|g| g.is_finite());
    if !finite {
        return Ok(StepOutcome {
            status: StepStatus::RejectedNonFinite,
            losses: mean_losses(losses),
            skipped_infeasible,
            lr: 0.0,
            grad_norm: f64::NAN,
        });
    }
    let grad_norm = clip_global_norm(&mut mean, settings.adam.grad_clip);
    let lr = adam_step(params, state, &mean, &settings.adam)?;
    Ok(StepOutcome {
        status: StepStatus::Applied,
        losses: mean_losses(losses),
        skipped_infeasible,
        lr,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderKind;
    use crate::tensor::Tensor;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            model_dim: 16,
            vocab_size: 6,
            encoder_kind: EncoderKind::SelfAttention,
            encoder_layers: 2,
            decoder_layers: 1,
            attention_heads: 2,
            dropout_p: 0.0,
            subsample: 1,
        }
    }

    pub(crate) fn tiny_utterance(seed: u64) -> FeatureSequence {
        let mut rng = Rng::new(seed);
        let mut features = Tensor::zeros(vec![7, 8]);
        for v in features.data_mut() {
            *v = rng.normal();
        }
        FeatureSequence {
            features,
            tokens: vec![2, 3, 4],
            utterance_id: alloc::string::String::from("tiny-0"),
        }
    }

    fn forward_pair(
        cfg: &ModelConfig,
        settings: &TrainSettings,
        seed: u64,
    ) -> (Tape, SiamesePair, LossBreakdown) {
        let params = model::init_params(cfg, 5).unwrap();
        let utt = tiny_utterance(3);
        let mut tape = Tape::new();
        let nodes = params.bind(&mut tape);
        let mut rng = Rng::new(seed);
        let ForwardOutcome::Pair(pair) = dual_forward(&mut tape, &nodes, cfg, &utt, &mut rng).unwrap()
        else {
            panic!("feasible expected")
        };
        let fm = vec![true; pair.enc_frames];
        let tm = vec![true; pair.token_positions];
        let kl = kl_loss(&mut tape, &pair, settings, &fm, &tm).unwrap();
        let (_, breakdown) = total_loss(&mut tape, &pair, kl, settings).unwrap();
        (tape, pair, breakdown)
    }

    #[test]
    fn no_dropout_passes_are_bitwise_identical() {
        let cfg = tiny_config();
        let settings = TrainSettings::default();
        let (tape, pair, breakdown) = forward_pair(&cfg, &settings, 11);
        assert_eq!(
            tape.value(pair.pass1.frame_log_probs).data(),
            tape.value(pair.pass2.frame_log_probs).data()
        );
        assert_eq!(
            tape.value(pair.pass1.token_log_probs).data(),
            tape.value(pair.pass2.token_log_probs).data()
        );
        assert_eq!(breakdown.l_kl, 0.0);
    }

    #[test]
    fn dropout_differentiates_passes_and_kl_is_positive() {
        let cfg = ModelConfig {
            dropout_p: 0.1,
            ..tiny_config()
        };
        let settings = TrainSettings::default();
        let mut positive = 0;
        for seed in 0..20 {
            let (_, _, breakdown) = forward_pair(&cfg, &settings, seed);
            assert!(breakdown.l_kl >= -1e-9);
            if breakdown.l_kl > 0.0 {
                positive += 1;
            }
        }
        assert_eq!(positive, 20);
    }

    #[test]
    fn dual_forward_is_deterministic() {
        let cfg = ModelConfig {
            dropout_p: 0.2,
            ..tiny_config()
        };
        let settings = TrainSettings::default();
        let (_, _, a) = forward_pair(&cfg, &settings, 7);
        let (_, _, b) = forward_pair(&cfg, &settings, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn total_loss_arithmetic() {
        // lambda (.5, .5, 2) with l_ctc 2, l_attn 4, kl 0.1 gives 3.2.
        let l_all: f64 = 0.5 * 2.0 + 0.5 * 4.0 + 2.0 * 0.1;
        assert!((l_all - 3.2).abs() < 1e-15);
        // The defaults carry the same weights.
        let s = TrainSettings::default();
        assert_eq!((s.lambda1, s.lambda2, s.lambda3), (0.5, 0.5, 2.0));
    }

    #[test]
    fn kl_hand_value() {
        // Single position, p = (0.75, 0.25), q = (0.25, 0.75):
        // KL(p||q) = KL(q||p) = 0.5 ln 3, so the symmetric value is 0.5 ln 3.
        let mut tape = Tape::new();
        let lp = tape.leaf(
            Tensor::new(vec![1, 2], vec![libm::log(0.75), libm::log(0.25)]).unwrap(),
            true,
        );
        let lq = tape.leaf(
            Tensor::new(vec![1, 2], vec![libm::log(0.25), libm::log(0.75)]).unwrap(),
            true,
        );
        let kl = tape
            .kl_loss(lp, lq, KlDirection::Symmetric, false, &[true])
            .unwrap();
        let expected = 0.5 * libm::log(3.0);
        assert!((tape.value(kl).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_permutation_invariance() {
        let mut rng = Rng::new(3);
        let logits: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let lse = crate::tape::log_sum_exp(&logits);
        let lp: Vec<f64> = logits.iter().map(|x| x - lse).collect();
        let logits2: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let lse2 = crate::tape::log_sum_exp(&logits2);
        let lq: Vec<f64> = logits2.iter().map(|x| x - lse2).collect();

        let value = |p: Vec<f64>, q: Vec<f64>| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![1, 4], p).unwrap(), false);
            let b = tape.leaf(Tensor::new(vec![1, 4], q).unwrap(), false);
            let kl = tape
                .kl_loss(a, b, KlDirection::Symmetric, false, &[true])
                .unwrap();
            tape.value(kl).item()
        };
        let base = value(lp.clone(), lq.clone());
        let perm = [2usize, 0, 3, 1];
        let lp_p: Vec<f64> = perm.iter().map(|&i| lp[i]).collect();
        let lq_p: Vec<f64> = perm.iter().map(|&i| lq[i]).collect();
        assert!((value(lp_p, lq_p) - base).abs() < 1e-12);
    }

    #[test]
    fn kl_positive_iff_different() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let mk = |rng: &mut Rng| {
                let logits: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
                let lse = crate::tape::log_sum_exp(&logits);
                logits.iter().map(|x| x - lse).collect::<Vec<f64>>()
            };
            let lp = mk(&mut rng);
            let lq = mk(&mut rng);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![1, 5], lp.clone()).unwrap(), false);
            let b = tape.leaf(Tensor::new(vec![1, 5], lq.clone()).unwrap(), false);
            let kl = tape
                .kl_loss(a, b, KlDirection::Symmetric, false, &[true])
                .unwrap();
            assert!(tape.value(kl).item() > 0.0);
            let same = tape
                .kl_loss(a, a, KlDirection::Symmetric, false, &[true])
                .unwrap();
            assert!(tape.value(same).item().abs() < 1e-12);
        }
    }

    #[test]
    fn lambda3_is_irrelevant_without_dropout() {
        // With dropout off, SAN training must be bitwise identical to the
        // doubled-loss baseline step for step.
        let cfg = tiny_config();
        let baseline = TrainSettings {
            lambda3: 0.0,
            ..TrainSettings::default()
        };
        let san = TrainSettings::default();
        let utt = tiny_utterance(3);
        let batch = vec![utt];

        let mut params_a = model::init_params(&cfg, 5).unwrap();
        let mut state_a = AdamState::new(&params_a);
        let mut params_b = params_a.clone();
        let mut state_b = AdamState::new(&params_b);
        for step in 1..=10 {
            train_step(&mut params_a, &mut state_a, &cfg, &baseline, &batch, step).unwrap();
            train_step(&mut params_b, &mut state_b, &cfg, &san, &batch, step).unwrap();
        }
        for ((na, ta), (nb, tb)) in params_a.iter().zip(params_b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "parameter {na} diverged");
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let cfg = tiny_config();
        let settings = TrainSettings {
            adam: AdamConfig {
                warmup_steps: 10,
                ..AdamConfig::default()
            },
            ..TrainSettings::default()
        };
        let batch: Vec<FeatureSequence> = (0..4).map(|i| tiny_utterance(i)).collect();
        let mut params = model::init_params(&cfg, 5).unwrap();
        let mut state = AdamState::new(&params);
        let mut first = None;
        let mut last = None;
        for step in 1..=50 {
            let out = train_step(&mut params, &mut state, &cfg, &settings, &batch, step).unwrap();
            assert_eq!(out.status, StepStatus::Applied);
            let l = out.losses.unwrap().l_all;
            if first.is_none() {
                first = Some(l);
            }
            last = Some(l);
        }
        assert!(
            last.unwrap() < first.unwrap(),
            "loss did not decrease: {first:?} -> {last:?}"
        );
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = ModelConfig {
            dropout_p: 0.1,
            ..tiny_config()
        };
        let settings = TrainSettings::default();
        let batch: Vec<FeatureSequence> = (0..2).map(|i| tiny_utterance(i)).collect();
        let run = || {
            let mut params = model::init_params(&cfg, 5).unwrap();
            let mut state = AdamState::new(&params);
            for step in 1..=10 {
                train_step(&mut params, &mut state, &cfg, &settings, &batch, step).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        for ((na, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data(), "parameter {na}");
        }
    }

    #[test]
    fn infeasible_utterances_are_skipped() {
        let cfg = tiny_config();
        let settings = TrainSettings::default();
        // Token string longer than the frame count cannot align.
        let mut utt = tiny_utterance(0);
        utt.tokens = vec![2, 2, 2, 2, 2, 2, 2, 2];
        let mut params = model::init_params(&cfg, 5).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let out = train_step(&mut params, &mut state, &cfg, &settings, &[utt], 1).unwrap();
        assert_eq!(out.status, StepStatus::SkippedEmptyBatch);
        assert_eq!(out.skipped_infeasible, 1);
        assert_eq!(params, before);
    }
}
