//! Exact CTC loss via forward-backward in the log semiring, the collapse
//! rule, and greedy / prefix-beam decoding.
//!
//! Only id 0 (blank) is special at this level. Any non-blank id may appear
//! in targets and decodes; reserving id 1 for the attention sentinel is a
//! model-layer convention that this module does not know about.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Hypothesis;
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Loss and its analytic gradient with respect to the input log-probs.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Tensor,
}

/// CTC outcome: a target with no valid alignment has probability zero, which
/// is reported as a value rather than an infinite loss.
#[derive(Debug, Clone)]
pub enum CtcOutcome {
    Feasible(CtcLoss),
    Infeasible,
}

fn validate_target(target: &[usize], vocab: usize) -> Result<()> {
    for &id in target {
        if id == BLANK || id >= vocab {
            return Err(Error::InvalidParameter(alloc::format!(
                "ctc target id {id} outside 1..{vocab}"
            )));
        }
    }
    Ok(())
}

/// Shortest alignment that can emit `target`: one frame per token plus one
/// separating blank per adjacent repeat.
fn min_alignment_len(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Negative log-likelihood of `target` under per-frame log-probs, summed over
/// all alignments that collapse to it. `log_probs` is T x V with normalized
/// rows; gradients are with respect to the log-prob entries.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<CtcOutcome> {
    let (frames, vocab) = log_probs.rows_cols();
    if frames == 0 || vocab < 2 {
        return Err(Error::Contract("ctc_loss: need T >= 1 and V >= 2"));
    }
    validate_target(target, vocab)?;
    if min_alignment_len(target) > frames {
        return Ok(CtcOutcome::Infeasible);
    }

    // Augmented target: blank, y1, blank, y2, ..., blank.
    let aug: Vec<usize> = {
        let mut a = Vec::with_capacity(2 * target.len() + 1);
        a.push(BLANK);
        for &y in target {
            a.push(y);
            a.push(BLANK);
        }
        a
    };
    let s_len = aug.len();
    let lp = |t: usize, v: usize| log_probs.data()[t * vocab + v];
    let ninf = f64::NEG_INFINITY;

    // A skip transition s-2 -> s is legal when it does not erase a label.
    let can_skip = |s: usize| s >= 2 && aug[s] != BLANK && aug[s] != aug[s - 2];

    // Forward and backward variables both include the emission at their own
    // frame, so the emission is divided out once when they are combined.
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, aug[0]);
    if s_len > 1 {
        alpha[1] = lp(0, aug[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, aug[s]) };
        }
    }

    let mut log_p = alpha[(frames - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = logaddexp(log_p, alpha[(frames - 1) * s_len + s_len - 2]);
    }
    if log_p == ninf {
        return Ok(CtcOutcome::Infeasible);
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = lp(frames - 1, aug[s_len - 1]);
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = lp(frames - 1, aug[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = logaddexp(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = logaddexp(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, aug[s]) };
        }
    }

    // d(-log P)/d lp[t][k] = -exp(lse over {s: aug[s]=k} of
    //   alpha[t][s] + beta[t][s] - lp[t][aug[s]] - log P).
    let mut grad = Tensor::zeros(log_probs.shape().to_vec());
    for t in 0..frames {
        let mut per_label = vec![ninf; vocab];
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let v = aug[s];
            per_label[v] = logaddexp(per_label[v], a + b - lp(t, v));
        }
        for v in 0..vocab {
            if per_label[v] != ninf {
                grad.data_mut()[t * vocab + v] = -libm::exp(per_label[v] - log_p);
            }
        }
    }

    Ok(CtcOutcome::Feasible(CtcLoss {
        loss: -log_p,
        grad,
    }))
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}

/// Merge adjacent equal ids, then delete blanks.
pub fn collapse(alignment: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in alignment {
        if prev != Some(id) && id != BLANK {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

/// Per-frame argmax (ties to the lowest id) followed by collapse. The score
/// is the summed per-frame max log-prob.
pub fn greedy_decode(log_probs: &Tensor) -> Hypothesis {
    let (frames, vocab) = log_probs.rows_cols();
    let mut path = Vec::with_capacity(frames);
    let mut score = 0.0;
    for t in 0..frames {
        let row = &log_probs.data()[t * vocab..(t + 1) * vocab];
        let mut best = 0;
        for v in 1..vocab {
            if row[v] > row[best] {
                best = v;
            }
        }
        path.push(best);
        score += row[best];
    }
    Hypothesis {
        tokens: collapse(&path),
        log_score: score,
    }
}

/// Result of prefix-beam decoding; `truncated` is set when fewer than the
/// requested k prefixes carried any probability mass.
#[derive(Debug, Clone)]
pub struct PrefixBeamOutput {
    pub hyps: Vec<Hypothesis>,
    pub truncated: bool,
}

#[derive(Clone, Copy)]
struct Masses {
    blank: f64,
    non_blank: f64,
}

impl Masses {
    const EMPTY: Masses = Masses {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        logaddexp(self.blank, self.non_blank)
    }
}

/// Standard CTC prefix beam search tracking separate blank-ending and
/// non-blank-ending masses per collapsed prefix. With a beam wide enough
/// that nothing is pruned the final masses are the exact posterior of each
/// collapsed sequence.
pub fn prefix_beam_decode(
    log_probs: &Tensor,
    beam_width: usize,
    k: usize,
) -> Result<PrefixBeamOutput> {
    if beam_width < k || k == 0 {
        return Err(Error::Contract("prefix_beam_decode: need beam_width >= k >= 1"));
    }
    let (frames, vocab) = log_probs.rows_cols();
    let mut current: BTreeMap<Vec<usize>, Masses> = BTreeMap::new();
    current.insert(
        Vec::new(),
        Masses {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    );

    for t in 0..frames {
        let row = &log_probs.data()[t * vocab..(t + 1) * vocab];
        let mut next: BTreeMap<Vec<usize>, Masses> = BTreeMap::new();
        for (prefix, masses) in &current {
            let total = masses.total();
            // Blank keeps the prefix and moves all mass to blank-ending.
            {
                let e = next.entry(prefix.clone()).or_insert(Masses::EMPTY);
                e.blank = logaddexp(e.blank, total + row[BLANK]);
            }
            for v in 1..vocab {
                let p = row[v];
                if prefix.last() == Some(&v) {
                    // Repeated symbol: merges into the same prefix unless a
                    // blank intervened.
                    {
                        let e = next.entry(prefix.clone()).or_insert(Masses::EMPTY);
                        e.non_blank = logaddexp(e.non_blank, masses.non_blank + p);
                    }
                    let mut ext = prefix.clone();
                    ext.push(v);
                    let e = next.entry(ext).or_insert(Masses::EMPTY);
                    e.non_blank = logaddexp(e.non_blank, masses.blank + p);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(v);
                    let e = next.entry(ext).or_insert(Masses::EMPTY);
                    e.non_blank = logaddexp(e.non_blank, total + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, Masses)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total()
                .total_cmp(&a.1.total())
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam_width);
        current = ranked.into_iter().collect();
    }

    let mut ranked: Vec<(Vec<usize>, f64)> = current
        .into_iter()
        .map(|(prefix, m)| (prefix, m.total()))
        .filter(|(_, total)| *total > f64::NEG_INFINITY)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let truncated = ranked.len() < k;
    ranked.truncate(k);
    Ok(PrefixBeamOutput {
        hyps: ranked
            .into_iter()
            .map(|(tokens, log_score)| Hypothesis { tokens, log_score })
            .collect(),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::log_sum_exp;

    fn uniform_rows(frames: usize, vocab: usize) -> Tensor {
        Tensor::full(vec![frames, vocab], -libm::log(vocab as f64))
    }

    fn random_log_rows(frames: usize, vocab: usize, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(vec![frames, vocab]);
        for r in 0..frames {
            let row: Vec<f64> = (0..vocab).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let lse = log_sum_exp(&row);
            for (c, v) in row.iter().enumerate() {
                t.data_mut()[r * vocab + c] = v - lse;
            }
        }
        t
    }

    /// Independent oracle: enumerate every alignment path, collapse it, and
    /// sum path probabilities per collapsed sequence.
    fn brute_force_mass(log_probs: &Tensor, target: &[usize]) -> f64 {
        let (frames, vocab) = log_probs.rows_cols();
        let mut total = 0.0;
        let mut path = vec![0usize; frames];
        loop {
            if collapse(&path) == target {
                let mut p = 0.0;
                for (t, &v) in path.iter().enumerate() {
                    p += log_probs.data()[t * vocab + v];
                }
                total += libm::exp(p);
            }
            // Odometer increment over V^T paths.
            let mut i = 0;
            loop {
                if i == frames {
                    return total;
                }
                path[i] += 1;
                if path[i] < vocab {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn loss_of(log_probs: &Tensor, target: &[usize]) -> f64 {
        match ctc_loss(log_probs, target).unwrap() {
            CtcOutcome::Feasible(r) => r.loss,
            CtcOutcome::Infeasible => panic!("unexpected infeasible"),
        }
    }

    #[test]
    fn uniform_single_token() {
        // 3 of the 9 length-2 paths collapse to [2]; each has mass 1/9.
        let lp = uniform_rows(2, 3);
        let loss = loss_of(&lp, &[2]);
        assert!((loss - libm::log(3.0)).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn uniform_two_tokens() {
        // Only the path (1, 2) collapses to [1, 2].
        let lp = uniform_rows(2, 3);
        let loss = loss_of(&lp, &[1, 2]);
        assert!((loss - libm::log(9.0)).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn adjacent_repeat_needs_separating_blank() {
        let lp = uniform_rows(2, 3);
        assert!(matches!(
            ctc_loss(&lp, &[2, 2]).unwrap(),
            CtcOutcome::Infeasible
        ));
        let lp3 = uniform_rows(3, 3);
        assert!(matches!(
            ctc_loss(&lp3, &[2, 2]).unwrap(),
            CtcOutcome::Feasible(_)
        ));
    }

    #[test]
    fn empty_target_is_all_blank_mass() {
        let mut rng = Rng::new(9);
        let lp = random_log_rows(4, 3, &mut rng);
        let expected: f64 = -(0..4).map(|t| lp.data()[t * 3]).sum::<f64>();
        assert!((loss_of(&lp, &[]) - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = Rng::new(17);
        for case in 0..60 {
            let frames = 1 + (rng.below(6) as usize);
            let vocab = 2 + (rng.below(3) as usize);
            let lp = random_log_rows(frames, vocab, &mut rng);
            let target_len = rng.below(4) as usize;
            let target: Vec<usize> =
                (0..target_len).map(|_| 1 + rng.below(vocab as u64 - 1) as usize).collect();
            let mass = brute_force_mass(&lp, &target);
            match ctc_loss(&lp, &target).unwrap() {
                CtcOutcome::Feasible(r) => {
                    assert!(
                        (libm::exp(-r.loss) - mass).abs() < 1e-10,
                        "case {case}: fb {} vs brute {mass}",
                        libm::exp(-r.loss)
                    );
                }
                CtcOutcome::Infeasible => {
                    assert!(mass == 0.0, "case {case}: infeasible but mass {mass}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let frames = 5;
        let vocab = 4;
        let lp = random_log_rows(frames, vocab, &mut rng);
        let target = vec![2, 3, 2];
        let CtcOutcome::Feasible(result) = ctc_loss(&lp, &target).unwrap() else {
            panic!("feasible expected");
        };
        let eps = 1e-6;
        for i in 0..lp.len() {
            let mut plus = lp.clone();
            plus.data_mut()[i] += eps;
            let mut minus = lp.clone();
            minus.data_mut()[i] -= eps;
            let fd = (loss_of(&plus, &target) - loss_of(&minus, &target)) / (2.0 * eps);
            let ad = result.grad.data()[i];
            let denom = (ad.abs() + fd.abs()).max(1e-8);
            assert!(
                (ad - fd).abs() / denom < 1e-4,
                "coord {i}: ad {ad} fd {fd}"
            );
        }
    }

    #[test]
    fn gradient_rows_sum_to_minus_one() {
        let mut rng = Rng::new(31);
        let lp = random_log_rows(6, 4, &mut rng);
        let CtcOutcome::Feasible(result) = ctc_loss(&lp, &[3, 2]).unwrap() else {
            panic!("feasible expected");
        };
        for t in 0..6 {
            let s: f64 = result.grad.data()[t * 4..(t + 1) * 4].iter().sum();
            assert!((s + 1.0).abs() < 1e-9, "frame {t} sums to {s}");
        }
    }

    #[test]
    fn total_probability_is_conserved() {
        // Sum of exp(-loss) over every feasible collapsed target must be 1.
        let mut rng = Rng::new(41);
        for _ in 0..5 {
            let frames = 2 + rng.below(3) as usize;
            let vocab = 3;
            let lp = random_log_rows(frames, vocab, &mut rng);
            let mut total = 0.0;
            let mut target = Vec::new();
            total += sum_masses(&lp, &mut target, frames, vocab);
            assert!((total - 1.0).abs() < 1e-9, "total {total}");
        }
    }

    fn sum_masses(lp: &Tensor, target: &mut Vec<usize>, max_len: usize, vocab: usize) -> f64 {
        let mut total = match ctc_loss(lp, target).unwrap() {
            CtcOutcome::Feasible(r) => libm::exp(-r.loss),
            CtcOutcome::Infeasible => 0.0,
        };
        if target.len() < max_len {
            for v in 1..vocab {
                target.push(v);
                total += sum_masses(lp, target, max_len, vocab);
                target.pop();
            }
        }
        total
    }

    #[test]
    fn rejects_blank_and_out_of_range_targets() {
        let lp = uniform_rows(3, 3);
        assert!(ctc_loss(&lp, &[0]).is_err());
        assert!(ctc_loss(&lp, &[3]).is_err());
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[0, 2, 2, 0, 3]), vec![2, 3]);
        assert_eq!(collapse(&[0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[2, 0, 2]), vec![2, 2]);
    }

    proptest::proptest! {
        // Note collapse is NOT idempotent on outputs with adjacent repeats:
        // (a, blk, a) collapses to (a, a), which a second collapse would
        // merge. That is the whole point of the blank symbol.
        #[test]
        fn collapse_never_emits_blank_and_fixes_repeat_free_outputs(
            align in proptest::collection::vec(0usize..4, 0..12),
        ) {
            let once = collapse(&align);
            proptest::prop_assert!(!once.contains(&BLANK));
            let repeat_free = once.windows(2).all(|w| w[0] != w[1]);
            if repeat_free {
                proptest::prop_assert_eq!(collapse(&once), once);
            } else {
                proptest::prop_assert_ne!(collapse(&once), once);
            }
        }
    }

    #[test]
    fn greedy_examples() {
        // Path (blk, a, a, blk, b) with a=2, b=3.
        let rows: Vec<Vec<f64>> = vec![
            vec![-0.1, -3.0, -3.0, -3.0],
            vec![-3.0, -3.0, -0.1, -3.0],
            vec![-3.0, -3.0, -0.1, -3.0],
            vec![-0.1, -3.0, -3.0, -3.0],
            vec![-3.0, -3.0, -3.0, -0.1],
        ];
        let mut lp = Tensor::zeros(vec![5, 4]);
        for (r, row) in rows.iter().enumerate() {
            lp.data_mut()[r * 4..(r + 1) * 4].copy_from_slice(row);
        }
        let hyp = greedy_decode(&lp);
        assert_eq!(hyp.tokens, vec![2, 3]);
        assert!((hyp.log_score + 0.5).abs() < 1e-12);

        let all_blank = greedy_decode(&uniform_rows(1, 2));
        // Uniform row ties break to the lowest id (blank).
        assert!(all_blank.tokens.is_empty());
    }

    #[test]
    fn prefix_beam_single_frame() {
        let mut lp = Tensor::zeros(vec![1, 3]);
        lp.data_mut().copy_from_slice(&[
            libm::log(0.5),
            libm::log(0.3),
            libm::log(0.2),
        ]);
        let out = prefix_beam_decode(&lp, 10, 3).unwrap();
        assert_eq!(out.hyps[0].tokens, Vec::<usize>::new());
        assert!((out.hyps[0].log_score - libm::log(0.5)).abs() < 1e-12);
        assert_eq!(out.hyps[1].tokens, vec![1]);
        assert_eq!(out.hyps[2].tokens, vec![2]);
        assert!(!out.truncated);
    }

    #[test]
    fn prefix_beam_deterministic_path() {
        // Probability 1 on token 1 every frame: the only surviving prefix.
        let mut lp = Tensor::full(vec![3, 3], f64::NEG_INFINITY);
        for t in 0..3 {
            lp.data_mut()[t * 3 + 1] = 0.0;
        }
        let out = prefix_beam_decode(&lp, 8, 4).unwrap();
        assert_eq!(out.hyps.len(), 1);
        assert!(out.truncated);
        assert_eq!(out.hyps[0].tokens, vec![1]);
        assert!(out.hyps[0].log_score.abs() < 1e-12);
    }

    #[test]
    fn saturating_beam_matches_exhaustive_argmax() {
        let mut rng = Rng::new(71);
        for case in 0..40 {
            let frames = 1 + rng.below(5) as usize;
            let vocab = 2 + rng.below(2) as usize;
            let lp = random_log_rows(frames, vocab, &mut rng);
            let out = prefix_beam_decode(&lp, 100_000, 1).unwrap();
            let best = exhaustive_best(&lp);
            assert_eq!(out.hyps[0].tokens, best, "case {case}");
        }
    }

    fn exhaustive_best(lp: &Tensor) -> Vec<usize> {
        let (frames, vocab) = lp.rows_cols();
        let mut masses: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        let mut path = vec![0usize; frames];
        loop {
            let mut p = 0.0;
            for (t, &v) in path.iter().enumerate() {
                p += lp.data()[t * vocab + v];
            }
            *masses.entry(collapse(&path)).or_insert(0.0) += libm::exp(p);
            let mut i = 0;
            loop {
                if i == frames {
                    let mut ranked: Vec<(Vec<usize>, f64)> = masses.into_iter().collect();
                    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                    return ranked[0].0.clone();
                }
                path[i] += 1;
                if path[i] < vocab {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }
}
