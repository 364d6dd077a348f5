//! Levenshtein alignment and token error rates.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Edit distance with its substitution / insertion / deletion split.
/// Insertions are tokens present in the hypothesis but not the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Unit-cost Levenshtein distance with a deterministic backtrace that
/// prefers substitution, then deletion, then insertion on ties.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let r = reference.len();
    let h = hypothesis.len();
    let cols = h + 1;
    let mut d = vec![0usize; (r + 1) * cols];
    for i in 0..=r {
        d[i * cols] = i;
    }
    for j in 0..=h {
        d[j] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let diag = d[(i - 1) * cols + j - 1] + sub_cost;
            let del = d[(i - 1) * cols + j] + 1;
            let ins = d[i * cols + j - 1] + 1;
            d[i * cols + j] = diag.min(del).min(ins);
        }
    }

    let mut counts = EditCounts {
        distance: d[r * cols + h],
        substitutions: 0,
        insertions: 0,
        deletions: 0,
    };
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        let here = d[i * cols + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && d[(i - 1) * cols + j - 1] == here
        {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[(i - 1) * cols + j - 1] + 1 == here {
            counts.substitutions += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && d[(i - 1) * cols + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(
        counts.distance,
        counts.substitutions + counts.insertions + counts.deletions
    );
    counts
}

/// Corpus error rate: summed edit distances over summed reference lengths.
/// May exceed 1.0. Errors if the total reference length is zero.
pub fn error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract("error_rate: refs and hyps differ in length"));
    }
    let total_ref: usize = refs.iter().map(Vec::len).sum();
    if total_ref == 0 {
        return Err(Error::Contract("error_rate: zero total reference length"));
    }
    let total_dist: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h).distance)
        .sum();
    Ok(total_dist as f64 / total_ref as f64)
}
