//! Corpus BLEU-4 and word error rate.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuReport {
    /// Score in `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_default() += 1;
    }
    counts
}

/// Unsmoothed corpus BLEU-4 with one reference per segment.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let ref_counts = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; BLEU_ORDER];
    for n in 0..BLEU_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`, with the
/// operation breakdown of one optimal path.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, subs, ins, dels) per cell; ties prefer substitution, then deletion
    let mut prev: Vec<(usize, EditCounts)> = (0..=m)
        .map(|j| (j, EditCounts { insertions: j, ..Default::default() }))
        .collect();
    for i in 1..=n {
        let mut cur = Vec::with_capacity(m + 1);
        cur.push((i, EditCounts { deletions: i, ..Default::default() }));
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let (dc, mut de) = prev[j - 1];
            let diag = dc + usize::from(!same);
            if !same {
                de.substitutions += 1;
            }
            let mut best = (diag, de);
            let (uc, mut ue) = prev[j];
            ue.deletions += 1;
            if uc + 1 < best.0 {
                best = (uc + 1, ue);
            }
            let (lc, mut le) = cur[j - 1];
            le.insertions += 1;
            if lc + 1 < best.0 {
                best = (lc + 1, le);
            }
            cur.push(best);
        }
        prev = cur;
    }
    prev[m].1
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    align(a, b).total()
}

/// Edits divided by reference length.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("WER reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WerReport {
    pub wer: f64,
    pub edits: EditCounts,
    pub ref_len: usize,
}

/// Total edits over total reference length.
pub fn corpus_wer<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<WerReport> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut edits = EditCounts::default();
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let e = align(h, r);
        edits.substitutions += e.substitutions;
        edits.insertions += e.insertions;
        edits.deletions += e.deletions;
        ref_len += r.len();
    }
    if ref_len == 0 {
        return Err(Error::Empty("WER reference"));
    }
    Ok(WerReport {
        wer: edits.total() as f64 / ref_len as f64,
        edits,
        ref_len,
    })
}
