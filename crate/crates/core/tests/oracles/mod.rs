//! Independent reference implementations used to cross-check the library.
#![allow(dead_code)]

use rand::Rng;

/// Linear scan in f64 with sequential accumulation. Returns entry indices
/// ordered by (distance, index).
pub fn brute_force_knn(
    keys: &[f32],
    dim: usize,
    talk_ids: &[u32],
    query: &[f32],
    k: usize,
    exclude_talk: Option<u32>,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = keys
        .chunks(dim)
        .enumerate()
        .filter(|(i, _)| exclude_talk != Some(talk_ids[*i]))
        .map(|(i, key)| {
            let mut d = 0.0f64;
            for (a, b) in key.iter().zip(query) {
                let diff = *a as f64 - *b as f64;
                d += diff * diff;
            }
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Vectors on a quarter-integer grid in [-2, 2]: squared distances are
/// exact in f32 and ties are common.
pub fn grid_vectors<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<f32> {
    (0..n * dim).map(|_| rng.random_range(-8i32..=8) as f32 / 4.0).collect()
}

/// Corpus BLEU-4 computed by matching each hypothesis n-gram against a
/// pool of unused reference n-grams, then a direct product of precisions.
pub fn bleu_oracle(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            if h.len() >= n {
                total[n - 1] += h.len() - n + 1;
            }
            let mut pool: Vec<&[u32]> = if rf.len() >= n {
                (0..=rf.len() - n).map(|i| &rf[i..i + n]).collect()
            } else {
                Vec::new()
            };
            if h.len() < n {
                continue;
            }
            for i in 0..=h.len() - n {
                let gram = &h[i..i + n];
                if let Some(pos) = pool.iter().position(|g| *g == gram) {
                    pool.remove(pos);
                    matched[n - 1] += 1;
                }
            }
        }
    }
    let mut product = 1.0f64;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return 0.0;
        }
        product *= matched[n] as f64 / total[n] as f64;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(0.25)
}

/// Random corpus over a tiny alphabet so that 4-gram matches occur.
pub fn random_corpus<R: Rng>(rng: &mut R, segments: usize) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut hyps = Vec::with_capacity(segments);
    let mut refs = Vec::with_capacity(segments);
    for _ in 0..segments {
        let reference: Vec<u32> = (0..rng.random_range(4..14)).map(|_| rng.random_range(0..3)).collect();
        // hypotheses are noisy edits of the reference
        let mut hyp = Vec::with_capacity(reference.len() + 1);
        for &t in &reference {
            if rng.random_bool(0.15) {
                continue;
            }
            hyp.push(if rng.random_bool(0.15) { rng.random_range(0..4) } else { t });
        }
        if rng.random_bool(0.3) {
            hyp.push(rng.random_range(0..3));
        }
        hyps.push(hyp);
        refs.push(reference);
    }
    (hyps, refs)
}
