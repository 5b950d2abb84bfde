//! Count-based n-gram language models and n-gram-overlap data selection.
//!
//! Probabilities are a Jelinek–Mercer mixture of maximum-likelihood
//! estimates across orders, mixed with a uniform floor over the vocabulary:
//!
//! `p(w | h) = floor / |V| + (1 - floor) * Σ_j λ_j · p_ml_j(w | h)`
//!
//! When the order-`j` context was never observed, `p_ml_j` falls back to the
//! next lower order so every term stays a proper distribution.
//!
//! Data selection scores candidates by clipped n-gram precision against a
//! seed set: the fraction of the candidate's n-grams (orders `1..=max_order`,
//! with multiplicity) that occur anywhere in the seed.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::corpus::{ParallelCorpus, Sentence, BOS};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 5;
pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_FLOOR: f64 = 0.01;
pub const HEADER_PREFIX: &str = "NGRAM-COUNTS v1 order=";

/// Anything that assigns next-token probabilities given a token history.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// `history` holds the preceding sentence tokens without BOS.
    fn prob(&self, history: &[u32], token: u32) -> f64;

    fn distribution(&self, history: &[u32]) -> Vec<f64> {
        (0..self.vocab_size() as u32).map(|t| self.prob(history, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    vocab_size: usize,
    counts: HashMap<Vec<u32>, u64>,
    context_totals: HashMap<Vec<u32>, u64>,
    weights: Vec<f64>,
    floor: f64,
}

impl NgramLm {
    /// Trains with uniform interpolation weights and the default floor.
    pub fn train(corpus: &[Sentence], order: usize, vocab_size: usize) -> Result<Self> {
        let weights = vec![1.0 / order.max(1) as f64; order.max(1)];
        Self::train_with(corpus, order, vocab_size, weights, DEFAULT_FLOOR)
    }

    pub fn train_with(
        corpus: &[Sentence],
        order: usize,
        vocab_size: usize,
        weights: Vec<f64>,
        floor: f64,
    ) -> Result<Self> {
        validate(order, vocab_size, &weights, floor)?;
        if corpus.iter().all(Sentence::is_empty) {
            return Err(Error::Empty("language model training corpus"));
        }
        let mut counts: HashMap<Vec<u32>, u64> = HashMap::new();
        for sent in corpus {
            if let Some(&bad) = sent.ids().iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::InvalidArgument(format!(
                    "token id {bad} outside vocabulary of {vocab_size}"
                )));
            }
            let mut padded = vec![BOS; order - 1];
            padded.extend_from_slice(sent.ids());
            for i in (order - 1)..padded.len() {
                for j in 1..=order {
                    *counts.entry(padded[i + 1 - j..=i].to_vec()).or_default() += 1;
                }
            }
        }
        Ok(Self::from_counts(order, vocab_size, counts, weights, floor))
    }

    fn from_counts(
        order: usize,
        vocab_size: usize,
        counts: HashMap<Vec<u32>, u64>,
        weights: Vec<f64>,
        floor: f64,
    ) -> Self {
        let mut context_totals: HashMap<Vec<u32>, u64> = HashMap::new();
        for (gram, &c) in &counts {
            *context_totals.entry(gram[..gram.len() - 1].to_vec()).or_default() += c;
        }
        NgramLm {
            order,
            vocab_size,
            counts,
            context_totals,
            weights,
            floor,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn count(&self, gram: &[u32]) -> u64 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn num_ngrams(&self) -> usize {
        self.counts.len()
    }

    /// Last `len` tokens of the BOS-padded history.
    fn context(&self, history: &[u32], len: usize) -> Vec<u32> {
        let mut ctx = Vec::with_capacity(len);
        let missing = len.saturating_sub(history.len());
        ctx.extend(std::iter::repeat_n(BOS, missing));
        ctx.extend_from_slice(&history[history.len() - (len - missing)..]);
        ctx
    }

    /// Serializes counts as `count<TAB>id id ...`, sorted by length then ids.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HEADER_PREFIX}{}", self.order)?;
        let mut grams: Vec<(&Vec<u32>, &u64)> = self.counts.iter().collect();
        grams.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(b.0)));
        for (gram, count) in grams {
            let toks: Vec<String> = gram.iter().map(u32::to_string).collect();
            writeln!(w, "{count}\t{}", toks.join(" "))?;
        }
        Ok(())
    }

    /// Reads the count listing back; weights are uniform and the floor is
    /// the default since the format stores counts only.
    pub fn read<R: BufRead>(reader: R, vocab_size: usize) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(Error::Empty("n-gram count file"))??;
        let order: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|o| o.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("bad header {header:?}"),
            })?;
        let weights = vec![1.0 / order.max(1) as f64; order.max(1)];
        validate(order, vocab_size, &weights, DEFAULT_FLOOR)?;
        let mut counts = HashMap::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse { line: lineno, message: m };
            let (count, gram) = line
                .split_once('\t')
                .ok_or_else(|| bad("missing tab".into()))?;
            let count: u64 = count.parse().map_err(|e| bad(format!("bad count: {e}")))?;
            let gram = gram
                .split(' ')
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("bad token id: {e}")))?;
            if count == 0 || gram.is_empty() || gram.len() > order {
                return Err(bad(format!("invalid entry {line:?}")));
            }
            if gram.iter().any(|&t| t as usize >= vocab_size) {
                return Err(bad(format!("token id outside vocabulary of {vocab_size}")));
            }
            counts.insert(gram, count);
        }
        if counts.is_empty() {
            return Err(Error::Empty("n-gram count file"));
        }
        Ok(Self::from_counts(order, vocab_size, counts, weights, DEFAULT_FLOOR))
    }
}

fn validate(order: usize, vocab_size: usize, weights: &[f64], floor: f64) -> Result<()> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::InvalidArgument(format!("order must be in 1..={MAX_ORDER}, got {order}")));
    }
    if vocab_size == 0 {
        return Err(Error::InvalidArgument("vocab_size must be positive".into()));
    }
    if weights.len() != order || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "need {order} non-negative interpolation weights"
        )));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("interpolation weights must sum to 1".into()));
    }
    if !(0.0..=1.0).contains(&floor) || floor == 0.0 {
        return Err(Error::InvalidArgument(format!("floor must be in (0, 1], got {floor}")));
    }
    Ok(())
}

impl LanguageModel for NgramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn prob(&self, history: &[u32], token: u32) -> f64 {
        if token as usize >= self.vocab_size {
            return 0.0;
        }
        let mut mixture = 0.0;
        let mut lower = 0.0;
        for j in 1..=self.order {
            let mut gram = self.context(history, j - 1);
            let total = self.context_totals.get(&gram).copied().unwrap_or(0);
            let p_j = if total > 0 {
                gram.push(token);
                self.count(&gram) as f64 / total as f64
            } else {
                lower
            };
            mixture += self.weights[j - 1] * p_j;
            lower = p_j;
        }
        self.floor / self.vocab_size as f64 + (1.0 - self.floor) * mixture
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmInterpConfig {
    pub lambda_domain: f64,
}

impl Default for LmInterpConfig {
    fn default() -> Self {
        LmInterpConfig { lambda_domain: 0.5 }
    }
}

impl LmInterpConfig {
    pub fn new(lambda_domain: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_domain) {
            return Err(Error::InvalidArgument(format!(
                "lambda_domain must be in [0, 1], got {lambda_domain}"
            )));
        }
        Ok(LmInterpConfig { lambda_domain })
    }
}

/// `λ · p_domain + (1 - λ) · p_general`.
pub struct InterpolatedLm<'a> {
    general: &'a dyn LanguageModel,
    domain: &'a dyn LanguageModel,
    lambda: f64,
}

pub fn lm_interpolate<'a>(
    general: &'a dyn LanguageModel,
    domain: &'a dyn LanguageModel,
    cfg: LmInterpConfig,
) -> Result<InterpolatedLm<'a>> {
    if general.vocab_size() != domain.vocab_size() {
        return Err(Error::VocabMismatch(general.vocab_size(), domain.vocab_size()));
    }
    let cfg = LmInterpConfig::new(cfg.lambda_domain)?;
    Ok(InterpolatedLm {
        general,
        domain,
        lambda: cfg.lambda_domain,
    })
}

impl LanguageModel for InterpolatedLm<'_> {
    fn vocab_size(&self) -> usize {
        self.general.vocab_size()
    }

    fn prob(&self, history: &[u32], token: u32) -> f64 {
        if self.lambda == 1.0 {
            return self.domain.prob(history, token);
        }
        if self.lambda == 0.0 {
            return self.general.prob(history, token);
        }
        self.lambda * self.domain.prob(history, token)
            + (1.0 - self.lambda) * self.general.prob(history, token)
    }
}

/// Per-order n-gram sets collected from seed (in-domain) sentences.
#[derive(Debug, Clone, Default)]
pub struct SeedNgrams {
    sets: Vec<HashSet<Vec<u32>>>,
}

impl SeedNgrams {
    pub fn new(max_order: usize) -> Self {
        SeedNgrams {
            sets: vec![HashSet::new(); max_order],
        }
    }

    pub fn from_sentences(seed: &[Sentence], max_order: usize) -> Self {
        let mut s = Self::new(max_order);
        for sent in seed {
            for n in 1..=max_order {
                for gram in sent.ids().windows(n) {
                    s.sets[n - 1].insert(gram.to_vec());
                }
            }
        }
        s
    }

    pub fn insert(&mut self, gram: &[u32]) {
        if gram.is_empty() {
            return;
        }
        if self.sets.len() < gram.len() {
            self.sets.resize(gram.len(), HashSet::new());
        }
        self.sets[gram.len() - 1].insert(gram.to_vec());
    }

    pub fn contains(&self, gram: &[u32]) -> bool {
        !gram.is_empty()
            && self
                .sets
                .get(gram.len() - 1)
                .is_some_and(|s| s.contains(gram))
    }
}

/// Clipped n-gram precision of `candidate` against the seed sets, in `[0, 1]`.
pub fn overlap_score(candidate: &Sentence, seed: &SeedNgrams, max_order: usize) -> f64 {
    let mut matched = 0usize;
    let mut total = 0usize;
    for n in 1..=max_order {
        for gram in candidate.ids().windows(n) {
            total += 1;
            if seed.contains(gram) {
                matched += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    }
}

/// Pool indices with scores, best first; ties keep pool order.
pub fn rank_by_overlap(pool: &ParallelCorpus, seed: &[Sentence], max_order: usize) -> Vec<(usize, f64)> {
    let seed = SeedNgrams::from_sentences(seed, max_order);
    let mut ranked: Vec<(usize, f64)> = pool
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, overlap_score(&p.source, &seed, max_order)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Keeps the `top_k` pool pairs whose source side overlaps the seed most.
pub fn select_data(
    pool: &ParallelCorpus,
    seed: &[Sentence],
    max_order: usize,
    top_k: usize,
) -> Result<ParallelCorpus> {
    if max_order == 0 {
        return Err(Error::InvalidArgument("max_order must be at least 1".into()));
    }
    if top_k > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k {top_k} exceeds pool size {}",
            pool.len()
        )));
    }
    let pairs = rank_by_overlap(pool, seed, max_order)
        .into_iter()
        .take(top_k)
        .map(|(i, _)| pool.pairs[i].clone())
        .collect();
    Ok(ParallelCorpus::new(pool.lang.clone(), pairs))
}
