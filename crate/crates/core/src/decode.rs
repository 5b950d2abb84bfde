//! kNN-augmented beam search.
//!
//! Per step and per ensemble member: query the member's own datastore with
//! its own hidden state, turn the neighbors into a token distribution with
//! `p_knn(y) ∝ Σ_{v_i = y} exp(-d_i / T)`, and interpolate
//! `w · p_knn + (1 - w) · p_model`. Only then are members ensembled, by the
//! arithmetic mean of their interpolated distributions. An optional n-gram
//! LM is applied last by shallow fusion, `p'(y) ∝ p(y) · p_lm(y)^α`.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Sentence, BOS, EOS, PAD};
use crate::datastore::{Datastore, Neighbor};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::eval::{bleu, BleuReport};
use crate::model::StepModel;
use crate::ngram::LanguageModel;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_TEMPERATURE: f64 = 50.0;
pub const DEFAULT_WEIGHT: f64 = 0.3;
pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_T_GRID: [f64; 3] = [10.0, 50.0, 100.0];
pub const DEFAULT_W_GRID: [f64; 3] = [0.1, 0.3, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub k: usize,
    pub temperature: f64,
    /// Weight of the kNN distribution.
    pub weight: f64,
    pub beam: usize,
    /// Defaults to `2 · |source| + 8`.
    pub max_len: Option<usize>,
    pub fusion_alpha: f64,
    pub exclude_talk: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            k: DEFAULT_K,
            temperature: DEFAULT_TEMPERATURE,
            weight: DEFAULT_WEIGHT,
            beam: DEFAULT_BEAM,
            max_len: None,
            fusion_alpha: 0.0,
            exclude_talk: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return bad(format!("interpolation weight must be in [0, 1], got {}", self.weight));
        }
        if self.beam == 0 {
            return bad("beam must be at least 1".into());
        }
        if self.max_len == Some(0) {
            return bad("max_len must be at least 1".into());
        }
        if !(self.fusion_alpha >= 0.0 && self.fusion_alpha.is_finite()) {
            return bad(format!("fusion alpha must be non-negative, got {}", self.fusion_alpha));
        }
        Ok(())
    }

    pub fn max_len_for(&self, source_len: usize) -> usize {
        self.max_len.unwrap_or(2 * source_len + 8)
    }

    pub fn without_retrieval(&self) -> Self {
        DecodeConfig {
            weight: 0.0,
            ..self.clone()
        }
    }
}

/// Turns retrieved neighbors into a token distribution. `None` signals
/// that nothing was retrieved.
pub fn knn_distribution(neighbors: &[Neighbor], temperature: f64, vocab_size: usize) -> Result<Option<Distribution>> {
    if neighbors.is_empty() {
        return Ok(None);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    // shifting by the nearest distance keeps exp() in range without
    // changing the normalized result
    let nearest = neighbors.iter().map(|n| n.distance).fold(f64::INFINITY, f64::min);
    let mut weights = vec![0.0; vocab_size];
    for n in neighbors {
        let slot = weights.get_mut(n.value as usize).ok_or_else(|| {
            Error::InvalidArgument(format!("neighbor value {} outside vocabulary of {vocab_size}", n.value))
        })?;
        *slot += (-(n.distance - nearest) / temperature).exp();
    }
    Distribution::from_weights(weights).map(Some)
}

/// `w · p_knn + (1 - w) · p_model`.
pub fn interpolate(p_model: &Distribution, p_knn: &Distribution, weight: f64) -> Result<Distribution> {
    if p_model.len() != p_knn.len() {
        return Err(Error::DimensionMismatch {
            expected: p_model.len(),
            actual: p_knn.len(),
        });
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::InvalidArgument(format!("interpolation weight must be in [0, 1], got {weight}")));
    }
    let probs = p_model
        .probs()
        .iter()
        .zip(p_knn.probs())
        .map(|(&m, &k)| weight * k + (1.0 - weight) * m)
        .collect();
    Ok(Distribution::from_raw(probs))
}

/// Shallow fusion: `p'(y) ∝ p(y) · p_lm(y)^α`.
pub fn fuse_lm(p: &Distribution, p_lm: &Distribution, alpha: f64) -> Result<Distribution> {
    if p.len() != p_lm.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: p_lm.len(),
        });
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("fusion alpha must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(p.clone());
    }
    let logs: Vec<f64> = p
        .probs()
        .iter()
        .zip(p_lm.probs())
        .map(|(&a, &b)| a.ln() + alpha * b.ln())
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidArgument("fusion left no probability mass".into()));
    }
    Distribution::from_weights(logs.iter().map(|l| (l - max).exp()).collect())
}

/// Counts every neighbor returned during decoding, keyed by talk id.
#[derive(Debug, Default)]
pub struct RetrievalLog {
    inner: Mutex<LogInner>,
}

#[derive(Debug, Default, Clone)]
struct LogInner {
    queries: u64,
    by_talk: BTreeMap<u32, u64>,
}

impl RetrievalLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, neighbors: &[Neighbor]) {
        let mut inner = self.inner.lock().unwrap();
        inner.queries += 1;
        for n in neighbors {
            *inner.by_talk.entry(n.talk_id).or_default() += 1;
        }
    }

    pub fn queries(&self) -> u64 {
        self.inner.lock().unwrap().queries
    }

    pub fn retrieved_from(&self, talk_id: u32) -> u64 {
        self.inner.lock().unwrap().by_talk.get(&talk_id).copied().unwrap_or(0)
    }

    pub fn by_talk(&self) -> BTreeMap<u32, u64> {
        self.inner.lock().unwrap().by_talk.clone()
    }

    pub fn reset(&self) {
        *self.inner.lock().unwrap() = LogInner::default();
    }
}

/// One ensemble member: a model and, optionally, the datastore built from
/// its own hidden states.
#[derive(Clone, Copy)]
pub struct Member<'a> {
    pub model: &'a dyn StepModel,
    pub datastore: Option<&'a Datastore>,
}

impl<'a> Member<'a> {
    pub fn new(model: &'a dyn StepModel, datastore: Option<&'a Datastore>) -> Self {
        Member { model, datastore }
    }
}

/// Shared read-only decoding inputs.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub members: &'a [Member<'a>],
    pub lm: Option<&'a dyn LanguageModel>,
    pub log: Option<&'a RetrievalLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Generated tokens without EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// `log_prob` over the number of generated tokens, EOS included.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, log_prob: f64, finished: bool) -> Self {
        let count = tokens.len() + usize::from(finished);
        Hypothesis {
            score: log_prob / count.max(1) as f64,
            tokens,
            log_prob,
            finished,
        }
    }

    pub fn sentence(&self) -> Sentence {
        Sentence::new(self.tokens.clone())
    }
}

#[derive(Clone)]
struct BeamItem {
    tokens: Vec<u32>,
    log_prob: f64,
    states: Vec<Vec<f64>>,
    prev: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(members: &'a [Member<'a>]) -> Self {
        Decoder {
            members,
            lm: None,
            log: None,
        }
    }

    pub fn with_lm(mut self, lm: Option<&'a dyn LanguageModel>) -> Self {
        self.lm = lm;
        self
    }

    pub fn with_log(mut self, log: Option<&'a RetrievalLog>) -> Self {
        self.log = log;
        self
    }

    fn check(&self, cfg: &DecodeConfig) -> Result<usize> {
        cfg.validate()?;
        let first = self.members.first().ok_or(Error::Empty("ensemble"))?;
        let vocab = first.model.vocab_size();
        for m in self.members {
            if m.model.vocab_size() != vocab {
                return Err(Error::VocabMismatch(vocab, m.model.vocab_size()));
            }
            if let Some(ds) = m.datastore {
                if ds.dim() != m.model.hidden_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: m.model.hidden_dim(),
                        actual: ds.dim(),
                    });
                }
            }
        }
        if let Some(lm) = self.lm {
            if lm.vocab_size() != vocab {
                return Err(Error::VocabMismatch(vocab, lm.vocab_size()));
            }
        }
        Ok(vocab)
    }

    /// Ensembled (and fused) next-token distribution plus each member's
    /// next state.
    fn next(
        &self,
        contexts: &[Vec<f64>],
        item: &BeamItem,
        cfg: &DecodeConfig,
    ) -> Result<(Distribution, Vec<Vec<f64>>)> {
        let retrieve = cfg.weight > 0.0;
        let mut mean: Option<Vec<f64>> = None;
        let mut states = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let out = m.model.step(&contexts[i], &item.states[i], item.prev)?;
            let mut dist = out.dist;
            if let (true, Some(ds)) = (retrieve, m.datastore) {
                let query: Vec<f32> = out.hidden.iter().map(|&v| v as f32).collect();
                let neighbors = ds.query(&query, cfg.k, cfg.exclude_talk)?;
                if let Some(log) = self.log {
                    log.record(&neighbors);
                }
                if let Some(p_knn) = knn_distribution(&neighbors, cfg.temperature, dist.len())? {
                    dist = interpolate(&dist, &p_knn, cfg.weight)?;
                }
            }
            states.push(out.state);
            if self.members.len() == 1 {
                mean = Some(dist.into_inner());
            } else {
                match &mut mean {
                    None => mean = Some(dist.into_inner()),
                    Some(acc) => acc.iter_mut().zip(dist.probs()).for_each(|(a, p)| *a += p),
                }
            }
        }
        let mut probs = mean.expect("at least one member");
        if self.members.len() > 1 {
            let inv = 1.0 / self.members.len() as f64;
            probs.iter_mut().for_each(|p| *p *= inv);
        }
        let mut dist = Distribution::from_raw(probs);
        if cfg.fusion_alpha > 0.0 {
            if let Some(lm) = self.lm {
                let p_lm = Distribution::from_raw(lm.distribution(&item.tokens));
                dist = fuse_lm(&dist, &p_lm, cfg.fusion_alpha)?;
            }
        }
        Ok((dist, states))
    }

    fn search(&self, contexts: &[Vec<f64>], source_len: usize, cfg: &DecodeConfig, beam: usize) -> Result<Vec<Hypothesis>> {
        let vocab = self.check(cfg)?;
        let max_len = cfg.max_len_for(source_len);
        let mut live = vec![BeamItem {
            tokens: Vec::new(),
            log_prob: 0.0,
            states: self.members.iter().map(|m| m.model.initial_state()).collect(),
            prev: BOS,
        }];
        let mut done = Vec::new();
        for _ in 0..max_len {
            let mut expanded = Vec::with_capacity(live.len());
            let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(live.len() * vocab);
            for (h, item) in live.iter().enumerate() {
                let (dist, states) = self.next(contexts, item, cfg)?;
                for (tok, &p) in dist.probs().iter().enumerate() {
                    let tok = tok as u32;
                    if tok == PAD || tok == BOS || p <= 0.0 {
                        continue;
                    }
                    cands.push((item.log_prob + p.ln(), tok, h));
                }
                expanded.push(states);
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(beam);
            for &(log_prob, tok, h) in cands.iter().take(beam) {
                let parent = &live[h];
                if tok == EOS {
                    done.push(Hypothesis::new(parent.tokens.clone(), log_prob, true));
                } else {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(tok);
                    next.push(BeamItem {
                        tokens,
                        log_prob,
                        states: expanded[h].clone(),
                        prev: tok,
                    });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
            // a live prefix can at best keep its log-prob over the longest
            // possible length, so once no completion can overtake the best
            // finished hypothesis the prefixes are dropped
            if done.len() >= beam {
                let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
                let best_live = live.iter().map(|i| i.log_prob).fold(f64::NEG_INFINITY, f64::max);
                if best_done >= best_live / (max_len + 1) as f64 {
                    return Ok(done);
                }
            }
        }
        // prefixes cut off by max_len still compete
        done.extend(live.into_iter().map(|i| Hypothesis::new(i.tokens, i.log_prob, false)));
        Ok(done)
    }

    /// Beam search over the ensemble. The result is the best hypothesis by
    /// length-normalized score; for `beam > 1` the greedy path competes too,
    /// so widening the beam never lowers the returned score.
    pub fn decode(&self, source: &Sentence, cfg: &DecodeConfig) -> Result<Hypothesis> {
        if source.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        let contexts = self
            .members
            .iter()
            .map(|m| m.model.encode(source))
            .collect::<Result<Vec<_>>>()?;
        let mut pool = self.search(&contexts, source.len(), cfg, cfg.beam)?;
        if cfg.beam > 1 {
            pool.extend(self.search(&contexts, source.len(), cfg, 1)?);
        }
        pool.into_iter()
            .reduce(|best, h| if better(&h, &best) { h } else { best })
            .ok_or(Error::Empty("hypothesis pool"))
    }

    /// Decodes every source in parallel; output order matches input order.
    pub fn decode_all(&self, sources: &[Sentence], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        sources.par_iter().map(|s| self.decode(s, cfg)).collect()
    }

    /// Decodes each pair with retrieval restricted away from its own talk.
    pub fn decode_leave_one_out(&self, corpus: &ParallelCorpus, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        corpus
            .pairs
            .par_iter()
            .map(|p| {
                let cfg = DecodeConfig {
                    exclude_talk: Some(p.talk_id),
                    ..cfg.clone()
                };
                self.decode(&p.source, &cfg)
            })
            .collect()
    }
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    match a.score.total_cmp(&b.score) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => (!a.finished, &a.tokens) < (!b.finished, &b.tokens),
    }
}

/// Convenience wrapper around [`Decoder::decode`].
pub fn beam_decode(
    members: &[Member<'_>],
    source: &Sentence,
    cfg: &DecodeConfig,
    lm: Option<&dyn LanguageModel>,
) -> Result<Hypothesis> {
    Decoder::new(members).with_lm(lm).decode(source, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub temperature: f64,
    pub weight: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub best: GridCell,
    pub table: Vec<GridCell>,
}

impl GridResult {
    /// `T<TAB>w<TAB>BLEU` with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("T\tw\tBLEU\n");
        for c in &self.table {
            out.push_str(&format!("{}\t{}\t{:.4}\n", c.temperature, c.weight, c.bleu));
        }
        out
    }
}

/// Scores the dev set under every `(T, w)` and returns the BLEU argmax;
/// ties prefer the smaller `w`, then the smaller `T`. With `leave_one_out`
/// each pair is decoded with its own talk excluded from retrieval.
pub fn grid_search(
    decoder: &Decoder<'_>,
    dev: &ParallelCorpus,
    t_grid: &[f64],
    w_grid: &[f64],
    base: &DecodeConfig,
    leave_one_out: bool,
) -> Result<GridResult> {
    if t_grid.is_empty() || w_grid.is_empty() {
        return Err(Error::Empty("search grid"));
    }
    if dev.is_empty() {
        return Err(Error::Empty("dev corpus"));
    }
    let refs: Vec<Vec<u32>> = dev.pairs.iter().map(|p| p.target.ids().to_vec()).collect();
    let mut table = Vec::with_capacity(t_grid.len() * w_grid.len());
    for &temperature in t_grid {
        for &weight in w_grid {
            let cfg = DecodeConfig {
                temperature,
                weight,
                ..base.clone()
            };
            let hyps = if leave_one_out {
                decoder.decode_leave_one_out(dev, &cfg)?
            } else {
                decoder.decode_all(&dev.sources(), &cfg)?
            };
            let report = corpus_bleu(&hyps, &refs)?;
            table.push(GridCell {
                temperature,
                weight,
                bleu: report.bleu,
            });
        }
    }
    let best = table
        .iter()
        .cloned()
        .reduce(|best, c| {
            let key = |c: &GridCell| (c.weight, c.temperature);
            match c.bleu.total_cmp(&best.bleu) {
                std::cmp::Ordering::Greater => c,
                std::cmp::Ordering::Equal if key(&c).partial_cmp(&key(&best)) == Some(std::cmp::Ordering::Less) => c,
                _ => best,
            }
        })
        .unwrap();
    Ok(GridResult { best, table })
}

pub fn corpus_bleu(hyps: &[Hypothesis], refs: &[Vec<u32>]) -> Result<BleuReport> {
    let hyps: Vec<Vec<u32>> = hyps.iter().map(|h| h.tokens.clone()).collect();
    bleu(&hyps, refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{train_ivf, Datastore};
    use crate::model::{ModelDims, RefModel};
    use proptest::prelude::*;

    fn nb(value: u32, distance: f64) -> Neighbor {
        Neighbor {
            index: 0,
            distance,
            value,
            talk_id: 0,
        }
    }

    #[test]
    fn knn_distribution_closed_forms() {
        let p = knn_distribution(&[nb(4, 3.0)], 50.0, 6).unwrap().unwrap();
        assert_eq!(p[4], 1.0);
        let p = knn_distribution(&[nb(2, 0.1), nb(2, 7.0), nb(2, 70.0)], 10.0, 6).unwrap().unwrap();
        assert!((p[2] - 1.0).abs() < 1e-12);
        let t = 50.0;
        let p = knn_distribution(&[nb(0, 0.0), nb(1, t * 2f64.ln())], t, 3).unwrap().unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-9);
        assert!(knn_distribution(&[], t, 3).unwrap().is_none());
        assert!(knn_distribution(&[nb(9, 0.0)], t, 3).is_err());
    }

    #[test]
    fn interpolation_closed_forms() {
        let m = Distribution::new(vec![0.5, 0.5]).unwrap();
        let k = Distribution::new(vec![1.0, 0.0]).unwrap();
        let p = interpolate(&m, &k, 0.3).unwrap();
        assert!((p[0] - 0.65).abs() < 1e-12 && (p[1] - 0.35).abs() < 1e-12);
        assert_eq!(interpolate(&m, &k, 0.0).unwrap(), m);
        assert_eq!(interpolate(&m, &k, 1.0).unwrap(), k);
        assert!(interpolate(&m, &Distribution::uniform(3), 0.3).is_err());
    }

    #[test]
    fn fusion_closed_forms() {
        let p = Distribution::new(vec![0.8, 0.2]).unwrap();
        let lm = Distribution::new(vec![0.5, 0.5]).unwrap();
        let f = fuse_lm(&p, &lm, 1.0).unwrap();
        assert!((f[0] - 0.8).abs() < 1e-12);
        assert_eq!(fuse_lm(&p, &lm, 0.0).unwrap(), p);
        let skew = Distribution::new(vec![0.1, 0.6, 0.3]).unwrap();
        let f = fuse_lm(&Distribution::uniform(3), &skew, 1.0).unwrap();
        for i in 0..3 {
            assert!((f.probs()[i] - skew.probs()[i]).abs() < 1e-12);
        }
        assert!(fuse_lm(&p, &lm, -1.0).is_err());
    }

    fn model(seed: u64) -> RefModel {
        RefModel::new(ModelDims::new(14), seed).unwrap()
    }

    fn greedy(m: &RefModel, src: &Sentence, max_len: usize) -> Vec<u32> {
        let c = m.encode(src).unwrap();
        let mut state = m.initial_state();
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let step = m.step(&c, &state, prev).unwrap();
            let mut best = None;
            for (t, &p) in step.dist.probs().iter().enumerate() {
                if t as u32 == PAD || t as u32 == BOS {
                    continue;
                }
                if best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((t as u32, p));
                }
            }
            let tok = best.unwrap().0;
            if tok == EOS {
                break;
            }
            out.push(tok);
            state = step.state;
            prev = tok;
        }
        out
    }

    fn random_store(m: &RefModel) -> Datastore {
        let pairs = (0..6u32)
            .map(|i| {
                crate::corpus::SentencePair::new(
                    Sentence::new(vec![4 + i, 5 + i]),
                    Sentence::new(vec![6 + i, 4 + i, 7]),
                    "acl",
                    i % 3,
                )
                .unwrap()
            })
            .collect();
        Datastore::build(m, &ParallelCorpus::new("de", pairs)).unwrap()
    }

    #[test]
    fn zero_weight_beam_one_is_greedy() {
        let m = model(3);
        let ds = random_store(&m);
        let members = [Member::new(&m, Some(&ds))];
        let cfg = DecodeConfig { weight: 0.0, beam: 1, ..Default::default() };
        for src in [vec![4, 5], vec![9, 10, 11], vec![7]] {
            let src = Sentence::new(src);
            let h = beam_decode(&members, &src, &cfg, None).unwrap();
            assert_eq!(h.tokens, greedy(&m, &src, cfg.max_len_for(src.len())));
            let plain = beam_decode(&[Member::new(&m, None)], &src, &cfg, None).unwrap();
            assert_eq!(h, plain);
        }
    }

    #[test]
    fn self_ensemble_matches_single_model() {
        let m = model(5);
        let ds = random_store(&m);
        let single = [Member::new(&m, Some(&ds))];
        let double = [Member::new(&m, Some(&ds)), Member::new(&m, Some(&ds))];
        let cfg = DecodeConfig::default();
        for src in [vec![4, 5], vec![9, 10, 11]] {
            let src = Sentence::new(src);
            let a = beam_decode(&single, &src, &cfg, None).unwrap();
            let b = beam_decode(&double, &src, &cfg, None).unwrap();
            assert_eq!(a.tokens, b.tokens);
            assert!((a.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_errors() {
        let m = model(1);
        let members = [Member::new(&m, None)];
        let cfg = DecodeConfig::default();
        assert!(beam_decode(&members, &Sentence::new(vec![]), &cfg, None).is_err());
        let wrong = Datastore::new(3);
        let bad = [Member::new(&m, Some(&wrong))];
        assert!(matches!(
            beam_decode(&bad, &Sentence::new(vec![4]), &cfg, None),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad_cfg = DecodeConfig { weight: 1.5, ..Default::default() };
        assert!(beam_decode(&members, &Sentence::new(vec![4]), &bad_cfg, None).is_err());
        assert!(beam_decode(&[], &Sentence::new(vec![4]), &cfg, None).is_err());
    }

    #[test]
    fn exclusion_is_honored_and_logged() {
        let m = model(2);
        let mut ds = random_store(&m);
        let index = train_ivf(&ds, 4, 5, 0).unwrap().with_nprobe(2);
        for with_index in [false, true] {
            if with_index {
                ds.set_index(index.clone()).unwrap();
            }
            let members = [Member::new(&m, Some(&ds))];
            let log = RetrievalLog::new();
            let dec = Decoder::new(&members).with_log(Some(&log));
            let cfg = DecodeConfig { exclude_talk: Some(1), ..Default::default() };
            dec.decode(&Sentence::new(vec![5, 6]), &cfg).unwrap();
            assert!(log.queries() > 0);
            assert_eq!(log.retrieved_from(1), 0);
            assert!(log.retrieved_from(0) + log.retrieved_from(2) > 0);
        }
    }

    #[test]
    fn empty_retrieval_falls_back_to_model() {
        let m = model(2);
        let ds = random_store(&m);
        let only_talk = Datastore::from_parts(
            ds.dim(),
            ds.keys()[..ds.dim()].to_vec(),
            vec![ds.values()[0]],
            vec![7],
        )
        .unwrap();
        let src = Sentence::new(vec![4, 9]);
        let cfg = DecodeConfig { exclude_talk: Some(7), weight: 0.9, ..Default::default() };
        let a = beam_decode(&[Member::new(&m, Some(&only_talk))], &src, &cfg, None).unwrap();
        let b = beam_decode(&[Member::new(&m, None)], &src, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_decoding_is_order_stable() {
        let m = model(4);
        let ds = random_store(&m);
        let members = [Member::new(&m, Some(&ds))];
        let dec = Decoder::new(&members);
        let sources: Vec<Sentence> = (0..20u32).map(|i| Sentence::new(vec![4 + i % 9, 4 + (i * 5) % 9])).collect();
        let cfg = DecodeConfig::default();
        let batch = dec.decode_all(&sources, &cfg).unwrap();
        let serial: Vec<_> = sources.iter().map(|s| dec.decode(s, &cfg).unwrap()).collect();
        assert_eq!(batch, serial);
        assert_eq!(dec.decode_all(&sources, &cfg).unwrap(), batch);
    }

    #[test]
    fn grid_ties_prefer_smaller_weight_then_temperature() {
        let m = model(6);
        let ds = random_store(&m);
        let members = [Member::new(&m, Some(&ds))];
        let dev = ParallelCorpus::new(
            "de",
            vec![crate::corpus::SentencePair::new(Sentence::new(vec![4, 5]), Sentence::new(vec![6, 4, 7]), "acl", 0).unwrap()],
        );
        let dec = Decoder::new(&members);
        let res = grid_search(&dec, &dev, &[100.0, 10.0], &[0.0], &DecodeConfig::default(), false).unwrap();
        assert_eq!(res.table.len(), 2);
        assert_eq!(res.table[0].bleu, res.table[1].bleu);
        assert_eq!((res.best.temperature, res.best.weight), (10.0, 0.0));
        assert!(res.to_tsv().starts_with("T\tw\tBLEU\n100\t0\t"));
        assert!(grid_search(&dec, &dev, &[], &[0.1], &DecodeConfig::default(), false).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_stays_normalized(
            raw_m in prop::collection::vec(0.01f64..1.0, 5),
            raw_k in prop::collection::vec(0.0f64..1.0, 5),
        ) {
            let m = Distribution::from_weights(raw_m).unwrap();
            let k = match Distribution::from_weights(raw_k) {
                Ok(k) => k,
                Err(_) => Distribution::uniform(5),
            };
            for i in 0..100 {
                let w = i as f64 / 99.0;
                let p = interpolate(&m, &k, w).unwrap();
                prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn knn_distribution_shift_invariant(
            ds in prop::collection::vec((0u32..6, 0.0f64..200.0), 1..12),
            shift in 0.0f64..500.0,
            t in 1.0f64..100.0,
        ) {
            let a: Vec<Neighbor> = ds.iter().map(|&(v, d)| nb(v, d)).collect();
            let b: Vec<Neighbor> = ds.iter().map(|&(v, d)| nb(v, d + shift)).collect();
            let pa = knn_distribution(&a, t, 6).unwrap().unwrap();
            let pb = knn_distribution(&b, t, 6).unwrap().unwrap();
            for (x, y) in pa.probs().iter().zip(pb.probs()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn wider_beam_never_scores_lower(
            seed in 0u64..500,
            src in prop::collection::vec(4u32..14, 1..5),
            beam in 2usize..6,
            weight in prop::sample::select(vec![0.0, 0.3, 0.7]),
        ) {
            let m = model(seed);
            let ds = random_store(&m);
            let members = [Member::new(&m, Some(&ds))];
            let src = Sentence::new(src);
            let narrow = DecodeConfig { beam: 1, weight, ..Default::default() };
            let wide = DecodeConfig { beam, weight, ..Default::default() };
            let g = beam_decode(&members, &src, &narrow, None).unwrap();
            let b = beam_decode(&members, &src, &wide, None).unwrap();
            prop_assert!(b.score >= g.score - 1e-9);
            prop_assert_eq!(beam_decode(&members, &src, &wide, None).unwrap(), b);
        }
    }
}
