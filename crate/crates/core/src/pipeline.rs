//! Corpus-to-corpus augmentation and evaluation stages.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::Rng;
use serde::Serialize;

use crate::corpus::{is_punct_token, ParallelCorpus, SentencePair, TextPair};
use crate::decode::{corpus_bleu, DecodeConfig, Decoder, Hypothesis, Member, RetrievalLog};
use crate::error::{Error, Result};
use crate::model::StepModel;

#[derive(Debug, Clone, PartialEq)]
pub struct DiversifyConfig {
    pub rounds: usize,
    pub beam: usize,
    pub dedup: bool,
}

impl Default for DiversifyConfig {
    fn default() -> Self {
        DiversifyConfig {
            rounds: 1,
            beam: 4,
            dedup: true,
        }
    }
}

/// Unions the bitext with forward translations of its sources and backward
/// translations of its targets. Every synthetic pair keeps one original
/// side verbatim along with the original domain and talk id. Rounds reuse
/// the same two models, so with `dedup` on extra rounds add nothing.
pub fn diversify(
    bitext: &ParallelCorpus,
    forward: &dyn StepModel,
    backward: &dyn StepModel,
    cfg: &DiversifyConfig,
) -> Result<ParallelCorpus> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    let decode_cfg = DecodeConfig {
        beam: cfg.beam,
        weight: 0.0,
        ..Default::default()
    };
    let fwd_members = [Member::new(forward, None)];
    let bwd_members = [Member::new(backward, None)];
    let fwd = Decoder::new(&fwd_members).decode_all(&bitext.sources(), &decode_cfg)?;
    let bwd = Decoder::new(&bwd_members).decode_all(&bitext.targets(), &decode_cfg)?;

    let mut pairs = bitext.pairs.clone();
    for _ in 0..cfg.rounds {
        for ((orig, f), b) in bitext.pairs.iter().zip(&fwd).zip(&bwd) {
            if !f.tokens.is_empty() {
                pairs.push(SentencePair {
                    target: f.sentence(),
                    ..orig.clone()
                });
            }
            if !b.tokens.is_empty() {
                pairs.push(SentencePair {
                    source: b.sentence(),
                    ..orig.clone()
                });
            }
        }
    }
    if cfg.dedup {
        pairs = dedup_pairs(pairs);
    }
    Ok(ParallelCorpus::new(bitext.lang.clone(), pairs))
}

/// Drops later pairs whose (source, target) already occurred.
pub fn dedup_pairs(pairs: Vec<SentencePair>) -> Vec<SentencePair> {
    let mut seen = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.source.clone(), p.target.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub tau: f64,
    /// `(language, corpus size)`.
    pub sizes: Vec<(String, usize)>,
}

/// `p_l ∝ (D_l / Σ D)^(1/τ)`.
pub fn sample_weights(cfg: &SamplingConfig) -> Result<Vec<(String, f64)>> {
    if !(cfg.tau >= 1.0 && cfg.tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be >= 1, got {}", cfg.tau)));
    }
    if cfg.sizes.is_empty() || cfg.sizes.iter().any(|(_, n)| *n == 0) {
        return Err(Error::InvalidArgument("corpus sizes must be positive".into()));
    }
    let total: f64 = cfg.sizes.iter().map(|(_, n)| *n as f64).sum();
    let raw: Vec<f64> = cfg
        .sizes
        .iter()
        .map(|(_, n)| (*n as f64 / total).powf(1.0 / cfg.tau))
        .collect();
    let norm: f64 = raw.iter().sum();
    Ok(cfg
        .sizes
        .iter()
        .zip(raw)
        .map(|((lang, _), r)| (lang.clone(), r / norm))
        .collect())
}

/// Draws language indices according to [`sample_weights`].
pub struct TemperatureSampler {
    langs: Vec<String>,
    index: WeightedIndex<f64>,
}

impl TemperatureSampler {
    pub fn new(cfg: &SamplingConfig) -> Result<Self> {
        let weights = sample_weights(cfg)?;
        let index = WeightedIndex::new(weights.iter().map(|(_, w)| *w))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(TemperatureSampler {
            langs: weights.into_iter().map(|(l, _)| l).collect(),
            index,
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    pub fn lang(&self, i: usize) -> &str {
        &self.langs[i]
    }

    /// Draw counts per language over `n` samples.
    pub fn counts<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        let mut counts = vec![0; self.langs.len()];
        for _ in 0..n {
            counts[self.sample(rng)] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub max_ratio: f64,
    pub max_len: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_ratio: 3.0,
            max_len: 200,
        }
    }
}

/// Deduplicates, then drops over-long pairs and pairs whose length ratio
/// exceeds `max_ratio` in either direction.
pub fn filter(bitext: &ParallelCorpus, cfg: &FilterConfig) -> Result<ParallelCorpus> {
    if !(cfg.max_ratio > 1.0) {
        return Err(Error::InvalidArgument(format!("max_ratio must exceed 1, got {}", cfg.max_ratio)));
    }
    let keep = |p: &SentencePair| {
        let (s, t) = (p.source.len(), p.target.len());
        s <= cfg.max_len
            && t <= cfg.max_len
            && s as f64 <= cfg.max_ratio * t as f64
            && t as f64 <= cfg.max_ratio * s as f64
    };
    let pairs = dedup_pairs(bitext.pairs.clone()).into_iter().filter(keep).collect();
    Ok(ParallelCorpus::new(bitext.lang.clone(), pairs))
}

/// Lowercases every token and drops punctuation-only tokens.
pub fn corrupt_case_punct<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !is_punct_token(t))
        .map(str::to_lowercase)
        .collect()
}

/// Restoration training pairs: corrupted text as source, original as
/// target. Sentences that corrupt to nothing are skipped.
pub fn restoration_pairs(sentences: &[Vec<String>]) -> Vec<TextPair> {
    sentences
        .iter()
        .filter_map(|toks| {
            let corrupted = corrupt_case_punct(toks);
            (!corrupted.is_empty() && !toks.is_empty()).then(|| TextPair::new(corrupted.join(" "), toks.join(" ")))
        })
        .collect()
}

fn is_restored(token: &str) -> bool {
    is_punct_token(token) || token.chars().any(char::is_uppercase)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Token-level F1 over the tokens restoration is responsible for
/// (punctuation and tokens carrying uppercase), matched per sentence as
/// multisets.
pub fn restoration_f1<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<PrF1> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    let (mut matched, mut predicted, mut gold) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let mut pool: Vec<&str> = r.iter().map(AsRef::as_ref).filter(|t| is_restored(t)).collect();
        gold += pool.len();
        for t in h.iter().map(AsRef::as_ref).filter(|t| is_restored(t)) {
            predicted += 1;
            if let Some(pos) = pool.iter().position(|g| *g == t) {
                pool.swap_remove(pos);
                matched += 1;
            }
        }
    }
    let precision = if predicted == 0 { 0.0 } else { matched as f64 / predicted as f64 };
    let recall = if gold == 0 { 0.0 } else { matched as f64 / gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrF1 { precision, recall, f1 })
}

/// Appends copies of `extra` (cycling through it) until it makes up
/// `fraction` of the result.
pub fn upsample(base: &ParallelCorpus, extra: &ParallelCorpus, fraction: f64) -> Result<ParallelCorpus> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction must be in [0, 1), got {fraction}")));
    }
    if extra.is_empty() && fraction > 0.0 {
        return Err(Error::Empty("upsampling source"));
    }
    let copies = (fraction * base.len() as f64 / (1.0 - fraction)).round() as usize;
    let mut pairs = base.pairs.clone();
    pairs.extend(extra.pairs.iter().cycle().take(copies).cloned());
    Ok(ParallelCorpus::new(base.lang.clone(), pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TalkResult {
    pub talk_id: u32,
    pub sentences: usize,
    pub bleu_base: f64,
    pub bleu_knn: f64,
    pub delta: f64,
    /// Neighbors retrieved from this talk while decoding it.
    pub own_talk_retrievals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaveOneOutReport {
    pub talks: Vec<TalkResult>,
    pub bleu_base: f64,
    pub bleu_knn: f64,
    pub delta: f64,
    pub queries: u64,
    #[serde(skip)]
    pub hyps_base: Vec<Hypothesis>,
    #[serde(skip)]
    pub hyps_knn: Vec<Hypothesis>,
}

/// Decodes every talk twice: with retrieval over the other talks only and
/// with retrieval off.
pub fn leave_one_out_eval(decoder: &Decoder<'_>, talkset: &ParallelCorpus, cfg: &DecodeConfig) -> Result<LeaveOneOutReport> {
    let talk_ids = talkset.talk_ids();
    if talk_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!("leave-one-out needs at least 2 talks, found {}", talk_ids.len())));
    }
    let mut hyps_base = vec![None; talkset.len()];
    let mut hyps_knn = vec![None; talkset.len()];
    let mut talks = Vec::with_capacity(talk_ids.len());
    let mut queries = 0;
    let base_cfg = cfg.without_retrieval();
    let plain = Decoder { log: None, ..*decoder };
    for &talk in &talk_ids {
        let idx: Vec<usize> = (0..talkset.len()).filter(|&i| talkset.pairs[i].talk_id == talk).collect();
        let sources: Vec<_> = idx.iter().map(|&i| talkset.pairs[i].source.clone()).collect();
        let refs: Vec<Vec<u32>> = idx.iter().map(|&i| talkset.pairs[i].target.ids().to_vec()).collect();
        let log = RetrievalLog::new();
        let knn_cfg = DecodeConfig {
            exclude_talk: Some(talk),
            ..cfg.clone()
        };
        let knn = Decoder { log: Some(&log), ..*decoder }.decode_all(&sources, &knn_cfg)?;
        let base = plain.decode_all(&sources, &base_cfg)?;
        let bleu_knn = corpus_bleu(&knn, &refs)?.bleu;
        let bleu_base = corpus_bleu(&base, &refs)?.bleu;
        queries += log.queries();
        talks.push(TalkResult {
            talk_id: talk,
            sentences: idx.len(),
            bleu_base,
            bleu_knn,
            delta: bleu_knn - bleu_base,
            own_talk_retrievals: log.retrieved_from(talk),
        });
        for (j, &i) in idx.iter().enumerate() {
            hyps_knn[i] = Some(knn[j].clone());
            hyps_base[i] = Some(base[j].clone());
        }
    }
    let hyps_base: Vec<Hypothesis> = hyps_base.into_iter().map(Option::unwrap).collect();
    let hyps_knn: Vec<Hypothesis> = hyps_knn.into_iter().map(Option::unwrap).collect();
    let refs: Vec<Vec<u32>> = talkset.pairs.iter().map(|p| p.target.ids().to_vec()).collect();
    let bleu_base = corpus_bleu(&hyps_base, &refs)?.bleu;
    let bleu_knn = corpus_bleu(&hyps_knn, &refs)?.bleu;
    Ok(LeaveOneOutReport {
        talks,
        bleu_base,
        bleu_knn,
        delta: bleu_knn - bleu_base,
        queries,
        hyps_base,
        hyps_knn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Sentence, BOS, EOS};
    use crate::datastore::Datastore;
    use crate::dist::Distribution;
    use crate::model::StepOutput;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Emits a fixed token sequence per source, looked up by the source's
    /// first id: a stand-in for a perfectly trained model.
    struct Scripted {
        vocab: usize,
        outputs: Vec<(u32, Vec<u32>)>,
    }

    impl StepModel for Scripted {
        fn hidden_dim(&self) -> usize {
            2
        }
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn encode(&self, source: &Sentence) -> Result<Vec<f64>> {
            let first = source.ids()[0];
            let i = self.outputs.iter().position(|(k, _)| *k == first).unwrap_or(0);
            Ok(vec![i as f64])
        }
        fn initial_state(&self) -> Vec<f64> {
            vec![0.0, 0.0]
        }
        fn step(&self, context: &[f64], state: &[f64], prev: u32) -> Result<StepOutput> {
            let pos = if prev == BOS { 0 } else { state[1] as usize + 1 };
            let out = &self.outputs[context[0] as usize].1;
            let next = out.get(pos).copied().unwrap_or(EOS);
            let mut w = vec![0.01; self.vocab];
            w[next as usize] = 10.0;
            let state = vec![context[0], pos as f64];
            Ok(StepOutput { hidden: state.clone(), dist: Distribution::from_weights(w).unwrap(), state })
        }
    }

    fn pair(src: &[u32], tgt: &[u32], talk: u32) -> SentencePair {
        SentencePair::new(Sentence::new(src.to_vec()), Sentence::new(tgt.to_vec()), "acl", talk).unwrap()
    }

    fn toy_bitext() -> ParallelCorpus {
        ParallelCorpus::new("de", (0..10u32).map(|i| pair(&[4 + i, 20], &[30 + i, 31], i % 2)).collect())
    }

    #[test]
    fn perfect_models_add_nothing() {
        let bitext = toy_bitext();
        let fwd = Scripted { vocab: 50, outputs: bitext.pairs.iter().map(|p| (p.source.ids()[0], p.target.ids().to_vec())).collect() };
        let bwd = Scripted { vocab: 50, outputs: bitext.pairs.iter().map(|p| (p.target.ids()[0], p.source.ids().to_vec())).collect() };
        let out = diversify(&bitext, &fwd, &bwd, &DiversifyConfig::default()).unwrap();
        assert_eq!(out, bitext);
    }

    #[test]
    fn imperfect_models_keep_one_side() {
        let bitext = toy_bitext();
        let fwd = Scripted { vocab: 50, outputs: bitext.pairs.iter().map(|p| (p.source.ids()[0], vec![40, p.target.ids()[0]])).collect() };
        let bwd = Scripted { vocab: 50, outputs: bitext.pairs.iter().map(|p| (p.target.ids()[0], vec![p.source.ids()[0]])).collect() };
        let out = diversify(&bitext, &fwd, &bwd, &DiversifyConfig::default()).unwrap();
        assert!((10..=30).contains(&out.len()));
        assert_eq!(out.len(), 30);
        assert_eq!(&out.pairs[..10], &bitext.pairs[..]);
        let sources: HashSet<_> = bitext.sources().into_iter().collect();
        let targets: HashSet<_> = bitext.targets().into_iter().collect();
        for p in &out.pairs {
            assert!(sources.contains(&p.source) || targets.contains(&p.target));
            let orig = bitext.pairs.iter().find(|o| o.source == p.source || o.target == p.target).unwrap();
            assert_eq!((p.talk_id, &p.domain), (orig.talk_id, &orig.domain));
        }
        let twice = diversify(&bitext, &fwd, &bwd, &DiversifyConfig { rounds: 2, ..Default::default() }).unwrap();
        assert_eq!(twice, out);
        let raw = diversify(&bitext, &fwd, &bwd, &DiversifyConfig { dedup: false, ..Default::default() }).unwrap();
        assert_eq!(raw.len(), 30);
    }

    #[test]
    fn temperature_weights() {
        let cfg = |tau| SamplingConfig { tau, sizes: vec![("de".into(), 4), ("ja".into(), 1)] };
        let w = sample_weights(&cfg(1.0)).unwrap();
        assert!((w[0].1 - 0.8).abs() < 1e-12 && (w[1].1 - 0.2).abs() < 1e-12);
        let w = sample_weights(&cfg(2.0)).unwrap();
        assert!((w[0].1 - 2.0 / 3.0).abs() < 1e-12 && (w[1].1 - 1.0 / 3.0).abs() < 1e-12);
        let equal = SamplingConfig { tau: 5.0, sizes: vec![("a".into(), 7), ("b".into(), 7), ("c".into(), 7)] };
        assert!(sample_weights(&equal).unwrap().iter().all(|(_, p)| (p - 1.0 / 3.0).abs() < 1e-12));
        assert!(sample_weights(&cfg(0.5)).is_err());
        assert!(sample_weights(&SamplingConfig { tau: 2.0, sizes: vec![("a".into(), 0)] }).is_err());

        let mut prev_ratio = f64::INFINITY;
        for tau in [1.0, 1.5, 2.0, 5.0, 10.0] {
            let w = sample_weights(&SamplingConfig { tau, sizes: vec![("a".into(), 100), ("b".into(), 10), ("c".into(), 1)] }).unwrap();
            assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            let ratio = w[0].1 / w[2].1;
            assert!(ratio < prev_ratio);
            prev_ratio = ratio;
        }
    }

    #[test]
    fn empirical_sampling_matches_weights() {
        let cfg = SamplingConfig { tau: 5.0, sizes: vec![("de".into(), 4000), ("ja".into(), 250), ("zh".into(), 1000)] };
        let sampler = TemperatureSampler::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let counts = sampler.counts(&mut rng, 100_000);
        for ((_, p), c) in sample_weights(&cfg).unwrap().iter().zip(counts) {
            assert!((c as f64 / 100_000.0 - p).abs() < 0.01);
        }
    }

    #[test]
    fn filter_cases() {
        let clean = toy_bitext();
        assert_eq!(filter(&clean, &FilterConfig::default()).unwrap(), clean);
        let skewed = ParallelCorpus::new("de", vec![pair(&[4], &[5; 10], 0), pair(&[4, 5], &[6, 7], 0)]);
        assert_eq!(filter(&skewed, &FilterConfig::default()).unwrap().len(), 1);
        let mut doubled = clean.clone();
        doubled.pairs.extend(clean.pairs.iter().cloned());
        let once = filter(&doubled, &FilterConfig::default()).unwrap();
        assert_eq!(once.len(), clean.len());
        assert_eq!(filter(&once, &FilterConfig::default()).unwrap(), once);
        let long = ParallelCorpus::new("de", vec![pair(&[4; 6], &[5; 6], 0)]);
        assert!(filter(&long, &FilterConfig { max_len: 5, ..Default::default() }).unwrap().is_empty());
        assert!(filter(&clean, &FilterConfig { max_ratio: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn corruption_cases() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(corrupt_case_punct(&toks(&["Hello", ",", "world", "."])), toks(&["hello", "world"]));
        assert_eq!(corrupt_case_punct(&toks(&["Already", "clean"])), toks(&["already", "clean"]));
        assert_eq!(corrupt_case_punct(&toks(&["¿", "Qué", "?", "«", "»"])), toks(&["qué"]));
        let pairs = restoration_pairs(&[toks(&["Hi", "!"]), toks(&["."])]);
        assert_eq!(pairs, vec![TextPair::new("hi", "Hi !")]);
    }

    #[test]
    fn restoration_f1_counts_only_restored_tokens() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let r = restoration_f1(&[toks(&["Hello", "world", "."])], &[toks(&["Hello", ",", "world", "."])]).unwrap();
        assert_eq!(r.precision, 1.0);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn upsampling_hits_fraction() {
        let base = toy_bitext();
        let extra = ParallelCorpus::new("de", vec![pair(&[9], &[9], 3), pair(&[8], &[8], 3)]);
        let out = upsample(&base, &extra, 0.6).unwrap();
        assert_eq!(out.len(), 25);
        assert_eq!(out.pairs.iter().filter(|p| p.talk_id == 3).count(), 15);
        assert_eq!(upsample(&base, &extra, 0.0).unwrap(), base);
        assert!(upsample(&base, &extra, 1.0).is_err());
    }

    #[test]
    fn leave_one_out_with_zero_weight_has_zero_delta() {
        let bitext = toy_bitext();
        let model = Scripted { vocab: 50, outputs: bitext.pairs.iter().map(|p| (p.source.ids()[0], vec![31])).collect() };
        let ds = Datastore::build(&model, &bitext).unwrap();
        let members = [Member::new(&model, Some(&ds))];
        let dec = Decoder::new(&members);
        let cfg = DecodeConfig { weight: 0.0, ..Default::default() };
        let report = leave_one_out_eval(&dec, &bitext, &cfg).unwrap();
        assert!(report.talks.iter().all(|t| t.delta == 0.0));
        assert_eq!(report.queries, 0);

        let report = leave_one_out_eval(&dec, &bitext, &DecodeConfig::default()).unwrap();
        assert!(report.queries > 0);
        assert!(report.talks.iter().all(|t| t.own_talk_retrievals == 0));
        assert_eq!(report.talks.len(), 2);

        let single = bitext.talk(0);
        assert!(leave_one_out_eval(&dec, &single, &cfg).is_err());
    }
}
