//! Seeded toy languages and benchmark builders.
//!
//! Every generator is a pure function of its config, seed included. The
//! toy languages are slot grammars (`DET ADJ NOUN VERB OBJ .`) translated
//! word by word, so a small recurrent model can learn them in seconds while
//! ambiguous object words keep the model genuinely uncertain.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{tokenize, Sentence, TextPair, BOS, EOS};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::model::{StepModel, StepOutput};

const SRC_SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "su", "ta", "ri", "po", "ve", "da", "gu", "zi"];
const TGT_SYLLABLES: [&str; 12] = ["bor", "fen", "gal", "hut", "jor", "kel", "mur", "nop", "sar", "tiv", "wex", "yad"];
pub const TALK_DOMAIN: &str = "talk";

/// Draws pseudo-words from a syllable inventory, never repeating one.
struct WordMint<'a> {
    syllables: &'a [&'a str],
    used: HashSet<String>,
}

impl<'a> WordMint<'a> {
    fn new(syllables: &'a [&'a str]) -> Self {
        WordMint {
            syllables,
            used: HashSet::new(),
        }
    }

    fn mint<R: Rng>(&mut self, rng: &mut R, syllables: usize) -> String {
        assert!(
            (self.used.len() as f64) < 0.5 * (self.syllables.len() as f64).powi(syllables as i32),
            "syllable inventory exhausted"
        );
        loop {
            let w: String = (0..syllables)
                .map(|_| *self.syllables.choose(rng).expect("non-empty inventory"))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    source: String,
    /// General-domain translations, drawn uniformly.
    senses: Vec<String>,
    /// In-domain translation for ambiguous words.
    term: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainShiftConfig {
    pub seed: u64,
    pub general_pairs: usize,
    pub talks: usize,
    pub pairs_per_talk: usize,
    /// Sense counts of the ambiguous object words, one entry per word.
    pub ambiguous_senses: Vec<usize>,
    /// Unambiguous words per slot `[DET, ADJ, NOUN, VERB, OBJ]`.
    pub slot_sizes: [usize; 5],
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        DomainShiftConfig {
            seed: 7,
            general_pairs: 3000,
            talks: 5,
            pairs_per_talk: 20,
            ambiguous_senses: vec![5, 5, 5, 5, 2, 2, 2, 2],
            slot_sizes: [3, 6, 8, 6, 8],
        }
    }
}

/// The toy language behind [`DomainShiftBenchmark`].
#[derive(Debug, Clone, PartialEq)]
pub struct SlotLanguage {
    slots: Vec<Vec<Entry>>,
    /// Index of the first ambiguous entry in the object slot.
    first_ambiguous: usize,
}

impl SlotLanguage {
    pub fn generate(cfg: &DomainShiftConfig) -> Result<Self> {
        if cfg.ambiguous_senses.is_empty() || cfg.ambiguous_senses.contains(&0) {
            return Err(Error::InvalidArgument("need at least one ambiguous word with senses".into()));
        }
        if cfg.slot_sizes.contains(&0) {
            return Err(Error::InvalidArgument("every slot needs a word".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut src = WordMint::new(&SRC_SYLLABLES);
        let mut tgt = WordMint::new(&TGT_SYLLABLES);
        let mut slots: Vec<Vec<Entry>> = cfg
            .slot_sizes
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| Entry {
                        source: src.mint(&mut rng, 2),
                        senses: vec![tgt.mint(&mut rng, 2)],
                        term: None,
                    })
                    .collect()
            })
            .collect();
        let first_ambiguous = slots[4].len();
        for &n in &cfg.ambiguous_senses {
            let senses = (0..n).map(|_| tgt.mint(&mut rng, 2)).collect();
            let term = capitalize(&tgt.mint(&mut rng, 3));
            slots[4].push(Entry {
                source: src.mint(&mut rng, 2),
                senses,
                term: Some(term),
            });
        }
        Ok(SlotLanguage { slots, first_ambiguous })
    }

    /// Domain translations of the ambiguous words.
    pub fn terms(&self) -> Vec<String> {
        self.slots[4].iter().filter_map(|e| e.term.clone()).collect()
    }

    /// Source words that are ambiguous, with their sense counts.
    pub fn ambiguous_words(&self) -> Vec<(String, usize)> {
        self.slots[4][self.first_ambiguous..]
            .iter()
            .map(|e| (e.source.clone(), e.senses.len()))
            .collect()
    }

    fn sentence<R: Rng>(&self, rng: &mut R, obj: &Entry, translate_obj: impl Fn(&Entry, &mut R) -> String) -> TextPair {
        let mut s = Vec::with_capacity(6);
        let mut t = Vec::with_capacity(6);
        for slot in &self.slots[..4] {
            let e = slot.choose(rng).expect("non-empty slot");
            s.push(e.source.clone());
            t.push(e.senses.choose(rng).expect("non-empty senses").clone());
        }
        s.push(obj.source.clone());
        t.push(translate_obj(obj, rng));
        s.push(".".into());
        t.push(".".into());
        TextPair::new(s.join(" "), t.join(" "))
    }

    /// General-domain pair: any object word, senses drawn uniformly.
    pub fn general_pair<R: Rng>(&self, rng: &mut R) -> TextPair {
        let obj = self.slots[4].choose(rng).expect("non-empty slot");
        self.sentence(rng, obj, |e, r| e.senses.choose(r).expect("non-empty senses").clone())
    }

    /// In-domain pair: an ambiguous object word rendered as its term.
    pub fn talk_pair<R: Rng>(&self, rng: &mut R) -> TextPair {
        let obj = self.slots[4][self.first_ambiguous..].choose(rng).expect("non-empty slot");
        self.sentence(rng, obj, |e, _| e.term.clone().expect("ambiguous entry"))
    }

    /// Pair where every ambiguous word takes its first sense.
    pub fn fixed_sense_pair<R: Rng>(&self, rng: &mut R) -> TextPair {
        let obj = self.slots[4].choose(rng).expect("non-empty slot");
        self.sentence(rng, obj, |e, _| e.senses[0].clone())
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// A general corpus plus talks whose ambiguous words translate to a
/// terminology lexicon that never appears in the general corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShiftBenchmark {
    pub language: SlotLanguage,
    pub general: Vec<TextPair>,
    /// Talk ids run from 1 to `cfg.talks`.
    pub talks: Vec<TextPair>,
    pub terms: Vec<String>,
}

impl DomainShiftBenchmark {
    pub fn generate(cfg: &DomainShiftConfig) -> Result<Self> {
        if cfg.talks < 2 || cfg.pairs_per_talk == 0 {
            return Err(Error::InvalidArgument("need at least 2 non-empty talks".into()));
        }
        let language = SlotLanguage::generate(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let general = (0..cfg.general_pairs).map(|_| language.general_pair(&mut rng)).collect();
        let talks = (1..=cfg.talks as u32)
            .flat_map(|talk| (0..cfg.pairs_per_talk).map(move |_| talk))
            .map(|talk| language.talk_pair(&mut rng).with_talk(TALK_DOMAIN, talk))
            .collect();
        let terms = language.terms();
        Ok(DomainShiftBenchmark { language, general, talks, terms })
    }

    /// Every token on either side of either split.
    pub fn all_token_lists(&self) -> Vec<Vec<String>> {
        self.general
            .iter()
            .chain(&self.talks)
            .flat_map(|p| [tokenize(&p.source), tokenize(&p.target)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub seed: u64,
    pub base_pairs: usize,
    pub bitext_pairs: usize,
    pub dev_pairs: usize,
    pub language: DomainShiftConfig,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            seed: 11,
            base_pairs: 3000,
            bitext_pairs: 400,
            dev_pairs: 100,
            language: DomainShiftConfig::default(),
        }
    }
}

/// Base-training data plus a new-domain bitext (and held-out dev set) in
/// which every ambiguous word has one fixed translation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationBenchmark {
    pub base: Vec<TextPair>,
    pub bitext: Vec<TextPair>,
    pub dev: Vec<TextPair>,
}

impl AdaptationBenchmark {
    pub fn generate(cfg: &AdaptationConfig) -> Result<Self> {
        let language = SlotLanguage::generate(&cfg.language)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = (0..cfg.base_pairs).map(|_| language.general_pair(&mut rng)).collect();
        let mut seen = HashSet::new();
        let mut fresh = Vec::with_capacity(cfg.bitext_pairs + cfg.dev_pairs);
        let mut attempts = 0;
        while fresh.len() < cfg.bitext_pairs + cfg.dev_pairs {
            attempts += 1;
            if attempts > 100 * (cfg.bitext_pairs + cfg.dev_pairs + 1) {
                return Err(Error::InvalidArgument("toy language too small for the requested sizes".into()));
            }
            let p = language.fixed_sense_pair(&mut rng);
            if seen.insert(p.source.clone()) {
                fresh.push(p.with_talk("adapt", 0));
            }
        }
        let dev = fresh.split_off(cfg.bitext_pairs);
        Ok(AdaptationBenchmark { base, bitext: fresh, dev })
    }

    pub fn all_token_lists(&self) -> Vec<Vec<String>> {
        self.base
            .iter()
            .chain(&self.bitext)
            .chain(&self.dev)
            .flat_map(|p| [tokenize(&p.source), tokenize(&p.target)])
            .collect()
    }
}

/// Fraction of reference term occurrences reproduced by the hypothesis,
/// clipped per sentence.
pub fn term_recall<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], terms: &[String]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    let terms: HashSet<&str> = terms.iter().map(String::as_str).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let mut avail: HashMap<&str, usize> = HashMap::new();
        for t in h.iter().map(AsRef::as_ref).filter(|t| terms.contains(t)) {
            *avail.entry(t).or_default() += 1;
        }
        for t in r.iter().map(AsRef::as_ref).filter(|t| terms.contains(t)) {
            total += 1;
            if let Some(c) = avail.get_mut(t).filter(|c| **c > 0) {
                *c -= 1;
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("term occurrences in references"));
    }
    Ok(hit as f64 / total as f64)
}

/// Random-token copy task: every target equals its source.
pub fn copy_pairs(seed: u64, n: usize, vocab_words: usize, len: std::ops::RangeInclusive<usize>) -> Vec<TextPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..vocab_words.max(1)).map(|i| format!("w{i}")).collect();
    (0..n)
        .map(|_| {
            let l = rng.random_range(len.clone()).max(1);
            let s: Vec<&str> = (0..l).map(|_| words.choose(&mut rng).expect("non-empty").as_str()).collect();
            let s = s.join(" ");
            TextPair::new(s.clone(), s)
        })
        .collect()
}

/// Cased, punctuated toy sentences for the restoration task. Casing and
/// punctuation are predictable from the words: the opener decides between
/// `?` and `.`, a conjunction is preceded by a comma, and names come from a
/// closed set.
pub fn restoration_sentences(seed: u64, n: usize) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mint = WordMint::new(&SRC_SYLLABLES);
    let questions: Vec<String> = (0..3).map(|_| mint.mint(&mut rng, 2)).collect();
    let openers: Vec<String> = (0..3).map(|_| mint.mint(&mut rng, 2)).collect();
    let conjunction = mint.mint(&mut rng, 2);
    let words: Vec<String> = (0..30).map(|_| mint.mint(&mut rng, 2)).collect();
    let names: Vec<String> = (0..6).map(|_| capitalize(&mint.mint(&mut rng, 3))).collect();
    let content = |rng: &mut ChaCha8Rng, count: usize, out: &mut Vec<String>| {
        for _ in 0..count {
            let pool = if rng.random_bool(0.2) { &names } else { &words };
            out.push(pool.choose(rng).expect("non-empty").clone());
        }
    };
    (0..n)
        .map(|_| {
            let question = rng.random_bool(0.3);
            let opener = if question { &questions } else { &openers };
            let mut toks = vec![capitalize(opener.choose(&mut rng).expect("non-empty"))];
            let count = rng.random_range(2..=4);
            content(&mut rng, count, &mut toks);
            if rng.random_bool(0.4) {
                toks.push(",".into());
                toks.push(conjunction.clone());
                let count = rng.random_range(1..=2);
                content(&mut rng, count, &mut toks);
            }
            toks.push(if question { "?" } else { "." }.into());
            toks
        })
        .collect()
}

/// An oracle that reproduces its source token by token, then stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyModel {
    pub vocab_size: usize,
}

impl StepModel for CopyModel {
    fn hidden_dim(&self) -> usize {
        1
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode(&self, source: &Sentence) -> Result<Vec<f64>> {
        Ok(source.ids().iter().map(|&t| t as f64).collect())
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![-1.0]
    }

    fn step(&self, context: &[f64], state: &[f64], prev: u32) -> Result<StepOutput> {
        let pos = if prev == BOS { 0.0 } else { state[0] + 1.0 };
        let next = context.get(pos as usize).map_or(EOS, |&t| t as u32);
        if next as usize >= self.vocab_size {
            return Err(Error::InvalidArgument(format!("token {next} outside vocabulary")));
        }
        let mut w = vec![1e-6; self.vocab_size];
        w[next as usize] = 1.0;
        Ok(StepOutput {
            hidden: vec![pos],
            dist: Distribution::from_weights(w)?,
            state: vec![pos],
        })
    }
}

/// Shuffles in place with a seeded generator.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let cfg = DomainShiftConfig::default();
        let a = DomainShiftBenchmark::generate(&cfg).unwrap();
        assert_eq!(a, DomainShiftBenchmark::generate(&cfg).unwrap());
        let b = DomainShiftBenchmark::generate(&DomainShiftConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_ne!(a.general, b.general);
    }

    #[test]
    fn terms_never_appear_in_general_data() {
        let b = DomainShiftBenchmark::generate(&DomainShiftConfig::default()).unwrap();
        let terms: HashSet<&str> = b.terms.iter().map(String::as_str).collect();
        assert_eq!(terms.len(), 8);
        for p in &b.general {
            assert!(tokenize(&p.target).iter().all(|t| !terms.contains(t.as_str())));
        }
        for p in &b.talks {
            assert_eq!(tokenize(&p.target).iter().filter(|t| terms.contains(t.as_str())).count(), 1);
            assert!((1..=5).contains(&p.talk_id));
        }
        let vocab: HashSet<String> = b.all_token_lists().into_iter().flatten().collect();
        assert!(vocab.len() < 200);
    }

    #[test]
    fn adaptation_splits_are_disjoint() {
        let b = AdaptationBenchmark::generate(&AdaptationConfig::default()).unwrap();
        assert_eq!((b.bitext.len(), b.dev.len()), (400, 100));
        let train: HashSet<_> = b.bitext.iter().map(|p| &p.source).collect();
        assert!(b.dev.iter().all(|p| !train.contains(&p.source)));
    }

    #[test]
    fn term_recall_clips() {
        let s = |v: &str| tokenize(v);
        let terms = vec!["Zor".to_string()];
        let r = term_recall(&[s("a Zor Zor"), s("b")], &[s("a Zor"), s("Zor b")], &terms).unwrap();
        assert_eq!(r, 0.5);
        assert!(term_recall(&[s("a")], &[s("a")], &terms).is_err());
    }

    #[test]
    fn copy_model_copies() {
        let m = CopyModel { vocab_size: 10 };
        let src = Sentence::new(vec![4, 5, 6]);
        let ctx = m.encode(&src).unwrap();
        let mut state = m.initial_state();
        let mut prev = BOS;
        let mut out = Vec::new();
        loop {
            let step = m.step(&ctx, &state, prev).unwrap();
            prev = step.dist.argmax();
            if prev == EOS {
                break;
            }
            out.push(prev);
            state = step.state;
        }
        assert_eq!(out, vec![4, 5, 6]);
    }

    #[test]
    fn beam_search_keeps_the_copy_past_early_eos_candidates() {
        let m = CopyModel { vocab_size: 16 };
        let members = [crate::decode::Member::new(&m, None)];
        let src = Sentence::new(vec![5, 7, 10, 14, 15, 11]);
        for beam in [1, 2, 4, 8] {
            let cfg = crate::decode::DecodeConfig { beam, weight: 0.0, ..Default::default() };
            let h = crate::decode::Decoder::new(&members).decode(&src, &cfg).unwrap();
            assert!(h.finished);
            assert_eq!(h.tokens, src.ids());
        }
    }

    #[test]
    fn restoration_sentences_carry_signal() {
        let sents = restoration_sentences(3, 50);
        assert!(sents.iter().all(|s| s[0].chars().next().unwrap().is_uppercase()));
        assert!(sents.iter().all(|s| [".", "?"].contains(&s.last().unwrap().as_str())));
        assert!(copy_pairs(1, 5, 10, 2..=4).iter().all(|p| p.source == p.target));
    }
}
