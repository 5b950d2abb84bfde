//! Vocabulary, tokenization and corpus containers.
//!
//! Text is split on whitespace and leading/trailing punctuation is detached
//! into single-character tokens. Corpora travel as UTF-8 TSV, one pair per
//! line: `source<TAB>target<TAB>domain<TAB>talk_id`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const DEFAULT_DOMAIN: &str = "general";

static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\p{P}$").unwrap());

/// True when `c` belongs to one of the Unicode punctuation categories (P*).
pub fn is_punct(c: char) -> bool {
    let mut buf = [0u8; 4];
    PUNCT.is_match(c.encode_utf8(&mut buf))
}

/// True for a non-empty token made only of punctuation characters.
pub fn is_punct_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct)
}

/// Splits on whitespace, then peels punctuation off both ends of every word.
/// Casing is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        while start < chars.len() && is_punct(chars[start]) {
            start += 1;
        }
        if start == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let mut end = chars.len();
        while end > start && is_punct(chars[end - 1]) {
            end -= 1;
        }
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        out.push(chars[start..end].iter().collect());
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

/// Token ids of one side of a pair. BOS/EOS are never stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Sentence(pub Vec<u32>);

impl Sentence {
    pub fn new(ids: Vec<u32>) -> Self {
        Sentence(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<u32>> for Sentence {
    fn from(ids: Vec<u32>) -> Self {
        Sentence(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list. The reserved tokens
    /// are always placed first; duplicates of them in `tokens` are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            let t = t.into();
            if RESERVED.contains(&t.as_str()) {
                continue;
            }
            all.push(t);
        }
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    /// Reserved ids first, then the most frequent tokens (ties lexicographic)
    /// until `max_size` entries are filled.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "max_size must be at least {}, got {max_size}",
                RESERVED.len() + 1
            )));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for sent in corpus {
            for tok in sent {
                let tok = tok.as_ref();
                if !RESERVED.contains(&tok) {
                    *freq.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK as usize])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Sentence {
        Sentence(tokens.iter().map(|t| self.id(t.as_ref())).collect())
    }

    pub fn encode_text(&self, text: &str) -> Sentence {
        self.encode(&tokenize(text))
    }

    pub fn decode(&self, sentence: &Sentence) -> Vec<String> {
        sentence.0.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn decode_text(&self, sentence: &Sentence) -> String {
        self.decode(sentence).join(" ")
    }

    /// One token per line.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i < RESERVED.len() {
                if line != RESERVED[i] {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected reserved token {:?}", RESERVED[i]),
                    });
                }
                continue;
            }
            tokens.push(line);
        }
        Self::from_tokens(tokens)
    }
}

/// One aligned pair. Both sides are non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Sentence,
    pub target: Sentence,
    pub domain: String,
    pub talk_id: u32,
}

impl SentencePair {
    pub fn new(source: Sentence, target: Sentence, domain: impl Into<String>, talk_id: u32) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Empty("sentence pair side"));
        }
        Ok(SentencePair {
            source,
            target,
            domain: domain.into(),
            talk_id,
        })
    }
}

/// Pairs of one language direction; `lang` names the target language and
/// selects the adapter used for it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub lang: String,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(lang: impl Into<String>, pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus {
            lang: lang.into(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_text(pairs: &[TextPair], vocab: &Vocab, lang: impl Into<String>) -> Result<Self> {
        let pairs = pairs
            .iter()
            .map(|p| {
                SentencePair::new(
                    vocab.encode_text(&p.source),
                    vocab.encode_text(&p.target),
                    p.domain.clone(),
                    p.talk_id,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParallelCorpus::new(lang, pairs))
    }

    pub fn to_text(&self, vocab: &Vocab) -> Vec<TextPair> {
        self.pairs
            .iter()
            .map(|p| TextPair {
                source: vocab.decode_text(&p.source),
                target: vocab.decode_text(&p.target),
                domain: p.domain.clone(),
                talk_id: p.talk_id,
            })
            .collect()
    }

    /// Sorted distinct talk ids.
    pub fn talk_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.pairs.iter().map(|p| p.talk_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// True when the talk ids cover a contiguous range.
    pub fn is_talk_set(&self) -> bool {
        let ids = self.talk_ids();
        match (ids.first(), ids.last()) {
            (Some(&lo), Some(&hi)) => (hi - lo) as usize + 1 == ids.len(),
            _ => false,
        }
    }

    pub fn talk(&self, talk_id: u32) -> ParallelCorpus {
        ParallelCorpus::new(
            self.lang.clone(),
            self.pairs.iter().filter(|p| p.talk_id == talk_id).cloned().collect(),
        )
    }

    pub fn sources(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }

    /// The same pairs with source and target swapped.
    pub fn reversed(&self) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .map(|p| SentencePair {
                source: p.target.clone(),
                target: p.source.clone(),
                ..p.clone()
            })
            .collect();
        ParallelCorpus::new(self.lang.clone(), pairs)
    }

    /// Concatenation, keeping `self`'s language tag.
    pub fn concat(&self, other: &ParallelCorpus) -> ParallelCorpus {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        ParallelCorpus::new(self.lang.clone(), pairs)
    }
}

/// A raw, untokenized TSV row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextPair {
    pub source: String,
    pub target: String,
    pub domain: String,
    pub talk_id: u32,
}

impl TextPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        TextPair {
            source: source.into(),
            target: target.into(),
            domain: DEFAULT_DOMAIN.to_string(),
            talk_id: 0,
        }
    }

    pub fn with_talk(mut self, domain: impl Into<String>, talk_id: u32) -> Self {
        self.domain = domain.into();
        self.talk_id = talk_id;
        self
    }
}

impl fmt::Display for TextPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.source, self.target, self.domain, self.talk_id)
    }
}

/// Parses the TSV corpus format. Blank lines are skipped.
pub fn read_tsv<R: BufRead>(reader: R) -> Result<Vec<TextPair>> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected at least 2 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields.len() > 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected at most 4 fields, found {}", fields.len()),
            });
        }
        let domain = match fields.get(2) {
            Some(d) if !d.is_empty() => d.to_string(),
            _ => DEFAULT_DOMAIN.to_string(),
        };
        let talk_id = match fields.get(3) {
            Some(t) if !t.is_empty() => t.trim().parse::<u32>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad talk_id {t:?}: {e}"),
            })?,
            _ => 0,
        };
        pairs.push(TextPair {
            source: fields[0].to_string(),
            target: fields[1].to_string(),
            domain,
            talk_id,
        });
    }
    Ok(pairs)
}

pub fn write_tsv<W: Write>(mut w: W, pairs: &[TextPair]) -> Result<()> {
    for p in pairs {
        writeln!(w, "{p}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    // Walks characters and collapses whitespace runs; used to cross-check the
    // splitter on punctuation-free text.
    fn whitespace_walk(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for c in text.chars() {
            if c.is_whitespace() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        assert_eq!(tokenize("Hello, world."), toks(&["Hello", ",", "world", "."]));
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("(quoted)!"), toks(&["(", "quoted", ")", "!"]));
        assert_eq!(tokenize("..."), toks(&[".", ".", "."]));
        assert_eq!(tokenize("don't"), toks(&["don't"]));
        assert_eq!(tokenize("«Grüße»"), toks(&["«", "Grüße", "»"]));
    }

    #[test]
    fn tokenize_collapses_whitespace() {
        for text in ["a  b", " a\tb \n c ", "x", "   ", "lorem ipsum  dolor\t\tsit"] {
            assert_eq!(tokenize(text), whitespace_walk(text), "{text:?}");
        }
    }

    #[test]
    fn vocab_frequency_order() {
        let corpus = vec![toks(&["a", "b", "a", "a"])];
        let v = Vocab::build(&corpus, 6).unwrap();
        assert_eq!(v.tokens(), &toks(&["<pad>", "<s>", "</s>", "<unk>", "a", "b"])[..]);
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        let corpus = vec![toks(&["y", "x", "y", "x"])];
        let v = Vocab::build(&corpus, 10).unwrap();
        assert_eq!(v.id("x"), 4);
        assert_eq!(v.id("y"), 5);
    }

    #[test]
    fn vocab_truncates_to_max_size() {
        let corpus: Vec<Vec<String>> = (0..100).map(|i| vec![format!("w{i}")]).collect();
        let v = Vocab::build(&corpus, 10).unwrap();
        assert_eq!(v.len(), 10);
        assert!(Vocab::build(&corpus, 4).is_err());
    }

    #[test]
    fn vocab_roundtrip_and_unknowns() {
        let corpus = vec![toks(&["the", "cat", "sat"])];
        let v = Vocab::build(&corpus, 20).unwrap();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i as u32);
            assert_eq!(v.token(i as u32), t);
        }
        assert_eq!(v.id("dog"), UNK);
        let s = v.encode(&toks(&["the", "cat"]));
        assert_eq!(v.decode(&s), toks(&["the", "cat"]));

        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = Vocab::read(&buf[..]).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.id("sat"), v.id("sat"));
    }

    #[test]
    fn tsv_defaults_and_errors() {
        let text = "a b\tA B\n\nc\tC\tacl\t3\n";
        let pairs = read_tsv(text.as_bytes()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].domain, "general");
        assert_eq!(pairs[0].talk_id, 0);
        assert_eq!(pairs[1].domain, "acl");
        assert_eq!(pairs[1].talk_id, 3);

        match read_tsv("ok\tOK\nbroken\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(read_tsv("a\tb\tc\tnope\n".as_bytes()).is_err());

        let mut out = Vec::new();
        write_tsv(&mut out, &pairs).unwrap();
        assert_eq!(read_tsv(&out[..]).unwrap(), pairs);
    }

    #[test]
    fn talk_set_detection() {
        let v = Vocab::from_tokens(["a"]).unwrap();
        let mk = |talk| TextPair::new("a", "a").with_talk("acl", talk);
        let c = ParallelCorpus::from_text(&[mk(0), mk(1), mk(2)], &v, "de").unwrap();
        assert!(c.is_talk_set());
        let c = ParallelCorpus::from_text(&[mk(0), mk(2)], &v, "de").unwrap();
        assert!(!c.is_talk_set());
        assert!(ParallelCorpus::from_text(&[TextPair::new("", "a")], &v, "de").is_err());
    }
}
