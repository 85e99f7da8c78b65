//! Frequency-ranked keyword/phrase vocabulary built from captions.
//!
//! Candidate rules: lowercase, split on anything that is not alphanumeric,
//! drop stopwords (see `data/stopwords_en_v1.txt`) and all-digit tokens, emit
//! the surviving unigrams followed by every bigram whose two members were
//! adjacent in the caption and both survived.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use thiserror::Error;

use crate::par;

pub const DEFAULT_VOCAB_SIZE: usize = 3000;

const STOPWORDS_V1: &str = include_str!("../data/stopwords_en_v1.txt");

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus produced no candidate phrases")]
    EmptyCorpus,
    #[error("vocabulary size must be at least 1")]
    ZeroSize,
    #[error("line {line}: expected `phrase<TAB>count`")]
    Malformed { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_V1
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

fn is_pure_digits(tok: &str) -> bool {
    tok.chars().all(char::is_numeric)
}

pub fn extract_candidates(caption: &str) -> Vec<String> {
    let stop = stopwords();
    let lowered = caption.to_lowercase();
    let kept: Vec<Option<&str>> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (!stop.contains(t) && !is_pure_digits(t)).then_some(t))
        .collect();
    let mut out: Vec<String> = kept.iter().flatten().map(|t| t.to_string()).collect();
    for pair in kept.windows(2) {
        if let [Some(a), Some(b)] = pair {
            out.push(format!("{a} {b}"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub phrases: Vec<String>,
    pub counts: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.phrases.iter().map(String::as_str).zip(self.counts.iter().copied())
    }

    /// One `phrase<TAB>count` line per entry, in rank order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (p, c) in self.iter() {
            writeln!(w, "{p}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, VocabError> {
        let mut phrases = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (p, c) = line
                .rsplit_once('\t')
                .ok_or(VocabError::Malformed { line: i + 1 })?;
            let c = c.parse().map_err(|_| VocabError::Malformed { line: i + 1 })?;
            phrases.push(p.to_string());
            counts.push(c);
        }
        Ok(Vocabulary { phrases, counts })
    }
}

/// Mergeable phrase counts.
#[derive(Debug, Clone, Default)]
pub struct PhraseCounts(HashMap<String, u64>);

impl PhraseCounts {
    pub fn add_caption(&mut self, caption: &str) {
        for c in extract_candidates(caption) {
            *self.0.entry(c).or_insert(0) += 1;
        }
    }

    pub fn merge(mut self, other: PhraseCounts) -> PhraseCounts {
        let (mut big, small) = if self.0.len() >= other.0.len() {
            (std::mem::take(&mut self.0), other.0)
        } else {
            (other.0, std::mem::take(&mut self.0))
        };
        for (k, v) in small {
            *big.entry(k).or_insert(0) += v;
        }
        PhraseCounts(big)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Top `m` by count, ties broken by phrase.
    pub fn into_vocabulary(self, m: usize) -> Result<Vocabulary, VocabError> {
        if m == 0 {
            return Err(VocabError::ZeroSize);
        }
        if self.0.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut all: Vec<(String, u64)> = self.0.into_iter().collect();
        let order = |a: &(String, u64), b: &(String, u64)| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0));
        if m < all.len() {
            all.select_nth_unstable_by(m, order);
            all.truncate(m);
        }
        all.sort_unstable_by(order);
        let (phrases, counts) = all.into_iter().unzip();
        Ok(Vocabulary { phrases, counts })
    }
}

/// Counts candidates over all captions (sharded across workers when the
/// `parallel` feature is on) and keeps the `m` most frequent.
pub fn build_vocabulary<S: AsRef<str> + Sync>(captions: &[S], m: usize) -> Result<Vocabulary, VocabError> {
    if m == 0 {
        return Err(VocabError::ZeroSize);
    }
    let counts = par::fold_merge(
        captions,
        PhraseCounts::default,
        |mut acc, c| {
            acc.add_caption(c.as_ref());
            acc
        },
        PhraseCounts::merge,
    );
    counts.into_vocabulary(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidates_drop_stopwords() {
        assert_eq!(extract_candidates("A dog on the grass"), ["dog", "grass"]);
    }

    #[test]
    fn candidates_emit_adjacent_bigrams() {
        assert_eq!(extract_candidates("red panda"), ["red", "panda", "red panda"]);
        assert_eq!(
            extract_candidates("Two red pandas, 3 bamboo-shoots!"),
            ["two", "red", "pandas", "bamboo", "shoots", "two red", "red pandas", "bamboo shoots"]
        );
    }

    #[test]
    fn candidates_of_empty_and_digits() {
        assert!(extract_candidates("").is_empty());
        assert!(extract_candidates("123 456 the").is_empty());
    }

    #[test]
    fn candidate_unigrams_are_fixed_points() {
        for u in extract_candidates("Zebras grazing near a lake at dusk") {
            if !u.contains(' ') {
                assert_eq!(extract_candidates(&u), vec![u.clone()]);
            }
        }
    }

    #[test]
    fn stopword_list_loads() {
        let s = stopwords();
        assert!(s.contains("the") && s.contains("a") && s.contains("on"));
        assert!(!s.contains("dog"));
    }

    #[test]
    fn vocabulary_examples() {
        let v = build_vocabulary(&["dog dog cat"], 3000).unwrap();
        assert_eq!(v.phrases[..2], ["dog", "cat"]);
        assert_eq!(v.counts[..2], [2, 1]);

        let v = build_vocabulary(&["cat dog", "dog"], 1).unwrap();
        assert_eq!(v.phrases, ["dog"]);
        assert_eq!(v.counts, [2]);
    }

    #[test]
    fn bigram_counts_participate() {
        let v = build_vocabulary(&["dog dog cat"], 10).unwrap();
        // "dog dog cat" yields unigrams dog,dog,cat and bigrams "dog dog","dog cat"
        let got: Vec<_> = v.iter().collect();
        assert_eq!(got, [("dog", 2), ("cat", 1), ("dog cat", 1), ("dog dog", 1)]);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(matches!(build_vocabulary(&["the a of"], 5), Err(VocabError::EmptyCorpus)));
        assert!(matches!(build_vocabulary::<&str>(&[], 5), Err(VocabError::EmptyCorpus)));
        assert!(matches!(build_vocabulary(&["dog"], 0), Err(VocabError::ZeroSize)));
    }

    #[test]
    fn tsv_round_trip() {
        let v = build_vocabulary(&["red panda eats bamboo", "red fox"], 10).unwrap();
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("red\t2\n"));
        assert_eq!(Vocabulary::read_tsv(&buf[..]).unwrap(), v);
        assert!(matches!(
            Vocabulary::read_tsv(&b"dog 3\n"[..]),
            Err(VocabError::Malformed { line: 1 })
        ));
    }
}
