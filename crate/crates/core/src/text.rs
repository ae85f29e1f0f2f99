//! Tokenization and the shared question/answer vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const UNKNOWN: usize = 0;
pub const QUESTION_MARK: usize = 1;
pub const END_OF_ANSWER: usize = 2;

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const QUESTION_MARK_TOKEN: &str = "?";
pub const END_OF_ANSWER_TOKEN: &str = "$";

const RESERVED: [&str; 3] = [UNKNOWN_TOKEN, QUESTION_MARK_TOKEN, END_OF_ANSWER_TOKEN];

/// Lowercases, splits on whitespace and commas, detaches a trailing `?`
/// and strips every other punctuation character.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in raw.split(|c: char| c.is_whitespace() || c == ',') {
        let lowered = piece.to_lowercase();
        let (body, question) = match lowered.strip_suffix('?') {
            Some(rest) => (rest, true),
            None => (lowered.as_str(), false),
        };
        let cleaned: String = body.chars().filter(|c| !c.is_ascii_punctuation()).collect();
        if !cleaned.is_empty() {
            tokens.push(cleaned);
        }
        if question {
            tokens.push(QUESTION_MARK_TOKEN.to_string());
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency then lexicographically, after the three reserved tokens.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Input("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sequence in corpus {
            for token in sequence {
                let token = token.as_ref();
                if !RESERVED.contains(&token) {
                    *counts.entry(token).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, n)| n >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(kept.into_iter().map(|(w, _)| w.to_string()))
    }

    /// Vocabulary from an explicit word list (reserved tokens are prepended).
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Input(format!(
                    "word {w:?} appears twice in vocabulary"
                )));
            }
        }
        Ok(Self { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Result<&str> {
        self.words.get(index).map(String::as_str).ok_or_else(|| {
            Error::Domain(format!(
                "index {index} outside vocabulary of {}",
                self.len()
            ))
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> EncodedSequence {
        EncodedSequence {
            indices: tokens
                .iter()
                .map(|t| self.index_of(t.as_ref()).unwrap_or(UNKNOWN))
                .collect(),
            dimension: self.len(),
        }
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<String>> {
        indices
            .iter()
            .map(|&i| self.word(i).map(str::to_string))
            .collect()
    }

    /// One word per line; the line number is the index.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for w in &self.words {
            writeln!(out, "{w}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in input.lines() {
            lines.push(line?);
        }
        Self::from_lines(lines, "vocabulary")
    }

    pub(crate) fn from_lines(lines: Vec<String>, source: &str) -> Result<Self> {
        for (i, reserved) in RESERVED.iter().enumerate() {
            if lines.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::parse(
                    source,
                    i + 1,
                    format!("expected reserved token {reserved:?}"),
                ));
            }
        }
        Self::from_words(lines.into_iter().skip(RESERVED.len()))
    }
}

/// Vocabulary indices together with the one-hot dimension they live in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub indices: Vec<usize>,
    pub dimension: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn one_hot(&self, position: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        v[self.indices[position]] = 1.0;
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(
            tokenize("What is on the Table?"),
            toks(&["what", "is", "on", "the", "table", "?"])
        );
        assert_eq!(tokenize("blue, white"), toks(&["blue", "white"]));
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("how many chairs ?"),
            toks(&["how", "many", "chairs", "?"])
        );
        assert_eq!(tokenize("it's (red)."), toks(&["its", "red"]));
        assert_eq!(tokenize("3 cups"), toks(&["3", "cups"]));
    }

    #[test]
    fn vocabulary_frequency_order_and_threshold() {
        let corpus = vec![toks(&["a", "b"]), toks(&["a"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.words(), &toks(&["<unk>", "?", "$", "a", "b"])[..]);
        let v2 = Vocabulary::build(&corpus, 2).unwrap();
        assert!(v2.index_of("a").is_some() && v2.index_of("b").is_none());
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(Vocabulary::build(&empty, 1).unwrap().len(), 3);
        assert!(Vocabulary::build(&corpus, 0).is_err());
    }

    #[test]
    fn vocabulary_ties_are_lexicographic_and_reserved_are_skipped() {
        let corpus = vec![toks(&["zeta", "alpha", "?", "mid", "mid"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(&v.words()[3..], &toks(&["mid", "alpha", "zeta"])[..]);
        assert_eq!(v.index_of("?"), Some(QUESTION_MARK));
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::from_words(toks(&["table", "chair"])).unwrap();
        let t = toks(&["chair", "table", "?", "$"]);
        let enc = v.encode(&t);
        assert_eq!(enc.indices, vec![4, 3, 1, 2]);
        assert_eq!(v.decode(&enc.indices).unwrap(), t);
        assert_eq!(v.encode(&["sofa"]).indices, vec![UNKNOWN]);
        assert!(matches!(v.decode(&[v.len()]), Err(Error::Domain(_))));
        assert_eq!(enc.one_hot(1), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn serialization_round_trip() {
        let v = Vocabulary::build(&[toks(&["x", "y", "y"])], 1).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "<unk>\n?\n$\ny\nx\n"
        );
        assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), v);
        assert!(Vocabulary::read_from(&b"?\n<unk>\n$\n"[..]).is_err());
    }
}
