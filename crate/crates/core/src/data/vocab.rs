//! Caption vocabulary with reserved special tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::binio::{read_file, write_file};
use crate::data::text::tokenize;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids.
pub const RESERVED: usize = 4;

const SPECIAL: [&str; RESERVED] = ["<pad>", "<start>", "<end>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Words seen at least `min_count` times, ordered by descending count
    /// then lexicographically, after the reserved ids.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from no captions".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for t in tokenize(c.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, n)| *n >= min_count.max(1) && !SPECIAL.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_words(kept.into_iter().map(|(w, _)| w), min_count))
    }

    fn from_words(words: impl Iterator<Item = String>, min_count: usize) -> Self {
        let mut all: Vec<String> = SPECIAL.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary {
            words: all,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= RESERVED
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, caption: &str) -> Vec<usize> {
        tokenize(caption).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined surface words; PAD/START/END are dropped, UNK is kept
    /// as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != START && i != END)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line in id order, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED || lines[..RESERVED] != SPECIAL {
            return Err(Error::Format {
                path: origin.to_string(),
                offset: 0,
                reason: "vocabulary must start with the reserved tokens".into(),
            });
        }
        let vocab = Self::from_words(lines[RESERVED..].iter().map(|s| s.to_string()), 0);
        if vocab.index.len() != vocab.words.len() {
            return Err(Error::Format {
                path: origin.to_string(),
                offset: 0,
                reason: "duplicate word in vocabulary".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            reason: "not UTF-8".into(),
        })?;
        Self::from_text(&text, &path.display().to_string())
    }
}
