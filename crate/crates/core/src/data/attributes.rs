//! Attribute vocabulary (most common caption words, folded through a
//! user-supplied merge map) and per-image attribute vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::binio::{read_file, write_file};
use crate::data::text::content_tokens;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Surface word → attribute name.
pub type MergeMap = BTreeMap<String, String>;

/// Parses `surface<TAB>attribute` lines. Blank lines and `#` comments are
/// skipped.
pub fn parse_merge_map(text: &str) -> Result<MergeMap> {
    let mut map = MergeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(surface), Some(target), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config(format!(
                "merge map line {}: expected surface<TAB>attribute, got {line:?}",
                lineno + 1
            )));
        };
        let (surface, target) = (surface.trim().to_lowercase(), target.trim().to_lowercase());
        if surface.is_empty() || target.is_empty() {
            return Err(Error::Config(format!("merge map line {}: empty field", lineno + 1)));
        }
        if let Some(prev) = map.insert(surface.clone(), target.clone()) {
            if prev != target {
                return Err(Error::Config(format!(
                    "merge map line {}: {surface} maps to both {prev} and {target}",
                    lineno + 1
                )));
            }
        }
    }
    Ok(map)
}

pub fn load_merge_map(path: &Path) -> Result<MergeMap> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("merge map {} is not UTF-8", path.display())))?;
    parse_merge_map(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeVocabulary {
    names: Vec<String>,
    /// Corpus count of each attribute, summed over its surface forms.
    frequency: Vec<usize>,
    merge: MergeMap,
    index: HashMap<String, usize>,
}

impl AttributeVocabulary {
    /// Top-`c` content words by frequency (ties lexicographic), folded
    /// through `merge` and deduplicated in frequency order.
    pub fn build<S: AsRef<str>>(captions: &[S], c: usize, merge: &MergeMap) -> Result<Self> {
        if c == 0 {
            return Err(Error::Config("attribute count c must be at least 1".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for cap in captions {
            for t in content_tokens(cap.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));

        let mut names: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for (word, _) in ranked.into_iter().take(c) {
            let name = merge.get(word).unwrap_or(word).clone();
            if seen.insert(name.clone()) {
                names.push(name);
            }
        }
        let kept_merge: MergeMap = merge
            .iter()
            .filter(|(_, t)| seen.contains(*t))
            .map(|(s, t)| (s.clone(), t.clone()))
            .collect();
        let mut vocab = Self::from_parts(names, kept_merge, vec![])?;
        let mut freq = vec![0; vocab.len()];
        for (word, n) in &counts {
            if let Some(i) = vocab.lookup(word) {
                freq[i] += n;
            }
        }
        vocab.frequency = freq;
        Ok(vocab)
    }

    fn from_parts(names: Vec<String>, merge: MergeMap, frequency: Vec<usize>) -> Result<Self> {
        let index: HashMap<String, usize> =
            names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        if index.len() != names.len() {
            return Err(Error::Config("duplicate attribute name".into()));
        }
        if let Some((s, t)) = merge.iter().find(|(_, t)| !index.contains_key(*t)) {
            return Err(Error::Config(format!("merge target {t} (from {s}) is not an attribute")));
        }
        let frequency = if frequency.is_empty() {
            vec![0; names.len()]
        } else {
            frequency
        };
        Ok(AttributeVocabulary {
            names,
            frequency,
            merge,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn frequency(&self) -> &[usize] {
        &self.frequency
    }

    pub fn merge_map(&self) -> &MergeMap {
        &self.merge
    }

    /// Attribute index of a surface word, following the merge map.
    pub fn lookup(&self, word: &str) -> Option<usize> {
        let name = self.merge.get(word).map(String::as_str).unwrap_or(word);
        self.index.get(name).copied()
    }

    /// Ranking used to break score ties: corpus frequency descending, then
    /// attribute name.
    fn priority_order(&self, a: usize, b: usize) -> std::cmp::Ordering {
        self.frequency[b]
            .cmp(&self.frequency[a])
            .then_with(|| self.names[a].cmp(&self.names[b]))
    }

    /// Keeps the `top_k` highest scores (ties broken by [`Self::priority_order`])
    /// and zeroes the rest.
    pub fn select_top_k(&self, scores: &[f64], top_k: usize) -> AttributeVector {
        debug_assert_eq!(scores.len(), self.len());
        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.priority_order(a, b))
        });
        let mut out = vec![0.0; scores.len()];
        for &i in order.iter().take(top_k) {
            out[i] = scores[i].clamp(0.0, 1.0);
        }
        AttributeVector { scores: out, top_k }
    }

    /// Indicator targets from an image's captions, capped at `top_k`.
    pub fn targets<S: AsRef<str>>(&self, captions: &[S], top_k: usize) -> AttributeVector {
        let mut hits = vec![0.0; self.len()];
        for cap in captions {
            for t in content_tokens(cap.as_ref()) {
                if let Some(i) = self.lookup(&t) {
                    hits[i] = 1.0;
                }
            }
        }
        self.select_top_k(&hits, top_k)
    }

    /// Names of the nonzero attributes in `v`.
    pub fn active_names(&self, v: &AttributeVector) -> Vec<String> {
        v.scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(i, _)| self.names[i].clone())
            .collect()
    }

    /// Indicator vector from attribute names (unknown names are an error).
    pub fn from_names(&self, names: &[String], top_k: usize) -> Result<AttributeVector> {
        let mut hits = vec![0.0; self.len()];
        for n in names {
            let i = self
                .lookup(n)
                .ok_or_else(|| Error::Data(format!("unknown attribute {n}")))?;
            hits[i] = 1.0;
        }
        Ok(self.select_top_k(&hits, top_k))
    }

    /// Text form: `name<TAB>frequency` per attribute, then `=surface<TAB>name`
    /// per merge entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (n, f) in self.names.iter().zip(&self.frequency) {
            s.push_str(&format!("{n}\t{f}\n"));
        }
        for (surface, target) in &self.merge {
            s.push_str(&format!("={surface}\t{target}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut freq = Vec::new();
        let mut merge = MergeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("bad attribute line {line:?}")))?;
            if let Some(surface) = a.strip_prefix('=') {
                merge.insert(surface.to_string(), b.to_string());
            } else {
                names.push(a.to_string());
                freq.push(
                    b.parse()
                        .map_err(|_| Error::Config(format!("bad attribute frequency {b:?}")))?,
                );
            }
        }
        Self::from_parts(names, merge, freq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Attribute scores in `[0, 1]` with at most `top_k` nonzero entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector {
    pub scores: Vec<f64>,
    pub top_k: usize,
}

impl AttributeVector {
    pub fn nonzero(&self) -> usize {
        self.scores.iter().filter(|&&s| s != 0.0).count()
    }

    pub fn is_valid(&self) -> bool {
        self.scores.iter().all(|s| (0.0..=1.0).contains(s)) && self.nonzero() <= self.top_k
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.scores.clone())
    }
}
