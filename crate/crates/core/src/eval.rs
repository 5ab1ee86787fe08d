//! Corpus BLEU-1..4 and ROUGE-L against multiple references.

use std::collections::HashMap;

use crate::data::text::tokenize;
use crate::error::{Error, Result};

pub const METRIC_NAMES: [&str; 5] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L"];
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn check_corpus(candidates: usize, references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates == 0 {
        return Err(Error::Contract("empty candidate list".into()));
    }
    if candidates != references.len() {
        return Err(Error::Contract(format!(
            "{candidates} candidates but {} reference sets",
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Contract("every candidate needs at least one reference".into()));
    }
    Ok(())
}

/// Clipped matches and candidate n-gram totals per order, plus the
/// candidate and effective reference lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> Result<Self> {
        check_corpus(candidates.len(), references)?;
        let mut s = BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            ..Default::default()
        };
        for (cand, refs) in candidates.iter().zip(references) {
            s.cand_len += cand.len();
            s.ref_len += closest_ref_len(cand.len(), refs);
            for n in 1..=max_n {
                let counts = ngram_counts(cand, n);
                let mut max_ref: HashMap<&[String], usize> = HashMap::new();
                for r in refs {
                    for (g, c) in ngram_counts(r, n) {
                        let e = max_ref.entry(g).or_insert(0);
                        *e = (*e).max(c);
                    }
                }
                for (g, c) in &counts {
                    s.matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                }
                s.totals[n - 1] += cand.len().saturating_sub(n - 1);
            }
        }
        Ok(s)
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.cand_len == 0 {
            0.0
        } else if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        }
    }

    /// BLEU-n for n = 1..=max_n. With `smooth`, orders above 1 use
    /// `(matches+1)/(total+1)`.
    pub fn scores(&self, smooth: bool) -> Vec<f64> {
        let bp = self.brevity_penalty();
        let mut log_sum = 0.0;
        let mut zero = false;
        let mut out = Vec::with_capacity(self.matches.len());
        for k in 0..self.matches.len() {
            let (m, t) = (self.matches[k] as f64, self.totals[k] as f64);
            let p = if smooth && k > 0 { (m + 1.0) / (t + 1.0) } else if t > 0.0 { m / t } else { 0.0 };
            if p <= 0.0 {
                zero = true;
            } else {
                log_sum += p.ln();
            }
            let n = (k + 1) as f64;
            out.push(if zero { 0.0 } else { bp * (log_sum / n).exp() });
        }
        out
    }
}

/// Corpus-level BLEU-1..`max_n`.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
    smooth: bool,
) -> Result<Vec<f64>> {
    Ok(BleuStats::collect(candidates, references, max_n)?.scores(smooth))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one candidate, maximized over its references.
pub fn rouge_l_sentence(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Corpus mean of sentence ROUGE-L.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(candidates.len(), references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_sentence(c, r))
        .sum();
    Ok(total / candidates.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image_id: String,
    pub candidate: String,
    pub references: Vec<String>,
    /// Smoothed sentence BLEU-4.
    pub bleu4: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// BLEU-1..4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub images: usize,
    pub references: usize,
    pub candidate_tokens: usize,
    pub per_image: Vec<ImageScore>,
}

impl EvalReport {
    /// Scores raw caption strings; `items` holds (image id, candidate,
    /// references).
    pub fn score(items: &[(String, String, Vec<String>)], smooth: bool) -> Result<Self> {
        let cands: Vec<Vec<String>> = items.iter().map(|(_, c, _)| tokenize(c)).collect();
        let refs: Vec<Vec<Vec<String>>> = items
            .iter()
            .map(|(_, _, r)| r.iter().map(|s| tokenize(s)).collect())
            .collect();
        let b = bleu(&cands, &refs, 4, smooth)?;
        let r = rouge_l(&cands, &refs)?;
        let mut per_image = Vec::with_capacity(items.len());
        for (i, (id, cand, rs)) in items.iter().enumerate() {
            let sentence = bleu(&cands[i..=i], &refs[i..=i], 4, true)?;
            per_image.push(ImageScore {
                image_id: id.clone(),
                candidate: cand.clone(),
                references: rs.clone(),
                bleu4: sentence[3],
                rouge_l: rouge_l_sentence(&cands[i], &refs[i]),
            });
        }
        Ok(EvalReport {
            bleu: [b[0], b[1], b[2], b[3]],
            rouge_l: r,
            images: items.len(),
            references: refs.iter().map(Vec::len).sum(),
            candidate_tokens: cands.iter().map(Vec::len).sum(),
            per_image,
        })
    }

    pub fn metrics(&self) -> [(&'static str, f64); 5] {
        [
            (METRIC_NAMES[0], self.bleu[0]),
            (METRIC_NAMES[1], self.bleu[1]),
            (METRIC_NAMES[2], self.bleu[2]),
            (METRIC_NAMES[3], self.bleu[3]),
            (METRIC_NAMES[4], self.rouge_l),
        ]
    }

    /// `name<TAB>value` lines followed by corpus sizes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.metrics() {
            out.push_str(&format!("{name}\t{v:.6}\n"));
        }
        out.push_str(&format!("images\t{}\n", self.images));
        out.push_str(&format!("references\t{}\n", self.references));
        out.push_str(&format!("candidate_tokens\t{}\n", self.candidate_tokens));
        out
    }

    /// One line per image: id, candidate, sentence scores, references
    /// joined by ` | `.
    pub fn dump(&self) -> String {
        let mut out = String::from("image_id\tcandidate\tbleu4\trouge_l\treferences\n");
        for s in &self.per_image {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{}\n",
                s.image_id,
                s.candidate,
                s.bleu4,
                s.rouge_l,
                s.references.join(" | ")
            ));
        }
        out
    }
}
