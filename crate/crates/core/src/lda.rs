//! Latent Dirichlet allocation fit by collapsed Gibbs sampling, used to turn
//! caption text into image topic labels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::text::content_tokens;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGLD";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdaConfig {
    pub topics: usize,
    /// Symmetric document-topic prior; `None` means `50/K`.
    pub alpha: Option<f64>,
    pub eta: f64,
    pub iterations: usize,
    pub infer_iterations: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            topics: 8,
            alpha: None,
            eta: 0.01,
            iterations: 500,
            infer_iterations: 50,
            seed: 0,
        }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.topics as f64)
    }
}

/// Sampler state: per-token assignments and the three count tables.
pub struct GibbsSampler<'a> {
    docs: Vec<&'a [usize]>,
    assignments: Vec<Vec<usize>>,
    doc_topic: Vec<Vec<usize>>,
    topic_word: Vec<Vec<usize>>,
    topic_total: Vec<usize>,
    vocab_size: usize,
    alpha: f64,
    eta: f64,
    rng: ChaCha8Rng,
    weights: Vec<f64>,
}

impl<'a> GibbsSampler<'a> {
    /// Random initial assignments. Empty documents are skipped.
    pub fn new(corpus: &'a [Vec<usize>], vocab_size: usize, config: &LdaConfig) -> Result<Self> {
        let k = config.topics;
        if k < 2 {
            return Err(Error::Contract(format!("LDA needs at least 2 topics, got {k}")));
        }
        if config.eta <= 0.0 || config.alpha() <= 0.0 {
            return Err(Error::Config("LDA priors must be positive".into()));
        }
        let mut docs = Vec::with_capacity(corpus.len());
        for (i, d) in corpus.iter().enumerate() {
            if d.is_empty() {
                log::warn!("skipping empty LDA document {i}");
                continue;
            }
            if let Some(&w) = d.iter().find(|&&w| w >= vocab_size) {
                return Err(Error::Data(format!("document {i}: word id {w} >= vocabulary {vocab_size}")));
            }
            docs.push(d.as_slice());
        }
        if docs.is_empty() {
            return Err(Error::Data("LDA corpus has no non-empty documents".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut doc_topic = vec![vec![0; k]; docs.len()];
        let mut topic_word = vec![vec![0; vocab_size]; k];
        let mut topic_total = vec![0; k];
        let mut assignments = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            let z: Vec<usize> = doc.iter().map(|_| rng.gen_range(0..k)).collect();
            for (&w, &t) in doc.iter().zip(&z) {
                doc_topic[d][t] += 1;
                topic_word[t][w] += 1;
                topic_total[t] += 1;
            }
            assignments.push(z);
        }
        Ok(GibbsSampler {
            docs,
            assignments,
            doc_topic,
            topic_word,
            topic_total,
            vocab_size,
            alpha: config.alpha(),
            eta: config.eta,
            rng,
            weights: vec![0.0; k],
        })
    }

    /// One pass resampling every token's topic from its full conditional.
    pub fn sweep(&mut self) {
        let k = self.topic_total.len();
        let v_eta = self.vocab_size as f64 * self.eta;
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i];
                let old = self.assignments[d][i];
                self.doc_topic[d][old] -= 1;
                self.topic_word[old][w] -= 1;
                self.topic_total[old] -= 1;

                let mut total = 0.0;
                for t in 0..k {
                    let p = (self.doc_topic[d][t] as f64 + self.alpha)
                        * (self.topic_word[t][w] as f64 + self.eta)
                        / (self.topic_total[t] as f64 + v_eta);
                    total += p;
                    self.weights[t] = total;
                }
                let new = sample_cumulative(&self.weights, total, &mut self.rng);

                self.assignments[d][i] = new;
                self.doc_topic[d][new] += 1;
                self.topic_word[new][w] += 1;
                self.topic_total[new] += 1;
            }
        }
    }

    /// Sum of the topic-word count table.
    pub fn assigned_tokens(&self) -> usize {
        self.topic_word.iter().flatten().sum()
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(|d| d.len()).sum()
    }

    pub fn into_model(self) -> LdaModel {
        let k = self.topic_total.len();
        let v = self.vocab_size;
        let mut phi = Vec::with_capacity(k * v);
        for t in 0..k {
            let denom = self.topic_total[t] as f64 + v as f64 * self.eta;
            phi.extend(self.topic_word[t].iter().map(|&n| (n as f64 + self.eta) / denom));
        }
        LdaModel {
            topics: k,
            vocab_size: v,
            phi,
            alpha: self.alpha,
            eta: self.eta,
            doc_topic_counts: self.doc_topic,
        }
    }
}

fn sample_cumulative(cumulative: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let u = rng.gen::<f64>() * total;
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel {
    pub topics: usize,
    pub vocab_size: usize,
    /// Topic-word distributions, `K × V` row-major.
    pub phi: Vec<f64>,
    pub alpha: f64,
    pub eta: f64,
    /// Topic counts of each training document (empty after a load).
    pub doc_topic_counts: Vec<Vec<usize>>,
}

/// Result of inferring one document's topic mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicInference {
    pub label: usize,
    pub distribution: Vec<f64>,
    /// Set when no word of the document is known to the model.
    pub degenerate: bool,
}

pub fn fit_lda(corpus: &[Vec<usize>], vocab_size: usize, config: &LdaConfig) -> Result<LdaModel> {
    let mut sampler = GibbsSampler::new(corpus, vocab_size, config)?;
    for _ in 0..config.iterations {
        sampler.sweep();
    }
    Ok(sampler.into_model())
}

impl LdaModel {
    pub fn phi_row(&self, k: usize) -> &[f64] {
        &self.phi[k * self.vocab_size..(k + 1) * self.vocab_size]
    }

    /// Topic mixture of `doc` by Gibbs sampling with `φ` held fixed.
    /// Words outside the model vocabulary are ignored.
    pub fn infer(&self, doc: &[usize], iterations: usize, seed: u64) -> TopicInference {
        let k = self.topics;
        let words: Vec<usize> = doc.iter().copied().filter(|&w| w < self.vocab_size).collect();
        if words.is_empty() {
            return TopicInference {
                label: 0,
                distribution: vec![1.0 / k as f64; k],
                degenerate: true,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z: Vec<usize> = words.iter().map(|_| rng.gen_range(0..k)).collect();
        let mut counts = vec![0usize; k];
        for &t in &z {
            counts[t] += 1;
        }
        let mut weights = vec![0.0; k];
        for _ in 0..iterations {
            for (i, &w) in words.iter().enumerate() {
                counts[z[i]] -= 1;
                let mut total = 0.0;
                for t in 0..k {
                    total += (counts[t] as f64 + self.alpha) * self.phi[t * self.vocab_size + w];
                    weights[t] = total;
                }
                z[i] = sample_cumulative(&weights, total, &mut rng);
                counts[z[i]] += 1;
            }
        }
        let denom = words.len() as f64 + k as f64 * self.alpha;
        let distribution: Vec<f64> = counts.iter().map(|&c| (c as f64 + self.alpha) / denom).collect();
        let label = argmax_lowest(&distribution);
        TopicInference {
            label,
            distribution,
            degenerate: false,
        }
    }

    /// Layout: `TGLD`, K u32, V u32, then K rows of V little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, None);
        w.u32(self.topics as u32);
        w.u32(self.vocab_size as u32);
        w.f64s(&self.phi);
        w.buf
    }

    /// The file carries only `φ`; priors come from `config`.
    pub fn from_bytes(bytes: &[u8], origin: &str, config: &LdaConfig) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        r.magic(MAGIC)?;
        let k = r.u32("topic count")? as usize;
        let v = r.u32("vocabulary size")? as usize;
        if k == 0 || v == 0 {
            return Err(r.error(format!("empty model {k}x{v}")));
        }
        let phi = r.f64s(k * v, "phi")?;
        if !r.at_end() {
            return Err(r.error("trailing bytes after phi"));
        }
        let alpha = config.alpha.unwrap_or(50.0 / k as f64);
        Ok(LdaModel {
            topics: k,
            vocab_size: v,
            phi,
            alpha,
            eta: config.eta,
            doc_topic_counts: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path, config: &LdaConfig) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, &path.display().to_string(), config)
    }
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Word index for LDA documents: content words in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LdaVocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LdaVocabulary {
    pub fn build<S: AsRef<str>>(documents: &[S]) -> Self {
        let set: std::collections::BTreeSet<String> = documents
            .iter()
            .flat_map(|d| content_tokens(d.as_ref()))
            .collect();
        Self::from_words(set.into_iter().collect())
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        LdaVocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Known content words of `text` as ids.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        content_tokens(text)
            .iter()
            .filter_map(|t| self.index.get(t).copied())
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
    }
}

/// One LDA document per image: all of its captions joined.
pub fn image_document<S: AsRef<str>>(captions: &[S]) -> String {
    captions.iter().map(|c| c.as_ref()).collect::<Vec<_>>().join(" ")
}

/// Fraction of items whose predicted cluster's majority true label matches
/// their own.
pub fn purity(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *table.entry(p).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table.values().map(|row| row.values().max().copied().unwrap_or(0)).sum();
    hits as f64 / predicted.len() as f64
}

/// Sidecar line: `image_id<TAB>label<TAB>p_0 … p_{K−1}` (space-separated).
pub fn assignment_line(image_id: &str, inf: &TopicInference) -> String {
    let dist: Vec<String> = inf.distribution.iter().map(|p| format!("{p:.17e}")).collect();
    format!("{image_id}\t{}\t{}\n", inf.label, dist.join(" "))
}

pub fn parse_assignment_line(line: &str) -> Result<(String, usize, Vec<f64>)> {
    let mut parts = line.split('\t');
    let (Some(id), Some(label), Some(dist), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Data(format!("bad topic assignment line {line:?}")));
    };
    let label = label
        .parse()
        .map_err(|_| Error::Data(format!("bad topic label in {line:?}")))?;
    let dist = dist
        .split(' ')
        .map(|x| x.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Data(format!("bad topic distribution in {line:?}")))?;
    Ok((id.to_string(), label, dist))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two topics with disjoint vocabularies: words 0..10 and 10..20.
    fn planted(docs: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpus = Vec::new();
        let mut truth = Vec::new();
        for d in 0..docs {
            let topic = d % 2;
            let doc = (0..20).map(|_| topic * 10 + rng.gen_range(0..10)).collect();
            corpus.push(doc);
            truth.push(topic);
        }
        (corpus, truth)
    }

    fn cfg(seed: u64) -> LdaConfig {
        LdaConfig {
            topics: 2,
            iterations: 200,
            seed,
            ..LdaConfig::default()
        }
    }

    fn labels(model: &LdaModel) -> Vec<usize> {
        model.doc_topic_counts.iter().map(|c| argmax_lowest(&c.iter().map(|&x| x as f64).collect::<Vec<_>>())).collect()
    }

    #[test]
    fn planted_topics_are_recovered() {
        let (corpus, truth) = planted(100, 1);
        let model = fit_lda(&corpus, 20, &cfg(3)).unwrap();
        assert!(purity(&labels(&model), &truth) > 0.9);
        for k in 0..2 {
            let s: f64 = model.phi_row(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(model.phi_row(k).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn seeds_agree_up_to_relabeling() {
        let (corpus, truth) = planted(100, 2);
        let a = fit_lda(&corpus, 20, &cfg(5)).unwrap();
        let b = fit_lda(&corpus, 20, &cfg(5)).unwrap();
        assert_eq!(a, b);
        let c = fit_lda(&corpus, 20, &cfg(6)).unwrap();
        assert!(purity(&labels(&c), &labels(&a)) > 0.9);
        assert!(purity(&labels(&c), &truth) > 0.9);
    }

    #[test]
    fn sweeps_preserve_token_count() {
        let (corpus, _) = planted(30, 3);
        let mut s = GibbsSampler::new(&corpus, 20, &cfg(0)).unwrap();
        for _ in 0..10 {
            s.sweep();
            assert_eq!(s.assigned_tokens(), s.token_count());
        }
    }

    #[test]
    fn single_word_corpus_concentrates_on_that_word() {
        let corpus = vec![vec![3; 10]; 5];
        let model = fit_lda(&corpus, 6, &cfg(0)).unwrap();
        for k in 0..2 {
            assert_eq!(argmax_lowest(model.phi_row(k)), 3);
        }
    }

    #[test]
    fn contract_and_data_errors() {
        let corpus = vec![vec![0, 1]];
        let mut c = cfg(0);
        c.topics = 1;
        assert!(matches!(fit_lda(&corpus, 2, &c), Err(Error::Contract(_))));
        assert!(fit_lda(&[vec![]], 2, &cfg(0)).is_err());
        assert!(fit_lda(&[vec![5]], 2, &cfg(0)).is_err());
        // empty documents are skipped, not fatal
        assert!(fit_lda(&[vec![], vec![0, 1]], 2, &cfg(0)).is_ok());
    }

    #[test]
    fn inference_labels_planted_documents() {
        let (corpus, _) = planted(100, 4);
        let model = fit_lda(&corpus, 20, &cfg(7)).unwrap();
        let lab = labels(&model);
        // topic index that topic-0 documents were assigned to
        let zero_topic = lab[0];
        let doc0: Vec<usize> = (0..10).collect();
        let doc1: Vec<usize> = (10..20).collect();
        let i0 = model.infer(&doc0, 50, 1);
        let i1 = model.infer(&doc1, 50, 1);
        assert_eq!(i0.label, zero_topic);
        assert_eq!(i1.label, 1 - zero_topic);
        assert!((i0.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(model.infer(&doc0, 50, 1), i0);

        let empty = model.infer(&[99], 50, 1);
        assert!(empty.degenerate);
        assert_eq!(empty.label, 0);
        assert_eq!(empty.distribution, vec![0.5, 0.5]);
    }

    #[test]
    fn model_file_round_trip_and_truncation() {
        let (corpus, _) = planted(10, 5);
        let model = fit_lda(&corpus, 20, &cfg(1)).unwrap();
        let bytes = model.to_bytes();
        let back = LdaModel::from_bytes(&bytes, "mem", &cfg(1)).unwrap();
        assert_eq!(back.phi, model.phi);
        assert_eq!(back.to_bytes(), bytes);
        for cut in 0..bytes.len() {
            assert!(matches!(LdaModel::from_bytes(&bytes[..cut], "c", &cfg(1)), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn sidecar_line_round_trip() {
        let inf = TopicInference {
            label: 1,
            distribution: vec![0.1, 0.7, 0.2],
            degenerate: false,
        };
        let line = assignment_line("img3", &inf);
        let (id, label, dist) = parse_assignment_line(line.trim_end()).unwrap();
        assert_eq!((id.as_str(), label), ("img3", 1));
        assert_eq!(dist, inf.distribution);
    }

    #[test]
    fn purity_of_perfect_and_constant_labels() {
        assert_eq!(purity(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(purity(&[0, 0, 0, 0], &[1, 1, 0, 0]), 0.5);
    }
}
