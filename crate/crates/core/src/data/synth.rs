//! Synthetic topic-correlated captioning data.
//!
//! Each latent topic owns a scene word, two verbs, a slice of the attribute
//! nouns and a feature signature. An image of topic `k` has regions carrying
//! `k`'s signature, regions carrying the signatures of nouns owned by `k`
//! (the ones its captions mention), distractor regions carrying nouns owned
//! by other topics, and pure-noise background regions. Captions follow
//!
//! ```text
//! a <adjective> <noun> <verb> near a <noun> in the <scene>
//! ```
//!
//! with mentioned nouns ordered by region position.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::io::{DatasetManifest, FeatureRecord, ManifestHeader, ManifestRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NOUNS: &[&str] = &[
    "dog", "cat", "horse", "bird", "sheep", "cow", "elephant", "giraffe", "zebra", "bear",
    "man", "woman", "child", "boat", "car", "bus", "train", "truck", "bicycle", "kite",
    "umbrella", "bench", "table", "chair", "pizza", "cake", "banana", "apple", "sandwich",
    "laptop", "phone", "clock", "vase", "bottle", "cup", "bowl", "frisbee", "surfboard",
    "skateboard", "ball", "tree", "flower", "fence", "sign", "tower", "bridge", "lamp", "rock",
];

const SCENES: &[&str] = &[
    "park", "kitchen", "street", "beach", "field", "forest", "city", "garden", "river",
    "mountain", "station", "market", "harbor", "desert", "farm", "stadium",
];

const VERBS: &[&str] = &[
    "sits", "stands", "runs", "rests", "waits", "plays", "jumps", "walks", "sleeps", "eats",
    "flies", "swims", "rolls", "leans", "hides", "watches", "grazes", "climbs", "turns", "spins",
    "floats", "glows", "drifts", "lies", "hangs", "shakes", "dances", "falls", "rides", "lingers",
    "shines", "wanders",
];

const ADJECTIVES: &[&str] = &["small", "large", "red", "white", "black", "brown", "green", "old"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub captions_per_image: usize,
    pub topics: usize,
    /// Attribute nouns `n`, dealt round-robin to topics.
    pub attributes: usize,
    /// `[W, H]`; `m = W·H` regions.
    pub grid: [usize; 2],
    pub feature_dim: usize,
    pub max_caption_len: usize,
    /// Nouns each caption mentions (1 or 2).
    pub signal_regions: usize,
    pub distractor_regions: usize,
    pub topic_regions: usize,
    /// Standard deviation of the per-region Gaussian noise.
    pub noise: f64,
    /// Scale of the topic signature relative to the attribute signatures.
    pub topic_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            images: 500,
            captions_per_image: 5,
            topics: 8,
            attributes: 32,
            grid: [3, 3],
            feature_dim: 32,
            max_caption_len: 16,
            signal_regions: 2,
            distractor_regions: 2,
            topic_regions: 2,
            noise: 0.3,
            topic_strength: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn regions(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Token length of the caption template.
    pub fn caption_len(&self) -> usize {
        if self.signal_regions == 2 {
            10
        } else {
            7
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.images == 0 || self.captions_per_image == 0 || self.feature_dim == 0 || self.regions() == 0 {
            return bad("synthetic sizes must be at least 1".into());
        }
        if self.topics == 0 || self.topics > SCENES.len() || 2 * self.topics > VERBS.len() {
            return bad(format!("topics must be in 1..={}", SCENES.len()));
        }
        if self.attributes > NOUNS.len() {
            return bad(format!("{} attributes exceed the {}-noun pool", self.attributes, NOUNS.len()));
        }
        if self.attributes < self.topics * self.signal_regions {
            return bad(format!(
                "{} attributes cannot give each of {} topics {} nouns",
                self.attributes, self.topics, self.signal_regions
            ));
        }
        if !(1..=2).contains(&self.signal_regions) {
            return bad("signal regions must be 1 or 2".into());
        }
        if self.distractor_regions > 0 && self.topics < 2 {
            return bad("distractors need at least 2 topics".into());
        }
        let used = self.topic_regions + self.signal_regions + self.distractor_regions;
        if used > self.regions() {
            return bad(format!("{used} content regions exceed the {} grid regions", self.regions()));
        }
        if self.max_caption_len < self.caption_len() {
            return bad(format!(
                "max caption length {} is below the {}-token template",
                self.max_caption_len,
                self.caption_len()
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number".into());
        }
        Ok(())
    }
}

/// Generated records and features, not yet written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    pub features: Vec<FeatureRecord>,
    /// Attribute noun of each id; `owner[j]` is the topic owning noun `j`.
    pub nouns: Vec<String>,
    pub owner: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let m = cfg.regions();

    let nouns: Vec<String> = NOUNS[..cfg.attributes].iter().map(|s| s.to_string()).collect();
    let owner: Vec<usize> = (0..cfg.attributes).map(|j| j % cfg.topics).collect();
    let owned: Vec<Vec<usize>> = (0..cfg.topics)
        .map(|k| (0..cfg.attributes).filter(|&j| owner[j] == k).collect())
        .collect();

    let topic_sig: Vec<Vec<f64>> = (0..cfg.topics).map(|_| gaussian(&mut rng, d, cfg.topic_strength)).collect();
    let noun_sig: Vec<Vec<f64>> = (0..cfg.attributes).map(|_| gaussian(&mut rng, d, 1.0)).collect();

    let mut records = Vec::with_capacity(cfg.images);
    let mut features = Vec::with_capacity(cfg.images);
    let width = format!("{}", cfg.images.saturating_sub(1)).len().max(5);
    for i in 0..cfg.images {
        let id = format!("img{i:0width$}");
        let topic = rng.gen_range(0..cfg.topics);

        let signal: Vec<usize> = owned[topic]
            .choose_multiple(&mut rng, cfg.signal_regions)
            .copied()
            .collect();
        let others: Vec<usize> = (0..cfg.attributes).filter(|&j| owner[j] != topic).collect();
        let distractors: Vec<usize> = others
            .choose_multiple(&mut rng, cfg.distractor_regions)
            .copied()
            .collect();

        let mut slots: Vec<usize> = (0..m).collect();
        slots.shuffle(&mut rng);
        let mut content: Vec<Option<&[f64]>> = vec![None; m];
        let mut cursor = 0;
        for _ in 0..cfg.topic_regions {
            content[slots[cursor]] = Some(&topic_sig[topic]);
            cursor += 1;
        }
        let mut signal_pos = Vec::with_capacity(signal.len());
        for &j in &signal {
            content[slots[cursor]] = Some(&noun_sig[j]);
            signal_pos.push((slots[cursor], j));
            cursor += 1;
        }
        for &j in &distractors {
            content[slots[cursor]] = Some(&noun_sig[j]);
            cursor += 1;
        }
        let mut values = Vec::with_capacity(m * d);
        for c in &content {
            let noise = gaussian(&mut rng, d, cfg.noise);
            match c {
                Some(sig) => values.extend(sig.iter().zip(&noise).map(|(s, e)| s + e)),
                None => values.extend(noise),
            }
        }
        features.push(FeatureRecord::new(id.clone(), Tensor::new(vec![m, d], values)?)?);

        signal_pos.sort_unstable();
        let mentioned: Vec<usize> = signal_pos.iter().map(|&(_, j)| j).collect();
        let captions = (0..cfg.captions_per_image)
            .map(|_| {
                let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
                let verb = VERBS[2 * topic + rng.gen_range(0..2)];
                let scene = SCENES[topic];
                match mentioned.as_slice() {
                    [a, b] => format!("a {adj} {} {verb} near a {} in the {scene}", nouns[*a], nouns[*b]),
                    [a] => format!("a {adj} {} {verb} in the {scene}", nouns[*a]),
                    _ => unreachable!("validated signal count"),
                }
            })
            .collect();

        let mut attrs: Vec<String> = mentioned.iter().map(|&j| nouns[j].clone()).collect();
        attrs.sort();
        records.push(ManifestRecord {
            image_id: id.clone(),
            features: format!("features/{id}.tgfv"),
            captions,
            topic_label: None,
            topic_dist: None,
            attributes: Some(attrs),
            planted_topic: Some(topic),
        });
    }

    Ok(SyntheticDataset {
        header: ManifestHeader::new(cfg.grid, d),
        records,
        features,
        nouns,
        owner,
    })
}

impl SyntheticDataset {
    /// Manifest over records `range`, rooted at `base_dir`.
    pub fn manifest(&self, range: std::ops::Range<usize>, base_dir: &Path) -> DatasetManifest {
        DatasetManifest {
            header: self.header.clone(),
            records: self.records[range].to_vec(),
            base_dir: base_dir.to_path_buf(),
        }
    }

    /// Writes `features/` plus `train.jsonl` (all but the last `val`
    /// images) and `val.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, val: usize) -> Result<(PathBuf, PathBuf)> {
        if val >= self.records.len() && val > 0 {
            return Err(Error::Config(format!(
                "validation split {val} leaves no training images out of {}",
                self.records.len()
            )));
        }
        for (rec, feat) in self.records.iter().zip(&self.features) {
            feat.save(&dir.join(&rec.features))?;
        }
        let split = self.records.len() - val;
        let train = dir.join("train.jsonl");
        let valp = dir.join("val.jsonl");
        self.manifest(0..split, dir).save(&train)?;
        self.manifest(split..self.records.len(), dir).save(&valp)?;
        Ok((train, valp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::text::{content_tokens, is_stopword, tokenize};

    fn small() -> SynthConfig {
        SynthConfig {
            images: 40,
            topics: 4,
            attributes: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn pools_are_distinct_content_words() {
        let mut all: Vec<&str> = NOUNS.iter().chain(SCENES).chain(VERBS).chain(ADJECTIVES).copied().collect();
        assert!(all.iter().all(|w| !is_stopword(w) && tokenize(w) == [*w]));
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        let root = Path::new("");
        assert_eq!(a.manifest(0..40, root).to_text(), b.manifest(0..40, root).to_text());
        assert_eq!(a.features, b.features);
        let mut other = small();
        other.seed = 1;
        assert_ne!(generate(&other).unwrap().records, a.records);
    }

    #[test]
    fn captions_respect_length_and_mention_owned_nouns() {
        let cfg = small();
        let ds = generate(&cfg).unwrap();
        for rec in &ds.records {
            let topic = rec.planted_topic.unwrap();
            assert_eq!(rec.captions.len(), cfg.captions_per_image);
            for c in &rec.captions {
                assert!(tokenize(c).len() <= cfg.max_caption_len);
                assert!(c.ends_with(SCENES[topic]));
            }
            for a in rec.attributes.as_ref().unwrap() {
                let j = ds.nouns.iter().position(|n| n == a).unwrap();
                assert_eq!(ds.owner[j], topic);
                assert!(content_tokens(&rec.captions[0]).contains(a));
            }
        }
    }

    #[test]
    fn short_template_and_contradictions() {
        let mut cfg = small();
        cfg.signal_regions = 1;
        cfg.max_caption_len = 7;
        let ds = generate(&cfg).unwrap();
        assert!(ds.records.iter().all(|r| tokenize(&r.captions[0]).len() == 7));

        let errs = [
            SynthConfig { attributes: 49, ..small() },
            SynthConfig { attributes: 6, ..small() },
            SynthConfig { max_caption_len: 9, ..small() },
            SynthConfig { grid: [2, 2], ..small() },
            SynthConfig { topics: 17, ..small() },
            SynthConfig { images: 0, ..small() },
        ];
        for cfg in errs {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn features_have_declared_shape() {
        let ds = generate(&small()).unwrap();
        for f in &ds.features {
            assert_eq!(f.features.shape(), &[9, 32]);
            assert!(f.features.all_finite());
        }
    }

    #[test]
    fn write_produces_loadable_splits() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        let (train, val) = ds.write(dir.path(), 10).unwrap();
        let t = DatasetManifest::load(&train).unwrap();
        let v = DatasetManifest::load(&val).unwrap();
        assert_eq!((t.records.len(), v.records.len()), (30, 10));
        let f = v.load_features(&v.records[0]).unwrap();
        assert_eq!(f, ds.features[30]);
    }
}
