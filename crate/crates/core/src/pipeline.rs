//! End-to-end glue: topic labels, vocabularies, probes, model inputs,
//! training and evaluation over manifest splits.

use std::fmt;
use std::str::FromStr;

use crate::data::attributes::{AttributeVector, AttributeVocabulary, MergeMap};
use crate::data::io::DatasetManifest;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::lda::{fit_lda, image_document, LdaConfig, LdaModel, LdaVocabulary, TopicInference};
use crate::model::{CaptionModel, ImageInputs, ModelConfig, Variant};
use crate::params::ParameterStore;
use crate::probe::{mean_pool, train_attribute_probe, train_topic_probe, AttributeProbe, ProbeConfig, TopicProbe};
use crate::tensor::Tensor;
use crate::training::{train, CaptionExample, TrainConfig, TrainReport};

/// Where the decoder's topic vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopicSource {
    /// Topic probe prediction from pooled features.
    Probe,
    /// LDA-inferred distribution from the image's captions.
    Lda,
}

/// Where the attribute scores come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeSource {
    /// Indicators of attributes mentioned in the image's captions.
    Oracle,
    /// Attribute probe scores from pooled features.
    Probe,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($t)))),
                }
            }
        }
    };
}

text_enum!(TopicSource, Probe => "probe", Lda => "lda");
text_enum!(AttributeSource, Oracle => "oracle", Probe => "probe");

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub lda: LdaConfig,
    pub min_count: usize,
    /// Most-common-word count before merging.
    pub attribute_candidates: usize,
    pub top_k: usize,
    pub merge: MergeMap,
    pub topic_source: TopicSource,
    pub attribute_source: AttributeSource,
    pub probe: ProbeConfig,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub spatial_proj_dim: usize,
    pub spatial_mlp_dim: usize,
    pub semantic_proj_dim: usize,
    pub variant: Variant,
    pub topic_init: bool,
    pub train: TrainConfig,
    pub smooth_bleu: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lda: LdaConfig::default(),
            min_count: 1,
            attribute_candidates: 256,
            top_k: 10,
            merge: MergeMap::new(),
            topic_source: TopicSource::Probe,
            attribute_source: AttributeSource::Oracle,
            probe: ProbeConfig::default(),
            hidden_dim: 128,
            input_dim: 128,
            embed_dim: 64,
            spatial_proj_dim: 256,
            spatial_mlp_dim: 256,
            semantic_proj_dim: 256,
            variant: Variant::TopicBoth,
            topic_init: true,
            train: TrainConfig::default(),
            smooth_bleu: false,
        }
    }
}

/// Fitted LDA with its word index.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicModel {
    pub lda: LdaModel,
    pub words: LdaVocabulary,
}

impl TopicModel {
    /// Fits LDA on one document per training image.
    pub fn fit(manifest: &DatasetManifest, cfg: &LdaConfig) -> Result<Self> {
        let docs: Vec<String> = manifest.records.iter().map(|r| image_document(&r.captions)).collect();
        let words = LdaVocabulary::build(&docs);
        let corpus: Vec<Vec<usize>> = docs.iter().map(|d| words.encode(d)).collect();
        let lda = fit_lda(&corpus, words.len(), cfg)?;
        Ok(TopicModel { lda, words })
    }

    /// Inference for every image; image `i` uses seed `seed + i`.
    pub fn label(&self, manifest: &DatasetManifest, iterations: usize, seed: u64) -> Vec<TopicInference> {
        manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let doc = self.words.encode(&image_document(&r.captions));
                let inf = self.lda.infer(&doc, iterations, seed.wrapping_add(i as u64));
                if inf.degenerate {
                    log::warn!("image {} has no known topic words", r.image_id);
                }
                inf
            })
            .collect()
    }
}

/// Vocabularies and probes fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifacts {
    pub vocab: Vocabulary,
    pub attributes: AttributeVocabulary,
    pub topics: TopicModel,
    pub topic_probe: TopicProbe,
    pub attribute_probe: AttributeProbe,
    pub topic_accuracy: f64,
    pub attribute_accuracy: f64,
}

/// One split with everything the captioner consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplit {
    pub ids: Vec<String>,
    pub images: Vec<ImageInputs>,
    pub references: Vec<Vec<String>>,
    pub examples: Vec<CaptionExample>,
    pub topic_labels: Vec<TopicInference>,
}

fn pooled_features(manifest: &DatasetManifest) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
    let mut feats = Vec::with_capacity(manifest.records.len());
    let mut pooled = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let f = manifest.load_features(r)?.features;
        pooled.push(mean_pool(&f));
        feats.push(f);
    }
    Ok((feats, pooled))
}

impl Artifacts {
    pub fn fit(train_split: &DatasetManifest, cfg: &PipelineConfig) -> Result<Self> {
        if train_split.records.is_empty() {
            return Err(Error::Data("training manifest has no records".into()));
        }
        let captions = train_split.all_captions();
        let vocab = Vocabulary::build(&captions, cfg.min_count)?;
        let attributes = AttributeVocabulary::build(&captions, cfg.attribute_candidates, &cfg.merge)?;
        let topics = TopicModel::fit(train_split, &cfg.lda)?;
        Self::fit_probes(vocab, attributes, topics, train_split, cfg)
    }

    /// Trains both probes on `train_split` given already-built vocabularies
    /// and topic model.
    pub fn fit_probes(
        vocab: Vocabulary,
        attributes: AttributeVocabulary,
        topics: TopicModel,
        train_split: &DatasetManifest,
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        if train_split.records.is_empty() {
            return Err(Error::Data("training manifest has no records".into()));
        }
        let labels = topics.label(train_split, cfg.lda.infer_iterations, cfg.lda.seed);
        let (_, pooled) = pooled_features(train_split)?;
        let hard: Vec<usize> = labels.iter().map(|l| l.label).collect();
        let (topic_probe, topic_accuracy) = train_topic_probe(&pooled, &hard, topics.lda.topics, &cfg.probe)?;
        let targets: Vec<Vec<f64>> = train_split
            .records
            .iter()
            .map(|r| attributes.targets(&r.captions, cfg.top_k).scores)
            .collect();
        let (attribute_probe, attribute_accuracy) = train_attribute_probe(&pooled, &targets, &cfg.probe)?;
        log::info!("topic probe accuracy {topic_accuracy:.4}, attribute probe accuracy {attribute_accuracy:.4}");
        Ok(Artifacts {
            vocab,
            attributes,
            topics,
            topic_probe,
            attribute_probe,
            topic_accuracy,
            attribute_accuracy,
        })
    }

    pub fn model_config(&self, cfg: &PipelineConfig, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            topics: self.topics.lda.topics,
            attributes: self.attributes.len(),
            feature_dim,
            hidden_dim: cfg.hidden_dim,
            input_dim: cfg.input_dim,
            embed_dim: cfg.embed_dim,
            spatial_proj_dim: cfg.spatial_proj_dim,
            spatial_mlp_dim: cfg.spatial_mlp_dim,
            semantic_proj_dim: cfg.semantic_proj_dim,
            variant: cfg.variant,
            topic_init: cfg.topic_init,
        }
    }

    fn attribute_vector(&self, cfg: &PipelineConfig, captions: &[String], features: &Tensor) -> Result<AttributeVector> {
        match cfg.attribute_source {
            AttributeSource::Oracle => Ok(self.attributes.targets(captions, cfg.top_k)),
            AttributeSource::Probe => self.attribute_probe.predict(features, &self.attributes, cfg.top_k),
        }
    }

    /// Builds model inputs and teacher-forcing examples for `split`.
    /// Captions are cut to the configured maximum length.
    pub fn prepare(&self, split: &DatasetManifest, cfg: &PipelineConfig) -> Result<PreparedSplit> {
        let labels = self.topics.label(split, cfg.lda.infer_iterations, cfg.lda.seed);
        let (feats, _) = pooled_features(split)?;
        let mut out = PreparedSplit {
            ids: Vec::new(),
            images: Vec::new(),
            references: Vec::new(),
            examples: Vec::new(),
            topic_labels: labels,
        };
        for (i, (rec, features)) in split.records.iter().zip(feats).enumerate() {
            if rec.captions.is_empty() {
                return Err(Error::Data(format!("image {} has no captions", rec.image_id)));
            }
            let topic = match cfg.topic_source {
                TopicSource::Probe => self.topic_probe.predict(&features)?,
                TopicSource::Lda => Tensor::vector(out.topic_labels[i].distribution.clone()),
            };
            let attributes = self.attribute_vector(cfg, &rec.captions, &features)?.to_tensor();
            for c in &rec.captions {
                let mut tokens = self.vocab.encode(c);
                tokens.truncate(cfg.train.max_caption_len);
                if !tokens.is_empty() {
                    out.examples.push(CaptionExample { image: i, tokens });
                }
            }
            out.ids.push(rec.image_id.clone());
            out.references.push(rec.captions.clone());
            out.images.push(ImageInputs {
                features,
                topic,
                attributes,
            });
        }
        Ok(out)
    }
}

/// Trains a fresh model for `cfg.variant` seeded by `cfg.train.seed`.
pub fn train_variant<F>(
    artifacts: &Artifacts,
    split: &PreparedSplit,
    cfg: &PipelineConfig,
    feature_dim: usize,
    on_epoch: F,
) -> Result<(CaptionModel, ParameterStore, TrainReport)>
where
    F: FnMut(&crate::training::EpochSummary, &ParameterStore) -> Result<()>,
{
    let model = CaptionModel::new(artifacts.model_config(cfg, feature_dim))?;
    let mut store = model.init_params(cfg.train.seed);
    let report = train(&model, &mut store, &split.images, &split.examples, &cfg.train, on_epoch)?;
    Ok((model, store, report))
}

/// Greedy captions for every image of `split`.
pub fn caption_split(
    model: &CaptionModel,
    store: &ParameterStore,
    vocab: &Vocabulary,
    split: &PreparedSplit,
    max_len: usize,
) -> Result<Vec<String>> {
    split
        .images
        .iter()
        .map(|img| Ok(vocab.decode(&model.greedy_decode(store, img, max_len)?)))
        .collect()
}

/// Greedy-decodes `split` and scores it against its references.
pub fn evaluate(
    model: &CaptionModel,
    store: &ParameterStore,
    vocab: &Vocabulary,
    split: &PreparedSplit,
    max_len: usize,
    smooth: bool,
) -> Result<EvalReport> {
    let captions = caption_split(model, store, vocab, split, max_len)?;
    let items: Vec<(String, String, Vec<String>)> = split
        .ids
        .iter()
        .zip(captions)
        .zip(&split.references)
        .map(|((id, c), r)| (id.clone(), c, r.clone()))
        .collect();
    EvalReport::score(&items, smooth)
}

/// One row of the four-way comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub final_token_nll: f64,
}

/// Trains and evaluates every variant with the same data and seed, in
/// table order.
pub fn ablate(
    artifacts: &Artifacts,
    train_split: &PreparedSplit,
    val_split: &PreparedSplit,
    cfg: &PipelineConfig,
    feature_dim: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for variant in Variant::ALL {
        let vcfg = PipelineConfig {
            variant,
            ..cfg.clone()
        };
        let (model, store, report) = train_variant(artifacts, train_split, &vcfg, feature_dim, |_, _| Ok(()))?;
        let eval = evaluate(&model, &store, &artifacts.vocab, val_split, cfg.train.max_caption_len, cfg.smooth_bleu)?;
        log::info!("{variant}: BLEU-4 {:.4}", eval.bleu[3]);
        rows.push(AblationRow {
            variant,
            report: eval,
            final_token_nll: report.epochs.last().map_or(f64::NAN, |e| e.token_nll),
        });
    }
    Ok(rows)
}

/// Fixed-width comparison table with one row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant");
    for name in crate::eval::METRIC_NAMES {
        out.push_str(&format!("\t{name}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(r.variant.as_str());
        for (_, v) in r.report.metrics() {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthConfig};

    fn setup(dir: &std::path::Path) -> (DatasetManifest, DatasetManifest) {
        let ds = generate(&SynthConfig {
            images: 24,
            topics: 4,
            attributes: 8,
            captions_per_image: 2,
            feature_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let (t, v) = ds.write(dir, 4).unwrap();
        (DatasetManifest::load(&t).unwrap(), DatasetManifest::load(&v).unwrap())
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            lda: LdaConfig {
                topics: 4,
                iterations: 50,
                ..LdaConfig::default()
            },
            hidden_dim: 8,
            input_dim: 8,
            embed_dim: 4,
            spatial_proj_dim: 4,
            spatial_mlp_dim: 4,
            semantic_proj_dim: 4,
            probe: ProbeConfig {
                epochs: 20,
                ..ProbeConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn prepares_inputs_on_the_simplex() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = setup(dir.path());
        let cfg = small_cfg();
        let art = Artifacts::fit(&train, &cfg).unwrap();
        for source in [TopicSource::Probe, TopicSource::Lda] {
            let c = PipelineConfig {
                topic_source: source,
                attribute_source: AttributeSource::Probe,
                ..cfg.clone()
            };
            let p = art.prepare(&val, &c).unwrap();
            assert_eq!(p.images.len(), 4);
            assert_eq!(p.examples.len(), 8);
            for img in &p.images {
                assert!((img.topic.sum() - 1.0).abs() < 1e-9);
                assert!(img.attributes.data().iter().filter(|&&a| a > 0.0).count() <= c.top_k);
            }
        }
    }

    #[test]
    fn ablation_is_deterministic_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let (train, val) = setup(dir.path());
        let cfg = small_cfg();
        let art = Artifacts::fit(&train, &cfg).unwrap();
        let tp = art.prepare(&train, &cfg).unwrap();
        let vp = art.prepare(&val, &cfg).unwrap();
        let a = ablate(&art, &tp, &vp, &cfg, 8).unwrap();
        let b = ablate(&art, &tp, &vp, &cfg, 8).unwrap();
        assert_eq!(ablation_table(&a), ablation_table(&b));
        let order: Vec<Variant> = a.iter().map(|r| r.variant).collect();
        assert_eq!(order, Variant::ALL);
        assert_eq!(ablation_table(&a).lines().count(), 5);
    }

    #[test]
    fn source_names_round_trip() {
        for s in ["probe", "lda"] {
            assert_eq!(s.parse::<TopicSource>().unwrap().as_str(), s);
        }
        for s in ["probe", "oracle"] {
            assert_eq!(s.parse::<AttributeSource>().unwrap().as_str(), s);
        }
        assert!("x".parse::<TopicSource>().is_err());
    }
}
