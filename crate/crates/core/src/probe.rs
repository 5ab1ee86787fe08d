//! Linear probes on mean-pooled region features: a softmax topic classifier
//! and a multi-label sigmoid attribute detector.

use std::path::Path;

use crate::checkpoint;
use crate::data::attributes::{AttributeVector, AttributeVocabulary};
use crate::error::{Error, Result};
use crate::optim::{adam_update, AdamConfig};
use crate::params::ParameterStore;
use crate::tensor::{dot, sigmoid, softmax_slice, Tensor};

pub const TOPIC_WEIGHT: &str = "probe.topic.weight";
pub const TOPIC_BIAS: &str = "probe.topic.bias";
pub const ATTRIBUTE_WEIGHT: &str = "probe.attribute.weight";
pub const ATTRIBUTE_BIAS: &str = "probe.attribute.bias";

/// Column mean of a `[m, D]` feature map.
pub fn mean_pool(features: &Tensor) -> Vec<f64> {
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..m {
        for (o, x) in out.iter_mut().zip(features.row(r)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            learning_rate: 0.01,
        }
    }
}

/// Rows of `w: [out, D]` applied to `x`, plus `b`.
fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let d = w.shape()[1];
    b.data()
        .iter()
        .enumerate()
        .map(|(k, bk)| bk + dot(&w.data()[k * d..(k + 1) * d], x))
        .collect()
}

fn check_inputs(pooled: &[Vec<f64>], n: usize) -> Result<usize> {
    if pooled.is_empty() {
        return Err(Error::Data("probe training set is empty".into()));
    }
    if pooled.len() != n {
        return Err(Error::Data(format!("{} feature rows but {n} targets", pooled.len())));
    }
    let d = pooled[0].len();
    if let Some(bad) = pooled.iter().find(|p| p.len() != d) {
        return Err(Error::dim("probe features", &[bad.len()], &[d]));
    }
    Ok(d)
}

/// One gradient step per epoch over the full batch; `grad` fills the
/// store's accumulators with the mean-loss gradient.
fn fit<F>(store: &mut ParameterStore, cfg: &ProbeConfig, mut grad: F)
where
    F: FnMut(&mut ParameterStore),
{
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    for _ in 0..cfg.epochs {
        grad(store);
        adam_update(store, &adam);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicProbe {
    /// `[K, D]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl TopicProbe {
    pub fn zeros(topics: usize, dim: usize) -> Self {
        TopicProbe {
            weight: Tensor::zeros(&[topics, dim]),
            bias: Tensor::zeros(&[topics]),
        }
    }

    pub fn topics(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn predict_pooled(&self, pooled: &[f64]) -> Tensor {
        Tensor::vector(softmax_slice(&affine(&self.weight, &self.bias, pooled)))
    }

    /// Topic vector for a `[m, D]` feature map.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.shape()[1] != self.dim() {
            return Err(Error::dim("topic probe", features.shape(), &[0, self.dim()]));
        }
        Ok(self.predict_pooled(&mean_pool(features)))
    }

    fn to_store(&self) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(TOPIC_WEIGHT, self.weight.clone());
        s.insert(TOPIC_BIAS, self.bias.clone());
        s
    }

    fn from_store(s: &ParameterStore) -> Result<Self> {
        Ok(TopicProbe {
            weight: s.value(TOPIC_WEIGHT)?.clone(),
            bias: s.value(TOPIC_BIAS)?.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_store(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&checkpoint::load(path)?)
    }
}

/// Softmax regression on hard labels. Returns the probe and its training
/// accuracy.
pub fn train_topic_probe(
    pooled: &[Vec<f64>],
    labels: &[usize],
    topics: usize,
    cfg: &ProbeConfig,
) -> Result<(TopicProbe, f64)> {
    let d = check_inputs(pooled, labels.len())?;
    if topics == 0 {
        return Err(Error::Config("topic probe needs at least one topic".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= topics) {
        return Err(Error::Data(format!("topic label {l} out of range for {topics} topics")));
    }
    let mut store = TopicProbe::zeros(topics, d).to_store();
    let n = pooled.len() as f64;
    fit(&mut store, cfg, |s| {
        let probe = TopicProbe::from_store(s).expect("probe params present");
        let mut gw = vec![0.0; topics * d];
        let mut gb = vec![0.0; topics];
        for (x, &y) in pooled.iter().zip(labels) {
            let mut p = probe.predict_pooled(x).into_data();
            p[y] -= 1.0;
            for k in 0..topics {
                gb[k] += p[k] / n;
                for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *g += p[k] * xi / n;
                }
            }
        }
        s.get_mut(TOPIC_WEIGHT).unwrap().grad.data_mut().copy_from_slice(&gw);
        s.get_mut(TOPIC_BIAS).unwrap().grad.data_mut().copy_from_slice(&gb);
    });
    let probe = TopicProbe::from_store(&store)?;
    let correct = pooled
        .iter()
        .zip(labels)
        .filter(|(x, &y)| probe.predict_pooled(x).argmax() == y)
        .count();
    Ok((probe, correct as f64 / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeProbe {
    /// `[n, D]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AttributeProbe {
    pub fn zeros(attributes: usize, dim: usize) -> Self {
        AttributeProbe {
            weight: Tensor::zeros(&[attributes, dim]),
            bias: Tensor::zeros(&[attributes]),
        }
    }

    pub fn attributes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Per-attribute sigmoid scores.
    pub fn scores_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        affine(&self.weight, &self.bias, pooled).into_iter().map(sigmoid).collect()
    }

    /// Scores for a `[m, D]` map, reduced to the `top_k` best.
    pub fn predict(&self, features: &Tensor, vocab: &AttributeVocabulary, top_k: usize) -> Result<AttributeVector> {
        if features.rank() != 2 || features.shape()[1] != self.dim() {
            return Err(Error::dim("attribute probe", features.shape(), &[0, self.dim()]));
        }
        if vocab.len() != self.attributes() {
            return Err(Error::dim("attribute probe vocabulary", &[vocab.len()], &[self.attributes()]));
        }
        Ok(vocab.select_top_k(&self.scores_pooled(&mean_pool(features)), top_k))
    }

    fn to_store(&self) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(ATTRIBUTE_WEIGHT, self.weight.clone());
        s.insert(ATTRIBUTE_BIAS, self.bias.clone());
        s
    }

    fn from_store(s: &ParameterStore) -> Result<Self> {
        Ok(AttributeProbe {
            weight: s.value(ATTRIBUTE_WEIGHT)?.clone(),
            bias: s.value(ATTRIBUTE_BIAS)?.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_store(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&checkpoint::load(path)?)
    }
}

/// Binary cross-entropy per attribute. Returns the probe and its mean
/// per-attribute training accuracy at threshold 0.5.
pub fn train_attribute_probe(
    pooled: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &ProbeConfig,
) -> Result<(AttributeProbe, f64)> {
    let d = check_inputs(pooled, targets.len())?;
    let n_attr = targets[0].len();
    if targets.iter().any(|t| t.len() != n_attr) {
        return Err(Error::Data("attribute targets have inconsistent widths".into()));
    }
    let mut store = AttributeProbe::zeros(n_attr, d).to_store();
    let n = pooled.len() as f64;
    fit(&mut store, cfg, |s| {
        let probe = AttributeProbe::from_store(s).expect("probe params present");
        let mut gw = vec![0.0; n_attr * d];
        let mut gb = vec![0.0; n_attr];
        for (x, y) in pooled.iter().zip(targets) {
            let p = probe.scores_pooled(x);
            for j in 0..n_attr {
                let r = (p[j] - y[j]) / n;
                gb[j] += r;
                for (g, xi) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
        }
        s.get_mut(ATTRIBUTE_WEIGHT).unwrap().grad.data_mut().copy_from_slice(&gw);
        s.get_mut(ATTRIBUTE_BIAS).unwrap().grad.data_mut().copy_from_slice(&gb);
    });
    let probe = AttributeProbe::from_store(&store)?;
    let mut correct = 0usize;
    for (x, y) in pooled.iter().zip(targets) {
        for (p, t) in probe.scores_pooled(x).iter().zip(y) {
            if (*p >= 0.5) == (*t >= 0.5) {
                correct += 1;
            }
        }
    }
    Ok((probe, correct as f64 / (n * n_attr.max(1) as f64)))
}
