//! Topic-guided spatial and semantic attention.
//!
//! Spatial head: each region `vᵢ` is projected on its own and joined with
//! the projected topic and previous hidden state (both repeated across the
//! regions), passed through a one-hidden-layer tanh MLP to a scalar logit,
//! and the logits are normalized with softmax into `α`. The attended feature
//! is the soft sum `v̂ = Σ αᵢ vᵢ`.
//!
//! Semantic head: the projected topic, attribute scores and hidden state are
//! joined into one tanh layer `b`, an `n`-way softmax gives `β`, and the
//! attribute scores are reweighted elementwise, `Âᵢ = βᵢ Aᵢ`.
//!
//! A head is topic-guided exactly when its topic projection exists in the
//! parameter store; the unguided heads drop that block from the
//! concatenation rather than feeding zeros.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub mod names {
    pub const SPATIAL_TOPIC: &str = "spatial.topic";
    pub const SPATIAL_FEATURE: &str = "spatial.feature";
    pub const SPATIAL_HIDDEN: &str = "spatial.hidden";
    pub const SPATIAL_MLP: &str = "spatial.mlp";
    pub const SPATIAL_SCORE: &str = "spatial.score";
    pub const SEMANTIC_TOPIC: &str = "semantic.topic";
    pub const SEMANTIC_ATTRIBUTE: &str = "semantic.attribute";
    pub const SEMANTIC_HIDDEN: &str = "semantic.hidden";
    pub const SEMANTIC_SCORE: &str = "semantic.score";
}

/// Shapes for the spatial head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialAttentionParams {
    pub topics: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Width of each projection, `d_e`.
    pub proj_dim: usize,
    /// Width of the MLP hidden layer, `d_m`.
    pub mlp_dim: usize,
    pub topic_guided: bool,
}

impl SpatialAttentionParams {
    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        use names::*;
        if self.topic_guided {
            affine(store, SPATIAL_TOPIC, self.proj_dim, self.topics, seed);
        }
        affine(store, SPATIAL_FEATURE, self.proj_dim, self.feature_dim, seed);
        affine(store, SPATIAL_HIDDEN, self.proj_dim, self.hidden_dim, seed);
        let blocks = if self.topic_guided { 3 } else { 2 };
        affine(store, SPATIAL_MLP, self.mlp_dim, blocks * self.proj_dim, seed);
        affine(store, SPATIAL_SCORE, 1, self.mlp_dim, seed);
    }

    /// Recovers the shapes from a store, if the head is present.
    pub fn from_store(store: &ParameterStore, topics: usize) -> Result<Self> {
        use names::*;
        let feat = weight_shape(store, SPATIAL_FEATURE)?;
        let hidden = weight_shape(store, SPATIAL_HIDDEN)?;
        let mlp = weight_shape(store, SPATIAL_MLP)?;
        Ok(SpatialAttentionParams {
            topics,
            feature_dim: feat[1],
            hidden_dim: hidden[1],
            proj_dim: feat[0],
            mlp_dim: mlp[0],
            topic_guided: store.contains(&format!("{SPATIAL_TOPIC}.weight")),
        })
    }
}

/// Shapes for the semantic head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SemanticAttentionParams {
    pub topics: usize,
    pub attributes: usize,
    pub hidden_dim: usize,
    /// Width of each projection block of `b`, `d_b`.
    pub proj_dim: usize,
    pub topic_guided: bool,
}

impl SemanticAttentionParams {
    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        use names::*;
        if self.topic_guided {
            affine(store, SEMANTIC_TOPIC, self.proj_dim, self.topics, seed);
        }
        affine(store, SEMANTIC_ATTRIBUTE, self.proj_dim, self.attributes, seed);
        affine(store, SEMANTIC_HIDDEN, self.proj_dim, self.hidden_dim, seed);
        let blocks = if self.topic_guided { 3 } else { 2 };
        affine(store, SEMANTIC_SCORE, self.attributes, blocks * self.proj_dim, seed);
    }

    pub fn from_store(store: &ParameterStore, topics: usize) -> Result<Self> {
        use names::*;
        let attr = weight_shape(store, SEMANTIC_ATTRIBUTE)?;
        let hidden = weight_shape(store, SEMANTIC_HIDDEN)?;
        Ok(SemanticAttentionParams {
            topics,
            attributes: attr[1],
            hidden_dim: hidden[1],
            proj_dim: attr[0],
            topic_guided: store.contains(&format!("{SEMANTIC_TOPIC}.weight")),
        })
    }
}

/// A distribution produced by one of the heads at one decode step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
    pub step: usize,
}

impl AttentionWeights {
    pub fn is_distribution(&self, tol: f64) -> bool {
        self.weights.iter().all(|&w| w >= 0.0)
            && (self.weights.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Tape handles produced by [`spatial_attend`].
#[derive(Clone, Copy, Debug)]
pub struct SpatialOutput {
    pub alpha: Var,
    pub attended: Var,
}

/// Tape handles produced by [`semantic_attend`].
#[derive(Clone, Copy, Debug)]
pub struct SemanticOutput {
    pub beta: Var,
    pub reweighted: Var,
}

/// Topic-guided spatial attention over `features: [m, D]`.
///
/// `topic` is ignored when the head was built without a topic projection.
pub fn spatial_attend(
    tape: &mut Tape,
    store: &ParameterStore,
    features: Var,
    topic: Var,
    h_prev: Var,
) -> Result<SpatialOutput> {
    use names::*;
    let fshape = tape.shape(features).to_vec();
    if fshape.len() != 2 {
        return Err(Error::dim("spatial_attend features", &fshape, &[0, 0]));
    }
    let m = fshape[0];
    if m == 0 {
        return Err(Error::EmptyFeatures);
    }

    let mut blocks = Vec::with_capacity(3);
    if let Some(w) = tape.param_opt(store, &format!("{SPATIAL_TOPIC}.weight"))? {
        let b = tape.param(store, &format!("{SPATIAL_TOPIC}.bias"))?;
        let t = tape.linear(topic, w, Some(b))?;
        blocks.push(tape.repeat(t, m)?);
    }
    let feat = apply_affine(tape, store, SPATIAL_FEATURE, features)?;
    blocks.push(feat);
    let h = apply_affine(tape, store, SPATIAL_HIDDEN, h_prev)?;
    blocks.push(tape.repeat(h, m)?);

    let joined = tape.concat(&blocks)?;
    let hidden = apply_affine(tape, store, SPATIAL_MLP, joined)?;
    let hidden = tape.tanh(hidden);
    let logits = apply_affine(tape, store, SPATIAL_SCORE, hidden)?;
    let logits = tape.reshape(logits, &[m])?;
    let alpha = tape.softmax(logits)?;

    let row = tape.reshape(alpha, &[1, m])?;
    let summed = tape.matmul(row, features)?;
    let attended = tape.reshape(summed, &[fshape[1]])?;
    Ok(SpatialOutput { alpha, attended })
}

/// Topic-guided semantic attention over attribute scores `attributes: [n]`.
pub fn semantic_attend(
    tape: &mut Tape,
    store: &ParameterStore,
    attributes: Var,
    topic: Var,
    h_prev: Var,
) -> Result<SemanticOutput> {
    use names::*;
    let mut blocks = Vec::with_capacity(3);
    if let Some(w) = tape.param_opt(store, &format!("{SEMANTIC_TOPIC}.weight"))? {
        let b = tape.param(store, &format!("{SEMANTIC_TOPIC}.bias"))?;
        blocks.push(tape.linear(topic, w, Some(b))?);
    }
    blocks.push(apply_affine(tape, store, SEMANTIC_ATTRIBUTE, attributes)?);
    blocks.push(apply_affine(tape, store, SEMANTIC_HIDDEN, h_prev)?);
    let joined = tape.concat(&blocks)?;
    let b = tape.tanh(joined);
    let logits = apply_affine(tape, store, SEMANTIC_SCORE, b)?;
    let beta = tape.softmax(logits)?;
    let reweighted = tape.mul(beta, attributes)?;
    Ok(SemanticOutput { beta, reweighted })
}

/// Inserts `<prefix>.weight: [out, in]` and `<prefix>.bias: [out]`.
pub(crate) fn affine(store: &mut ParameterStore, prefix: &str, out: usize, inp: usize, seed: u64) {
    store.init_uniform(&format!("{prefix}.weight"), &[out, inp], inp, seed);
    store.init_uniform(&format!("{prefix}.bias"), &[out], inp, seed);
}

pub(crate) fn apply_affine(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param_opt(store, &format!("{prefix}.bias"))?;
    tape.linear(x, w, b)
}

pub(crate) fn weight_shape(store: &ParameterStore, prefix: &str) -> Result<Vec<usize>> {
    Ok(store.value(&format!("{prefix}.weight"))?.shape().to_vec())
}

/// Copies the weights of a head's output to plain vectors.
pub fn weights_of(tape: &Tape, v: Var, step: usize) -> AttentionWeights {
    AttentionWeights {
        weights: tape.value(v).data().to_vec(),
        step,
    }
}

/// Evaluates the spatial head outside any training graph.
pub fn spatial_attend_values(
    store: &ParameterStore,
    features: &Tensor,
    topic: &Tensor,
    h_prev: &Tensor,
) -> Result<(AttentionWeights, Tensor)> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let t = tape.leaf(topic.clone());
    let h = tape.leaf(h_prev.clone());
    let out = spatial_attend(&mut tape, store, f, t, h)?;
    Ok((weights_of(&tape, out.alpha, 0), tape.value(out.attended).clone()))
}

/// Evaluates the semantic head outside any training graph.
pub fn semantic_attend_values(
    store: &ParameterStore,
    attributes: &Tensor,
    topic: &Tensor,
    h_prev: &Tensor,
) -> Result<(AttentionWeights, Tensor)> {
    let mut tape = Tape::new();
    let a = tape.leaf(attributes.clone());
    let t = tape.leaf(topic.clone());
    let h = tape.leaf(h_prev.clone());
    let out = semantic_attend(&mut tape, store, a, t, h)?;
    Ok((weights_of(&tape, out.beta, 0), tape.value(out.reweighted).clone()))
}
