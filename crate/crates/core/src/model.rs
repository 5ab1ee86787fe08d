//! The full captioner: both attention heads feeding the decoder.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    semantic_attend, spatial_attend, weights_of, AttentionWeights, SemanticAttentionParams,
    SpatialAttentionParams,
};
use crate::autodiff::{Tape, Var};
use crate::data::vocab::END;
use crate::decoder::{decode_step, init_step, DecoderParams, DropoutCtx, LstmParams};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Which attention heads receive the topic vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// No topic input to either head.
    Base,
    /// Topic into the spatial head only.
    TopicVisual,
    /// Topic into the semantic head only.
    TopicAttribute,
    /// Topic into both heads.
    TopicBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::TopicVisual,
        Variant::TopicAttribute,
        Variant::TopicBoth,
    ];

    pub fn spatial_topic(self) -> bool {
        matches!(self, Variant::TopicVisual | Variant::TopicBoth)
    }

    pub fn semantic_topic(self) -> bool {
        matches!(self, Variant::TopicAttribute | Variant::TopicBoth)
    }

    pub fn from_flags(spatial: bool, semantic: bool) -> Self {
        match (spatial, semantic) {
            (false, false) => Variant::Base,
            (true, false) => Variant::TopicVisual,
            (false, true) => Variant::TopicAttribute,
            (true, true) => Variant::TopicBoth,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::TopicVisual => "t-v",
            Variant::TopicAttribute => "t-a",
            Variant::TopicBoth => "t-va",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "t-v" | "tv" => Ok(Variant::TopicVisual),
            "t-a" | "ta" => Ok(Variant::TopicAttribute),
            "t-va" | "tva" | "t-(v+a)" => Ok(Variant::TopicBoth),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected base, t-v, t-a or t-va"
            ))),
        }
    }
}

/// Every size the captioner needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub topics: usize,
    pub attributes: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub spatial_proj_dim: usize,
    pub spatial_mlp_dim: usize,
    pub semantic_proj_dim: usize,
    pub variant: Variant,
    pub topic_init: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for the given data sizes.
    pub fn desk(vocab_size: usize, topics: usize, attributes: usize, feature_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            topics,
            attributes,
            feature_dim,
            hidden_dim: 128,
            input_dim: 128,
            embed_dim: 64,
            spatial_proj_dim: 256,
            spatial_mlp_dim: 256,
            semantic_proj_dim: 256,
            variant: Variant::TopicBoth,
            topic_init: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("topics", self.topics),
            ("attributes", self.attributes),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("spatial_proj_dim", self.spatial_proj_dim),
            ("spatial_mlp_dim", self.spatial_mlp_dim),
            ("semantic_proj_dim", self.semantic_proj_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.input_dim < 2 {
            return Err(Error::Config("input_dim must be at least 2".into()));
        }
        if self.vocab_size <= crate::data::vocab::RESERVED {
            return Err(Error::Config("vocabulary has no words beyond the reserved ids".into()));
        }
        Ok(())
    }

    pub fn spatial(&self) -> SpatialAttentionParams {
        SpatialAttentionParams {
            topics: self.topics,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            proj_dim: self.spatial_proj_dim,
            mlp_dim: self.spatial_mlp_dim,
            topic_guided: self.variant.spatial_topic(),
        }
    }

    pub fn semantic(&self) -> SemanticAttentionParams {
        SemanticAttentionParams {
            topics: self.topics,
            attributes: self.attributes,
            hidden_dim: self.hidden_dim,
            proj_dim: self.semantic_proj_dim,
            topic_guided: self.variant.semantic_topic(),
        }
    }

    pub fn decoder(&self) -> DecoderParams {
        DecoderParams {
            vocab_size: self.vocab_size,
            topics: self.topics,
            attributes: self.attributes,
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            lstm: LstmParams {
                input_dim: self.input_dim,
                hidden_dim: self.hidden_dim,
            },
            topic_init: self.topic_init,
        }
    }

    /// Reads the sizes and variant back from a trained store. The topic
    /// count must be supplied when no parameter consumes the topic.
    pub fn from_store(store: &ParameterStore, topics_hint: Option<usize>) -> Result<Self> {
        let dec = DecoderParams::from_store(store)?;
        let topic_width = |name: &str| store.get(name).map(|p| p.value.shape()[1]);
        let topics = [
            "decoder.topic.weight",
            "spatial.topic.weight",
            "semantic.topic.weight",
        ]
        .iter()
        .find_map(|n| topic_width(n))
        .or(topics_hint)
        .ok_or_else(|| Error::Config("topic count not recoverable from checkpoint".into()))?;
        let sp = SpatialAttentionParams::from_store(store, topics)?;
        let se = SemanticAttentionParams::from_store(store, topics)?;
        Ok(ModelConfig {
            vocab_size: dec.vocab_size,
            topics,
            attributes: dec.attributes,
            feature_dim: dec.feature_dim,
            hidden_dim: dec.lstm.hidden_dim,
            input_dim: dec.lstm.input_dim,
            embed_dim: dec.embed_dim,
            spatial_proj_dim: sp.proj_dim,
            spatial_mlp_dim: sp.mlp_dim,
            semantic_proj_dim: se.proj_dim,
            variant: Variant::from_flags(sp.topic_guided, se.topic_guided),
            topic_init: dec.topic_init,
        })
    }
}

/// Per-image encoder outputs: region features, topic and attribute scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInputs {
    /// `[m, D]` region features.
    pub features: Tensor,
    /// `[K]` topic distribution.
    pub topic: Tensor,
    /// `[n]` attribute scores.
    pub attributes: Tensor,
}

/// Decoded caption with the attention used at every emitted step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    pub spatial: Vec<AttentionWeights>,
    pub semantic: Vec<AttentionWeights>,
    /// Token emitted at each step, including a final END if produced.
    pub emitted: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct CaptionModel {
    pub config: ModelConfig,
}

impl CaptionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(CaptionModel { config })
    }

    pub fn from_store(store: &ParameterStore, topics_hint: Option<usize>) -> Result<Self> {
        CaptionModel::new(ModelConfig::from_store(store, topics_hint)?)
    }

    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        self.config.spatial().init(&mut store, seed);
        self.config.semantic().init(&mut store, seed);
        self.config.decoder().init(&mut store, seed);
        store
    }

    fn check_inputs(&self, image: &ImageInputs) -> Result<()> {
        let c = &self.config;
        let f = image.features.shape();
        if f.len() != 2 || f[1] != c.feature_dim {
            return Err(Error::dim("image features", f, &[f.first().copied().unwrap_or(0), c.feature_dim]));
        }
        if image.topic.shape() != [c.topics] {
            return Err(Error::dim("topic vector", image.topic.shape(), &[c.topics]));
        }
        if image.attributes.shape() != [c.attributes] {
            return Err(Error::dim("attribute vector", image.attributes.shape(), &[c.attributes]));
        }
        Ok(())
    }

    /// Sum of `−log p_t(w_t)` over the caption and its END token under
    /// teacher forcing, plus the number of supervised positions.
    pub fn sequence_nll(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        image: &ImageInputs,
        tokens: &[usize],
        drop: &mut Option<DropoutCtx>,
    ) -> Result<(Var, usize)> {
        self.check_inputs(image)?;
        if tokens.is_empty() {
            return Err(Error::Contract("empty caption".into()));
        }
        let dec = self.config.decoder();
        let features = tape.leaf(image.features.clone());
        let topic = tape.leaf(image.topic.clone());
        let attrs = tape.leaf(image.attributes.clone());

        let mut state = init_step(tape, store, &dec, topic, drop)?;
        let mut terms = Vec::with_capacity(tokens.len() + 1);
        for &target in tokens.iter().chain(std::iter::once(&END)) {
            if target >= dec.vocab_size {
                return Err(Error::Vocabulary {
                    id: target,
                    size: dec.vocab_size,
                });
            }
            let sp = spatial_attend(tape, store, features, topic, state.h)?;
            let se = semantic_attend(tape, store, attrs, topic, state.h)?;
            let (next, logits) = decode_step(tape, store, &dec, state, sp.attended, se.reweighted, drop)?;
            let logp = tape.log_softmax(logits)?;
            terms.push(tape.pick(logp, target)?);
            state = next;
            state.prev_token = target;
        }
        let joined = tape.concat(&terms)?;
        let total = tape.sum(joined);
        Ok((tape.scale(total, -1.0), terms.len()))
    }

    /// Greedy decoding: the argmax word (lowest id on ties) at every step
    /// until END or `max_len` words.
    pub fn greedy_decode(&self, store: &ParameterStore, image: &ImageInputs, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.decode_trace(store, image, max_len)?.tokens)
    }

    pub fn decode_trace(
        &self,
        store: &ParameterStore,
        image: &ImageInputs,
        max_len: usize,
    ) -> Result<DecodeTrace> {
        self.check_inputs(image)?;
        if max_len == 0 {
            return Err(Error::Contract("max_len must be at least 1".into()));
        }
        let dec = self.config.decoder();
        let mut tape = Tape::new();
        let features = tape.leaf(image.features.clone());
        let topic = tape.leaf(image.topic.clone());
        let attrs = tape.leaf(image.attributes.clone());
        let mut state = init_step(&mut tape, store, &dec, topic, &mut None)?;
        let mut trace = DecodeTrace {
            tokens: Vec::new(),
            spatial: Vec::new(),
            semantic: Vec::new(),
            emitted: Vec::new(),
        };
        for step in 1..=max_len {
            let sp = spatial_attend(&mut tape, store, features, topic, state.h)?;
            let se = semantic_attend(&mut tape, store, attrs, topic, state.h)?;
            let (next, logits) = decode_step(&mut tape, store, &dec, state, sp.attended, se.reweighted, &mut None)?;
            trace.spatial.push(weights_of(&tape, sp.alpha, step));
            trace.semantic.push(weights_of(&tape, se.beta, step));
            let logits = tape.value(logits);
            if !logits.all_finite() {
                return Err(Error::Numeric(format!("non-finite logits at step {step}")));
            }
            let token = logits.argmax();
            trace.emitted.push(token);
            if token == END {
                break;
            }
            trace.tokens.push(token);
            state = next;
            state.prev_token = token;
        }
        Ok(trace)
    }

    /// Vocabulary distribution `p_t` at every teacher-forced step.
    pub fn step_distributions(
        &self,
        store: &ParameterStore,
        image: &ImageInputs,
        tokens: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(image)?;
        let dec = self.config.decoder();
        let mut tape = Tape::new();
        let features = tape.leaf(image.features.clone());
        let topic = tape.leaf(image.topic.clone());
        let attrs = tape.leaf(image.attributes.clone());
        let mut state = init_step(&mut tape, store, &dec, topic, &mut None)?;
        let mut out = Vec::new();
        for &target in tokens.iter().chain(std::iter::once(&END)) {
            let sp = spatial_attend(&mut tape, store, features, topic, state.h)?;
            let se = semantic_attend(&mut tape, store, attrs, topic, state.h)?;
            let (next, logits) = decode_step(&mut tape, store, &dec, state, sp.attended, se.reweighted, &mut None)?;
            let p = tape.softmax(logits)?;
            out.push(tape.value(p).data().to_vec());
            state = next;
            state.prev_token = target;
        }
        Ok(out)
    }
}
