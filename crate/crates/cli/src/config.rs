//! Builds core configurations from layered settings.

use std::path::Path;

use tgcap_core::data::attributes::load_merge_map;
use tgcap_core::data::synth::SynthConfig;
use tgcap_core::lda::LdaConfig;
use tgcap_core::model::Variant;
use tgcap_core::pipeline::PipelineConfig;
use tgcap_core::probe::ProbeConfig;
use tgcap_core::training::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

/// Default validation split size for `synth`.
pub const DEFAULT_VAL_IMAGES: usize = 100;

/// Parses `WxH`, e.g. `3x3`.
pub fn parse_grid(text: &str) -> Result<[usize; 2], String> {
    let (w, h) = text
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {text:?}"))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok([parse(w)?, parse(h)?])
}

pub fn synth_config(s: &Settings) -> CliResult<SynthConfig> {
    let d = SynthConfig::default();
    let grid = match s.raw("grid") {
        None => d.grid,
        Some((v, src)) => parse_grid(&v).map_err(|e| CliError::usage(format!("invalid value for {src}: {e}")))?,
    };
    let cfg = SynthConfig {
        seed: s.get("seed", d.seed)?,
        images: s.get("images", d.images)?,
        captions_per_image: s.get("captions-per-image", d.captions_per_image)?,
        topics: s.get("topics", d.topics)?,
        attributes: s.get("attributes", d.attributes)?,
        grid,
        feature_dim: s.get("feature-dim", d.feature_dim)?,
        max_caption_len: s.get("max-caption-len", d.max_caption_len)?,
        signal_regions: s.get("signal-regions", d.signal_regions)?,
        distractor_regions: s.get("distractor-regions", d.distractor_regions)?,
        topic_regions: s.get("topic-regions", d.topic_regions)?,
        noise: s.get("noise", d.noise)?,
        topic_strength: s.get("topic-strength", d.topic_strength)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn lda_config(s: &Settings) -> CliResult<LdaConfig> {
    let d = LdaConfig::default();
    Ok(LdaConfig {
        topics: s.get("topics", d.topics)?,
        alpha: s.opt("alpha")?.or(d.alpha),
        eta: s.get("eta", d.eta)?,
        iterations: s.get("lda-iterations", d.iterations)?,
        infer_iterations: s.get("infer-iterations", d.infer_iterations)?,
        seed: s.get("seed", d.seed)?,
    })
}

pub fn train_config(s: &Settings) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: s.get("learning-rate", d.learning_rate)?,
        batch_size: s.get("batch-size", d.batch_size)?,
        dropout: s.get("dropout", d.dropout)?,
        lambda: s.get("lambda", d.lambda)?,
        beta1: s.get("beta1", d.beta1)?,
        beta2: s.get("beta2", d.beta2)?,
        epsilon: s.get("epsilon", d.epsilon)?,
        epochs: s.get("epochs", d.epochs)?,
        seed: s.get("seed", d.seed)?,
        max_caption_len: s.get("max-caption-len", d.max_caption_len)?,
        clip: s.opt("clip")?.or(d.clip),
        patience: s.opt("patience")?.or(d.patience),
        stop_below: s.opt("stop-below")?.or(d.stop_below),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn variant(s: &Settings) -> CliResult<Variant> {
    s.get("variant", Variant::TopicBoth)
}

pub fn pipeline_config(s: &Settings) -> CliResult<PipelineConfig> {
    let d = PipelineConfig::default();
    let merge = match s.raw("merge-map") {
        None => d.merge.clone(),
        Some((path, _)) => load_merge_map(Path::new(&path))?,
    };
    Ok(PipelineConfig {
        lda: lda_config(s)?,
        min_count: s.get("min-count", d.min_count)?,
        attribute_candidates: s.get("attribute-candidates", d.attribute_candidates)?,
        top_k: s.get("top-k", d.top_k)?,
        merge,
        topic_source: s.get("topic-source", d.topic_source)?,
        attribute_source: s.get("attribute-source", d.attribute_source)?,
        probe: ProbeConfig {
            epochs: s.get("probe-epochs", d.probe.epochs)?,
            learning_rate: s.get("probe-learning-rate", d.probe.learning_rate)?,
        },
        hidden_dim: s.get("hidden-dim", d.hidden_dim)?,
        input_dim: s.get("input-dim", d.input_dim)?,
        embed_dim: s.get("embed-dim", d.embed_dim)?,
        spatial_proj_dim: s.get("spatial-proj-dim", d.spatial_proj_dim)?,
        spatial_mlp_dim: s.get("spatial-mlp-dim", d.spatial_mlp_dim)?,
        semantic_proj_dim: s.get("semantic-proj-dim", d.semantic_proj_dim)?,
        variant: variant(s)?,
        topic_init: !s.flag("no-topic-init")?,
        train: train_config(s)?,
        smooth_bleu: s.flag("smooth")?,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use tgcap_core::pipeline::TopicSource;

    fn settings(pairs: &[(&str, &str)]) -> Settings {
        let flags: BTreeMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Settings::new(flags, BTreeMap::new())
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("3x4"), Ok([3, 4]));
        assert!(parse_grid("3").is_err());
    }

    #[test]
    fn defaults_match_core() {
        let cfg = pipeline_config(&settings(&[])).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn values_flow_into_configs() {
        let cfg = pipeline_config(&settings(&[
            ("variant", "base"),
            ("no-topic-init", "true"),
            ("topic-source", "lda"),
            ("epochs", "3"),
            ("stop-below", "0.1"),
            ("topics", "4"),
        ]))
        .unwrap();
        assert_eq!(cfg.variant, Variant::Base);
        assert!(!cfg.topic_init);
        assert_eq!(cfg.topic_source, TopicSource::Lda);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.stop_below, Some(0.1));
        assert_eq!(cfg.lda.topics, 4);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let e = pipeline_config(&settings(&[("variant", "t-x")])).unwrap_err();
        assert_eq!(e.code, crate::error::EXIT_USAGE);
        assert!(e.message.contains("--variant"));
        let e = synth_config(&settings(&[("grid", "9")])).unwrap_err();
        assert!(e.message.contains("--grid"));
    }
}
