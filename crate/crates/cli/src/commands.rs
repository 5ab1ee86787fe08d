use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tgcap_core::binio::{read_file, write_file};
use tgcap_core::checkpoint;
use tgcap_core::data::attributes::AttributeVocabulary;
use tgcap_core::data::io::DatasetManifest;
use tgcap_core::data::synth::generate;
use tgcap_core::data::vocab::Vocabulary;
use tgcap_core::lda::{assignment_line, purity, LdaConfig, LdaModel, LdaVocabulary};
use tgcap_core::model::{CaptionModel, Variant};
use tgcap_core::pipeline::{
    ablate, ablation_table, caption_split, evaluate, train_variant, Artifacts, PipelineConfig, PreparedSplit,
    TopicModel,
};
use tgcap_core::probe::{AttributeProbe, TopicProbe};
use tgcap_core::ParameterStore;

use crate::config::{self, DEFAULT_VAL_IMAGES};
use crate::error::{CliError, CliResult};
use crate::layout::{write_text, Layout};
use crate::settings::{self, Settings};

pub struct Context {
    pub layout: Layout,
    pub settings: Settings,
}

fn require(path: &Path, producer: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{} not found; run `tgcap {producer}` first",
            path.display()
        )))
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    String::from_utf8(read_file(path)?).map_err(|_| CliError::data(format!("{} is not valid UTF-8", path.display())))
}

fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    Ok(DatasetManifest::load(path)?)
}

/// Keeps only the comma-separated image ids in `images`, in manifest order.
fn select_images(mut manifest: DatasetManifest, images: Option<&str>) -> CliResult<DatasetManifest> {
    let Some(list) = images else {
        return Ok(manifest);
    };
    let wanted: BTreeSet<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let known: BTreeSet<&str> = manifest.records.iter().map(|r| r.image_id.as_str()).collect();
    if let Some(missing) = wanted.iter().find(|id| !known.contains(*id)) {
        return Err(CliError::usage(format!("--image-ids: unknown image id {missing:?}")));
    }
    manifest.records.retain(|r| wanted.contains(r.image_id.as_str()));
    Ok(manifest)
}

fn load_topic_model(layout: &Layout, cfg: &LdaConfig) -> CliResult<TopicModel> {
    require(&layout.lda_model(), "lda")?;
    let lda = LdaModel::load(&layout.lda_model(), cfg)?;
    let words = LdaVocabulary::from_text(&read_text(&layout.lda_words())?);
    if words.len() != lda.vocab_size {
        return Err(CliError::data(format!(
            "{} lists {} words but {} has {}",
            layout.lda_words().display(),
            words.len(),
            layout.lda_model().display(),
            lda.vocab_size
        )));
    }
    Ok(TopicModel { lda, words })
}

fn load_artifacts(layout: &Layout, cfg: &PipelineConfig) -> CliResult<Artifacts> {
    let topics = load_topic_model(layout, &cfg.lda)?;
    for p in [layout.vocab(), layout.attributes(), layout.topic_probe(), layout.attribute_probe()] {
        require(&p, "vocab")?;
    }
    let topic_probe = TopicProbe::load(&layout.topic_probe())?;
    if topic_probe.topics() != topics.lda.topics {
        return Err(CliError::data(format!(
            "{} predicts {} topics but the topic model has {}",
            layout.topic_probe().display(),
            topic_probe.topics(),
            topics.lda.topics
        )));
    }
    Ok(Artifacts {
        vocab: Vocabulary::load(&layout.vocab())?,
        attributes: AttributeVocabulary::load(&layout.attributes())?,
        topics,
        topic_probe,
        attribute_probe: AttributeProbe::load(&layout.attribute_probe())?,
        topic_accuracy: f64::NAN,
        attribute_accuracy: f64::NAN,
    })
}

fn manifest_or(path: Option<PathBuf>, default: PathBuf) -> PathBuf {
    path.unwrap_or(default)
}

pub fn synth(ctx: &Context) -> CliResult<()> {
    let cfg = config::synth_config(&ctx.settings)?;
    let val: usize = ctx.settings.get("val-images", DEFAULT_VAL_IMAGES)?;
    let ds = generate(&cfg)?;
    let (train, val_path) = ds.write(&ctx.layout.data_dir(), val)?;
    println!(
        "wrote {} training and {} validation images to {} and {}",
        cfg.images - val,
        val,
        train.display(),
        val_path.display()
    );
    Ok(())
}

pub fn lda(ctx: &Context, train: Option<PathBuf>, val: Option<PathBuf>) -> CliResult<()> {
    let cfg = config::lda_config(&ctx.settings)?;
    let train_path = manifest_or(train, ctx.layout.train_manifest());
    let train = load_manifest(&train_path)?;
    let model = TopicModel::fit(&train, &cfg)?;
    model.lda.save(&ctx.layout.lda_model())?;
    write_text(&ctx.layout.lda_words(), &model.words.to_text())?;

    let mut splits = vec![train];
    let val_path = val.unwrap_or_else(|| ctx.layout.val_manifest());
    if val_path.exists() {
        splits.push(load_manifest(&val_path)?);
    }
    let mut out = String::new();
    for split in &splits {
        let labels = model.label(split, cfg.infer_iterations, cfg.seed);
        for (rec, inf) in split.records.iter().zip(&labels) {
            out.push_str(&assignment_line(&rec.image_id, inf));
        }
    }
    write_text(&ctx.layout.lda_assignments(), &out)?;

    let train = &splits[0];
    let planted: Option<Vec<usize>> = train.records.iter().map(|r| r.planted_topic).collect();
    if let Some(truth) = planted {
        let labels: Vec<usize> = model
            .label(train, cfg.infer_iterations, cfg.seed)
            .iter()
            .map(|l| l.label)
            .collect();
        println!("topic purity against planted topics: {:.4}", purity(&labels, &truth));
    }
    println!(
        "fitted {} topics over {} words; model in {}",
        model.lda.topics,
        model.words.len(),
        ctx.layout.lda_model().display()
    );
    Ok(())
}

pub fn vocab(ctx: &Context, train: Option<PathBuf>) -> CliResult<()> {
    let cfg = config::pipeline_config(&ctx.settings)?;
    let train_path = manifest_or(train, ctx.layout.train_manifest());
    let train = load_manifest(&train_path)?;
    let topics = load_topic_model(&ctx.layout, &cfg.lda)?;
    let captions = train.all_captions();
    let vocab = Vocabulary::build(&captions, cfg.min_count)?;
    let attributes = AttributeVocabulary::build(&captions, cfg.attribute_candidates, &cfg.merge)?;
    let art = Artifacts::fit_probes(vocab, attributes, topics, &train, &cfg)?;
    art.vocab.save(&ctx.layout.vocab())?;
    art.attributes.save(&ctx.layout.attributes())?;
    art.topic_probe.save(&ctx.layout.topic_probe())?;
    art.attribute_probe.save(&ctx.layout.attribute_probe())?;
    println!(
        "vocabulary {} words, {} attributes; probe accuracy topic {:.4}, attributes {:.4}",
        art.vocab.len(),
        art.attributes.len(),
        art.topic_accuracy,
        art.attribute_accuracy
    );
    Ok(())
}

pub fn train(ctx: &Context, train: Option<PathBuf>) -> CliResult<()> {
    let cfg = config::pipeline_config(&ctx.settings)?;
    let train_path = manifest_or(train, ctx.layout.train_manifest());
    let manifest = load_manifest(&train_path)?;
    let art = load_artifacts(&ctx.layout, &cfg)?;
    let split = art.prepare(&manifest, &cfg)?;
    let variant = cfg.variant;
    let layout = &ctx.layout;
    let (_, store, report) = train_variant(&art, &split, &cfg, manifest.header.feature_dim, |e, store| {
        log::info!("epoch {} loss {:.6} token nll {:.6}", e.epoch + 1, e.loss, e.token_nll);
        checkpoint::save(store, &layout.epoch_checkpoint(variant, e.epoch))
    })
    .map_err(|e| {
        let numeric = matches!(e, tgcap_core::Error::Numeric(_));
        let mut err = CliError::from(e);
        if numeric {
            err.message.push_str("; try a smaller --learning-rate or set --clip");
        }
        err
    })?;
    checkpoint::save(&store, &layout.checkpoint(variant))?;
    write_text(&layout.loss_log(variant), &report.loss_log())?;
    write_text(&layout.run_settings(variant), &ctx.settings.record(settings::KEYS))?;
    let last = report.epochs.last();
    println!(
        "trained {variant} for {} epochs{}; final token NLL {:.6}; checkpoint {}",
        report.epochs.len(),
        if report.stopped_early { " (stopped early)" } else { "" },
        last.map_or(f64::NAN, |e| e.token_nll),
        layout.checkpoint(variant).display()
    );
    Ok(())
}

/// Trained model plus the settings it was trained with layered underneath
/// the current ones.
struct Trained {
    cfg: PipelineConfig,
    art: Artifacts,
    model: CaptionModel,
    store: ParameterStore,
    variant: Variant,
}

fn load_trained(ctx: &Context) -> CliResult<Trained> {
    let variant = config::variant(&ctx.settings)?;
    let ckpt = ctx.layout.checkpoint(variant);
    require(&ckpt, &format!("train --variant {variant}"))?;
    let conf = ctx.layout.run_settings(variant);
    let recorded = if conf.exists() { settings::load_file(&conf)? } else { Default::default() };
    let layered = ctx.settings.clone().with_fallback(recorded);
    let cfg = config::pipeline_config(&layered)?;
    let art = load_artifacts(&ctx.layout, &cfg)?;
    let store = checkpoint::load(&ckpt)?;
    let model = CaptionModel::from_store(&store, Some(art.topics.lda.topics))?;
    if model.config.variant != variant {
        return Err(CliError::data(format!(
            "{} holds a {} model, expected {variant}",
            ckpt.display(),
            model.config.variant
        )));
    }
    Ok(Trained {
        cfg,
        art,
        model,
        store,
        variant,
    })
}

fn prepare_split(ctx: &Context, t: &Trained, manifest: Option<PathBuf>, images: Option<&str>) -> CliResult<(DatasetManifest, PreparedSplit)> {
    let path = manifest_or(manifest, ctx.layout.val_manifest());
    let m = select_images(load_manifest(&path)?, images)?;
    if m.header.feature_dim != t.model.config.feature_dim {
        return Err(CliError::data(format!(
            "{} has {}-dimensional features but the model expects {}",
            path.display(),
            m.header.feature_dim,
            t.model.config.feature_dim
        )));
    }
    let split = t.art.prepare(&m, &t.cfg)?;
    Ok((m, split))
}

pub fn caption(ctx: &Context, manifest: Option<PathBuf>, images: Option<&str>) -> CliResult<()> {
    let t = load_trained(ctx)?;
    let (_, split) = prepare_split(ctx, &t, manifest, images)?;
    let captions = caption_split(&t.model, &t.store, &t.art.vocab, &split, t.cfg.train.max_caption_len)?;
    let mut out = String::new();
    for (id, c) in split.ids.iter().zip(&captions) {
        writeln!(out, "{id}\t{c}").unwrap();
    }
    write_text(&ctx.layout.captions(t.variant), &out)?;
    print!("{out}");
    Ok(())
}

pub fn eval(ctx: &Context, manifest: Option<PathBuf>, images: Option<&str>) -> CliResult<()> {
    let t = load_trained(ctx)?;
    let (_, split) = prepare_split(ctx, &t, manifest, images)?;
    let report = evaluate(
        &t.model,
        &t.store,
        &t.art.vocab,
        &split,
        t.cfg.train.max_caption_len,
        t.cfg.smooth_bleu,
    )?;
    let dir = ctx.layout.eval_dir(t.variant);
    write_text(&dir.join("report.txt"), &report.to_text())?;
    write_text(&dir.join("per_image.tsv"), &report.dump())?;
    print!("{}", report.to_text());
    Ok(())
}

/// `step<TAB>token<TAB>w_1 … w_m`.
fn weight_line(step: usize, token: &str, weights: &[f64]) -> String {
    let w: Vec<String> = weights.iter().map(|x| format!("{x:.9}")).collect();
    format!("{step}\t{token}\t{}\n", w.join(" "))
}

const PGM_CELL: usize = 16;

/// Binary greyscale image of spatial weights laid out on the region grid,
/// scaled so the largest weight is white.
pub fn attention_pgm(weights: &[f64], grid: [usize; 2]) -> Vec<u8> {
    let [gw, gh] = grid;
    let (w, h) = (gw * PGM_CELL, gh * PGM_CELL);
    let peak = weights.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let r = (y / PGM_CELL) * gw + x / PGM_CELL;
            let v = weights.get(r).copied().unwrap_or(0.0);
            let level = if peak > 0.0 { (v / peak * 255.0).round() } else { 0.0 };
            out.push(level.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn export_attention(ctx: &Context, manifest: Option<PathBuf>, images: Option<&str>, pgm: bool) -> CliResult<()> {
    let t = load_trained(ctx)?;
    let (m, split) = prepare_split(ctx, &t, manifest, images)?;
    let grid = m.header.grid;
    if pgm && grid[0] * grid[1] != m.header.regions {
        return Err(CliError::data(format!(
            "grid {}x{} does not cover {} regions",
            grid[0], grid[1], m.header.regions
        )));
    }
    let dir = ctx.layout.attention_dir(t.variant);
    for (id, img) in split.ids.iter().zip(&split.images) {
        let trace = t.model.decode_trace(&t.store, img, t.cfg.train.max_caption_len)?;
        let words: Vec<String> = trace
            .emitted
            .iter()
            .map(|&tok| t.art.vocab.word(tok).unwrap_or("<unk>").to_string())
            .collect();
        let mut sp = String::new();
        let mut se = format!("# {}\n", t.art.attributes.names().join(" "));
        for ((a, b), word) in trace.spatial.iter().zip(&trace.semantic).zip(&words) {
            sp.push_str(&weight_line(a.step, word, &a.weights));
            se.push_str(&weight_line(b.step, word, &b.weights));
            if pgm {
                write_file(
                    &dir.join(format!("{id}.step{:02}.pgm", a.step)),
                    &attention_pgm(&a.weights, grid),
                )?;
            }
        }
        write_text(&dir.join(format!("{id}.spatial.txt")), &sp)?;
        write_text(&dir.join(format!("{id}.semantic.txt")), &se)?;
    }
    println!("attention for {} images in {}", split.ids.len(), dir.display());
    Ok(())
}

pub fn ablate_cmd(ctx: &Context, train: Option<PathBuf>, val: Option<PathBuf>) -> CliResult<()> {
    let cfg = config::pipeline_config(&ctx.settings)?;
    let train = load_manifest(&manifest_or(train, ctx.layout.train_manifest()))?;
    let val = load_manifest(&manifest_or(val, ctx.layout.val_manifest()))?;
    if train.header.feature_dim != val.header.feature_dim {
        return Err(CliError::data("training and validation manifests disagree on feature_dim"));
    }
    let art = load_artifacts(&ctx.layout, &cfg)?;
    let tp = art.prepare(&train, &cfg)?;
    let vp = art.prepare(&val, &cfg)?;
    let rows = ablate(&art, &tp, &vp, &cfg, train.header.feature_dim)?;
    let table = ablation_table(&rows);
    write_text(&ctx.layout.ablate_dir().join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
