use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgcap_core::data::io::DatasetManifest;
use tgcap_core::data::synth::{generate, SynthConfig};
use tgcap_core::lda::{purity, LdaConfig};
use tgcap_core::pipeline::TopicModel;

fn planted_labels(cfg: &SynthConfig) -> (DatasetManifest, Vec<usize>, Vec<usize>) {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(cfg).unwrap();
    let manifest = ds.manifest(0..cfg.images, dir.path());
    let lda = LdaConfig {
        topics: cfg.topics,
        seed: cfg.seed,
        ..LdaConfig::default()
    };
    let model = TopicModel::fit(&manifest, &lda).unwrap();
    let labels: Vec<usize> = model.label(&manifest, 50, 0).iter().map(|l| l.label).collect();
    let truth: Vec<usize> = manifest.records.iter().map(|r| r.planted_topic.unwrap()).collect();
    (manifest, labels, truth)
}

#[test]
fn caption_topics_are_recoverable_and_shuffling_destroys_them() {
    let cfg = SynthConfig {
        seed: 4,
        ..SynthConfig::default()
    };
    let (_, labels, truth) = planted_labels(&cfg);
    let recovered = purity(&labels, &truth);
    assert!(recovered > 0.9, "purity {recovered}");

    let mut shuffled = truth.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let destroyed = purity(&labels, &shuffled);
    assert!(destroyed < 0.5, "purity after shuffling {destroyed}");
}

#[test]
fn manifest_loading_scales_linearly() {
    let base = SynthConfig {
        images: 100,
        captions_per_image: 5,
        ..SynthConfig::default()
    };
    let record = generate(&base).unwrap().manifest(0..100, std::path::Path::new(".")).to_text();
    let mut lines = record.lines();
    let header = lines.next().unwrap().to_string();
    let body: Vec<&str> = lines.collect();

    let build = |n: usize| -> String {
        let mut out = header.clone();
        out.push('\n');
        for i in 0..n {
            let line = body[i % body.len()].replacen("img000", &format!("big{i:07}_"), 1);
            out.push_str(&line);
            out.push('\n');
        }
        out
    };
    let time = |text: &str, n: usize| -> f64 {
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            let m = DatasetManifest::from_text(text, "memory", ".".into()).unwrap();
            best = best.min(start.elapsed().as_secs_f64());
            assert_eq!(m.records.len(), n);
        }
        best
    };
    let small = build(100);
    let large = build(10_000);
    let (t_small, t_large) = (time(&small, 100), time(&large, 10_000));
    // 100× the records; quadratic behaviour would be ~10⁴×
    let ratio = t_large / t_small.max(1e-7);
    assert!(ratio < 1000.0, "100 records {t_small:.2e}s, 10^4 records {t_large:.2e}s");
}
