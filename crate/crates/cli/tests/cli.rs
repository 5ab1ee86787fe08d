use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tgcap_core::checkpoint;

const SMALL: &str = "\
images = 48
val-images = 8
captions-per-image = 2
lda-iterations = 40
infer-iterations = 20
probe-epochs = 50
hidden-dim = 12
input-dim = 12
embed-dim = 8
spatial-proj-dim = 8
spatial-mlp-dim = 8
semantic-proj-dim = 8
epochs = 2
batch-size = 8
seed = 5
";

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.conf");
        fs::write(&config, SMALL).unwrap();
        Run { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_tgcap"));
        c.arg("--out-dir").arg(self.out()).arg("--config").arg(&self.config).args(args);
        for (k, _) in std::env::vars() {
            if k.starts_with("TGCAP_") {
                c.env_remove(k);
            }
        }
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "tgcap {args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn prepare(&self) {
        self.ok(&["synth"]);
        self.ok(&["lda"]);
        self.ok(&["vocab"]);
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.out().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_manifest_exits_with_data_error_naming_path() {
    let r = Run::new();
    let o = r.run(&["train", "--train", "no/such/train.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/train.jsonl"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    let r = Run::new();
    let o = r.run(&["synth", "--images", "many"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--images"));

    let o = r.run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let o = r.cmd(&["synth"]).env("TGCAP_NOISE", "loud").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("TGCAP_NOISE"));

    let bad = r.dir.path().join("bad.conf");
    fs::write(&bad, "no-such-key = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tgcap"))
        .args(["--config", bad.to_str().unwrap(), "synth"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.conf:1"));

    let o = r.run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn steps_out_of_order_say_what_to_run() {
    let r = Run::new();
    r.ok(&["synth"]);
    let o = r.run(&["vocab"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tgcap lda"));
    r.ok(&["lda"]);
    r.ok(&["vocab"]);
    let o = r.run(&["eval", "--variant", "t-v"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("models/t-v/model.tgcp"));
}

#[test]
fn exploding_training_exits_with_numeric_error() {
    let r = Run::new();
    r.prepare();
    let o = r.run(&["train", "--learning-rate", "1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("--learning-rate"));
}

#[test]
fn settings_precedence_flag_env_file() {
    let r = Run::new();
    r.prepare();
    let epochs = |r: &Run| {
        let log = String::from_utf8(r.read("models/t-va/loss.csv")).unwrap();
        log.lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    };
    r.ok(&["train"]);
    assert_eq!(epochs(&r), 2);
    let o = r.cmd(&["train"]).env("TGCAP_EPOCHS", "3").output().unwrap();
    assert!(o.status.success());
    assert_eq!(epochs(&r), 3);
    let o = r.cmd(&["train", "--epochs", "1"]).env("TGCAP_EPOCHS", "3").output().unwrap();
    assert!(o.status.success());
    assert_eq!(epochs(&r), 1);
}

fn topic_attention_params(path: &Path) -> Vec<String> {
    let store = checkpoint::load(path).unwrap();
    store
        .names()
        .filter(|n| n.starts_with("spatial.topic") || n.starts_with("semantic.topic"))
        .map(String::from)
        .collect()
}

#[test]
fn base_checkpoint_has_no_topic_attention_weights() {
    let r = Run::new();
    r.prepare();
    for v in ["base", "t-v", "t-a", "t-va"] {
        r.ok(&["train", "--variant", v, "--epochs", "1"]);
    }
    let names = |v: &str| topic_attention_params(&r.out().join(format!("models/{v}/model.tgcp")));
    assert!(names("base").is_empty(), "{:?}", names("base"));
    assert!(names("t-v").iter().all(|n| n.starts_with("spatial.")) && !names("t-v").is_empty());
    assert!(names("t-a").iter().all(|n| n.starts_with("semantic.")) && !names("t-a").is_empty());
    let both = names("t-va");
    assert!(both.iter().any(|n| n.starts_with("spatial.")) && both.iter().any(|n| n.starts_with("semantic.")));

    let o = r.run(&["eval", "--variant", "base"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn ablate_emits_four_rows_in_table_order() {
    let r = Run::new();
    r.prepare();
    let out = r.ok(&["ablate", "--epochs", "1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "variant\tBLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tROUGE-L");
    let rows: Vec<&str> = lines[1..].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["base", "t-v", "t-a", "t-va"]);
    for l in &lines[1..] {
        let vals: Vec<f64> = l.split('\t').skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(vals.len(), 5);
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(r.read("ablate/table.txt"), out.as_bytes());
}

#[test]
fn caption_and_attention_exports() {
    let r = Run::new();
    r.prepare();
    r.ok(&["train"]);
    let caps = r.ok(&["caption", "--image-ids", "img00041,img00040"]);
    let ids: Vec<&str> = caps.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ids, ["img00040", "img00041"]);

    let o = r.run(&["caption", "--image-ids", "img99999"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--image-ids"));

    r.ok(&["export-attention", "--image-ids", "img00040", "--pgm"]);
    let sp = String::from_utf8(r.read("attention/t-va/img00040.spatial.txt")).unwrap();
    let steps: Vec<&str> = sp.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(!steps.is_empty());
    for l in &steps {
        let fields: Vec<&str> = l.split('\t').collect();
        assert_eq!(fields.len(), 3);
        let w: Vec<f64> = fields[2].split(' ').map(|x| x.parse().unwrap()).collect();
        assert_eq!(w.len(), 9);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let pgm = r.read("attention/t-va/img00040.step01.pgm");
    assert!(pgm.starts_with(b"P5\n48 48\n255\n"));
    assert_eq!(pgm.len(), b"P5\n48 48\n255\n".len() + 48 * 48);
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = Run::new();
    let b = Run::new();
    for r in [&a, &b] {
        r.prepare();
        r.ok(&["train"]);
        r.ok(&["eval"]);
    }
    for rel in [
        "data/train.jsonl",
        "data/features/img00003.tgfv",
        "lda/model.tgld",
        "lda/assignments.tsv",
        "vocab/words.txt",
        "probes/topic.tgcp",
        "models/t-va/model.tgcp",
        "models/t-va/epoch-0001.tgcp",
        "models/t-va/loss.csv",
        "eval/t-va/report.txt",
        "eval/t-va/per_image.tsv",
    ] {
        assert_eq!(a.read(rel), b.read(rel), "{rel} differs");
    }
    let report = String::from_utf8(a.read("eval/t-va/report.txt")).unwrap();
    for name in ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L"] {
        assert!(report.contains(&format!("{name}\t")));
    }
}
