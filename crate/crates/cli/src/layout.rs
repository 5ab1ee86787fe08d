//! Fixed file layout under `--out-dir`.

use std::path::{Path, PathBuf};

use tgcap_core::model::Variant;

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir().join("train.jsonl")
    }

    pub fn val_manifest(&self) -> PathBuf {
        self.data_dir().join("val.jsonl")
    }

    pub fn lda_model(&self) -> PathBuf {
        self.root.join("lda/model.tgld")
    }

    pub fn lda_words(&self) -> PathBuf {
        self.root.join("lda/words.txt")
    }

    pub fn lda_assignments(&self) -> PathBuf {
        self.root.join("lda/assignments.tsv")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab/words.txt")
    }

    pub fn attributes(&self) -> PathBuf {
        self.root.join("vocab/attributes.txt")
    }

    pub fn topic_probe(&self) -> PathBuf {
        self.root.join("probes/topic.tgcp")
    }

    pub fn attribute_probe(&self) -> PathBuf {
        self.root.join("probes/attribute.tgcp")
    }

    pub fn model_dir(&self, v: Variant) -> PathBuf {
        self.root.join("models").join(v.as_str())
    }

    pub fn checkpoint(&self, v: Variant) -> PathBuf {
        self.model_dir(v).join("model.tgcp")
    }

    pub fn epoch_checkpoint(&self, v: Variant, epoch: usize) -> PathBuf {
        self.model_dir(v).join(format!("epoch-{:04}.tgcp", epoch + 1))
    }

    pub fn loss_log(&self, v: Variant) -> PathBuf {
        self.model_dir(v).join("loss.csv")
    }

    pub fn run_settings(&self, v: Variant) -> PathBuf {
        self.model_dir(v).join("run.conf")
    }

    pub fn eval_dir(&self, v: Variant) -> PathBuf {
        self.root.join("eval").join(v.as_str())
    }

    pub fn captions(&self, v: Variant) -> PathBuf {
        self.root.join("captions").join(format!("{}.txt", v.as_str()))
    }

    pub fn attention_dir(&self, v: Variant) -> PathBuf {
        self.root.join("attention").join(v.as_str())
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

pub fn write_text(path: &Path, text: &str) -> tgcap_core::Result<()> {
    tgcap_core::binio::write_file(path, text.as_bytes())
}
