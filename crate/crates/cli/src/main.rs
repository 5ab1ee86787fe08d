//! `tgcap`: synthesize data, fit topics, train and evaluate topic-guided
//! captioners.

mod commands;
mod config;
mod error;
mod layout;
mod settings;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::error::{CliResult, EXIT_USAGE};
use crate::layout::Layout;
use crate::settings::Settings;

macro_rules! tunables {
    (
        values { $($vf:ident => $vk:literal : $vh:literal),* $(,)? }
        switches { $($sf:ident => $sk:literal : $sh:literal),* $(,)? }
    ) => {
        /// Settings shared by every subcommand; each may also come from the
        /// environment or the config file.
        #[derive(Args, Debug, Default)]
        struct Tunables {
            $(
                #[arg(long = $vk, global = true, value_name = "VALUE", help = $vh, help_heading = "Settings")]
                $vf: Option<String>,
            )*
            $(
                #[arg(long = $sk, global = true, value_name = "BOOL", num_args = 0..=1,
                      default_missing_value = "true", help = $sh, help_heading = "Settings")]
                $sf: Option<String>,
            )*
        }

        impl Tunables {
            fn into_map(self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $(if let Some(v) = self.$vf { m.insert($vk.to_string(), v); })*
                $(if let Some(v) = self.$sf { m.insert($sk.to_string(), v); })*
                m
            }

            #[cfg(test)]
            fn keys() -> Vec<&'static str> {
                vec![$($vk,)* $($sk,)*]
            }
        }
    };
}

tunables! {
    values {
        alpha => "alpha": "LDA document-topic prior [default: 50/K]",
        attribute_candidates => "attribute-candidates": "Most frequent words considered as attributes [default: 256]",
        attribute_source => "attribute-source": "Attribute scores fed to the captioner: oracle or probe [default: oracle]",
        attributes => "attributes": "Attribute nouns in the synthetic dataset [default: 32]",
        batch_size => "batch-size": "Captioner mini-batch size [default: 16]",
        beta1 => "beta1": "Adam first-moment decay [default: 0.9]",
        beta2 => "beta2": "Adam second-moment decay [default: 0.999]",
        captions_per_image => "captions-per-image": "Synthetic captions per image [default: 5]",
        clip => "clip": "Global gradient-norm clip [default: off]",
        distractor_regions => "distractor-regions": "Synthetic regions showing off-topic nouns [default: 2]",
        dropout => "dropout": "Decoder dropout rate [default: 0.5]",
        embed_dim => "embed-dim": "Word embedding width [default: 64]",
        epochs => "epochs": "Captioner training epochs [default: 30]",
        epsilon => "epsilon": "Adam epsilon [default: 1e-8]",
        eta => "eta": "LDA topic-word prior [default: 0.01]",
        feature_dim => "feature-dim": "Synthetic region feature width [default: 32]",
        grid => "grid": "Synthetic region grid as WxH [default: 3x3]",
        hidden_dim => "hidden-dim": "LSTM hidden width [default: 128]",
        images => "images": "Synthetic images, validation split included [default: 500]",
        infer_iterations => "infer-iterations": "Gibbs sweeps when inferring a document's topics [default: 50]",
        input_dim => "input-dim": "LSTM input width [default: 128]",
        lambda => "lambda": "L2 weight penalty [default: 1e-5]",
        lda_iterations => "lda-iterations": "Gibbs sweeps when fitting LDA [default: 500]",
        learning_rate => "learning-rate": "Adam learning rate [default: 0.001]",
        max_caption_len => "max-caption-len": "Longest caption kept for training and decoding [default: 16]",
        merge_map => "merge-map": "File of `surface<TAB>attribute` lines merging attribute words",
        min_count => "min-count": "Minimum word count for the caption vocabulary [default: 1]",
        noise => "noise": "Synthetic per-region noise standard deviation [default: 0.3]",
        patience => "patience": "Stop after this many epochs without loss improvement [default: off]",
        probe_epochs => "probe-epochs": "Training epochs for the topic and attribute probes [default: 300]",
        probe_learning_rate => "probe-learning-rate": "Probe learning rate [default: 0.01]",
        seed => "seed": "Seed for every random choice [default: 0]",
        semantic_proj_dim => "semantic-proj-dim": "Semantic attention projection width [default: 256]",
        signal_regions => "signal-regions": "Synthetic nouns mentioned per caption, 1 or 2 [default: 2]",
        spatial_mlp_dim => "spatial-mlp-dim": "Spatial attention MLP hidden width [default: 256]",
        spatial_proj_dim => "spatial-proj-dim": "Spatial attention projection width [default: 256]",
        stop_below => "stop-below": "Stop once an epoch's mean token NLL falls below this [default: off]",
        top_k => "top-k": "Attribute scores kept per image [default: 10]",
        topic_regions => "topic-regions": "Synthetic regions carrying the topic signature [default: 2]",
        topic_source => "topic-source": "Topic vector fed to the captioner: probe or lda [default: probe]",
        topic_strength => "topic-strength": "Synthetic topic signature scale [default: 1.0]",
        topics => "topics": "Number of topics K [default: 8]",
        val_images => "val-images": "Synthetic validation images [default: 100]",
        variant => "variant": "Captioner variant: base, t-v, t-a or t-va [default: t-va]",
    }
    switches {
        no_topic_init => "no-topic-init": "Do not feed the topic vector at the first decoder step",
        smooth => "smooth": "Add-one smoothing for BLEU-2..4",
    }
}

#[derive(Parser, Debug)]
#[command(name = "tgcap", version, about = "Topic-guided attention image captioning")]
struct Cli {
    /// Root directory for every input and output file.
    #[arg(long, global = true, default_value = "tgcap-out")]
    out_dir: PathBuf,

    /// Settings file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    tunables: Tunables,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted topics.
    Synth,
    /// Fit LDA on training captions and label every image.
    Lda {
        /// Training manifest [default: <out-dir>/data/train.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        train: Option<PathBuf>,
        /// Validation manifest [default: <out-dir>/data/val.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        val: Option<PathBuf>,
    },
    /// Build word and attribute vocabularies and train the probes.
    Vocab {
        /// Training manifest [default: <out-dir>/data/train.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        train: Option<PathBuf>,
    },
    /// Train one captioner variant.
    Train {
        /// Training manifest [default: <out-dir>/data/train.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        train: Option<PathBuf>,
    },
    /// Greedy-decode captions.
    Caption {
        /// Images to process [default: <out-dir>/data/val.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        manifest: Option<PathBuf>,
        /// Comma-separated image ids; all images when omitted.
        #[arg(long, value_name = "IDS")]
        image_ids: Option<String>,
    },
    /// Score greedy captions with BLEU-1..4 and ROUGE-L.
    Eval {
        /// Images to process [default: <out-dir>/data/val.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        manifest: Option<PathBuf>,
        /// Comma-separated image ids; all images when omitted.
        #[arg(long, value_name = "IDS")]
        image_ids: Option<String>,
    },
    /// Dump per-step spatial and semantic attention weights.
    ExportAttention {
        /// Images to process [default: <out-dir>/data/val.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        manifest: Option<PathBuf>,
        /// Comma-separated image ids; all images when omitted.
        #[arg(long, value_name = "IDS")]
        image_ids: Option<String>,
        /// Also write one greyscale PGM heat map per step.
        #[arg(long)]
        pgm: bool,
    },
    /// Train and evaluate all four variants and print a comparison table.
    Ablate {
        /// Training manifest [default: <out-dir>/data/train.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        train: Option<PathBuf>,
        /// Validation manifest [default: <out-dir>/data/val.jsonl]
        #[arg(long, value_name = "MANIFEST")]
        val: Option<PathBuf>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let env = env_logger::Env::new().filter_or("TGCAP_LOG", level);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => settings::load_file(p)?,
        None => BTreeMap::new(),
    };
    let ctx = Context {
        layout: Layout::new(cli.out_dir),
        settings: Settings::new(cli.tunables.into_map(), file),
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Lda { train, val } => commands::lda(&ctx, train, val),
        Command::Vocab { train } => commands::vocab(&ctx, train),
        Command::Train { train } => commands::train(&ctx, train),
        Command::Caption { manifest, image_ids } => commands::caption(&ctx, manifest, image_ids.as_deref()),
        Command::Eval { manifest, image_ids } => commands::eval(&ctx, manifest, image_ids.as_deref()),
        Command::ExportAttention {
            manifest,
            image_ids,
            pgm,
        } => commands::export_attention(&ctx, manifest, image_ids.as_deref(), pgm),
        Command::Ablate { train, val } => commands::ablate_cmd(&ctx, train, val),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
