//! Layered settings: command-line flags override `TGCAP_*` environment
//! variables, which override the `--config` file, which overrides values
//! recorded next to a trained model.
//!
//! The config file holds `key = value` lines using the kebab-case flag
//! names; `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

/// Every tunable key, shared by flags, environment and config files.
pub const KEYS: &[&str] = &[
    "alpha",
    "attribute-candidates",
    "attribute-source",
    "attributes",
    "batch-size",
    "beta1",
    "beta2",
    "captions-per-image",
    "clip",
    "distractor-regions",
    "dropout",
    "embed-dim",
    "epochs",
    "epsilon",
    "eta",
    "feature-dim",
    "grid",
    "hidden-dim",
    "images",
    "infer-iterations",
    "input-dim",
    "lambda",
    "lda-iterations",
    "learning-rate",
    "max-caption-len",
    "merge-map",
    "min-count",
    "no-topic-init",
    "noise",
    "patience",
    "probe-epochs",
    "probe-learning-rate",
    "seed",
    "semantic-proj-dim",
    "signal-regions",
    "smooth",
    "spatial-mlp-dim",
    "spatial-proj-dim",
    "stop-below",
    "top-k",
    "topic-regions",
    "topic-source",
    "topic-strength",
    "topics",
    "val-images",
    "variant",
];

/// `learning-rate` → `TGCAP_LEARNING_RATE`.
pub fn env_name(key: &str) -> String {
    format!("TGCAP_{}", key.to_uppercase().replace('-', "_"))
}

pub fn parse_file(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!("{origin}:{}: expected key = value", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(CliError::usage(format!("{origin}:{}: unknown setting {k:?}", i + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn load_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_file(&text, &path.display().to_string())
}

#[derive(Clone, Debug, Default)]
pub struct Settings {
    flags: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
    fallback: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(flags: BTreeMap<String, String>, file: BTreeMap<String, String>) -> Self {
        Settings {
            flags,
            file,
            fallback: BTreeMap::new(),
        }
    }

    /// Lowest-precedence layer, e.g. the settings a model was trained with.
    pub fn with_fallback(mut self, fallback: BTreeMap<String, String>) -> Self {
        self.fallback = fallback;
        self
    }

    /// Raw value and where it came from.
    pub fn raw(&self, key: &str) -> Option<(String, String)> {
        debug_assert!(KEYS.contains(&key), "unregistered key {key}");
        if let Some(v) = self.flags.get(key) {
            return Some((v.clone(), format!("--{key}")));
        }
        let env = env_name(key);
        if let Ok(v) = std::env::var(&env) {
            return Some((v, env));
        }
        if let Some(v) = self.file.get(key) {
            return Some((v.clone(), format!("config key {key}")));
        }
        self.fallback.get(key).map(|v| (v.clone(), format!("recorded setting {key}")))
    }

    pub fn get<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn opt<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((v, src)) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|e| CliError::usage(format!("invalid value {v:?} for {src}: {e}"))),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(false),
            Some((v, src)) => match v.trim() {
                "" | "1" | "true" | "yes" => Ok(true),
                "0" | "false" | "no" => Ok(false),
                other => Err(CliError::usage(format!("invalid boolean {other:?} for {src}"))),
            },
        }
    }

    /// `key = value` lines for the given keys that have a value.
    pub fn record(&self, keys: &[&str]) -> String {
        let mut out = String::new();
        for k in keys {
            if let Some((v, _)) = self.raw(k) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
