//! Regularized teacher-forced NLL, mini-batch Adam training and the loss log.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::decoder::DropoutCtx;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ImageInputs};
use crate::optim::{adam_update, clip_grad_norm, AdamConfig};
use crate::params::ParameterStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_caption_len: usize,
    /// Global gradient-norm cap; off when `None`.
    pub clip: Option<f64>,
    /// Stop after this many epochs without a lower mean loss.
    pub patience: Option<usize>,
    /// Stop once an epoch's per-position NLL falls below this value.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 16,
            dropout: 0.5,
            lambda: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            seed: 0,
            max_caption_len: 16,
            clip: None,
            patience: None,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.max_caption_len == 0 {
            return bad("max caption length must be at least 1");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One (image, caption) pair; `image` indexes the image table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionExample {
    pub image: usize,
    pub tokens: Vec<usize>,
}

/// Scalar parts of a batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// `(1/N)·Σ −log p`, summed over positions, averaged over examples.
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
    /// Supervised positions in the batch (words plus END).
    pub tokens: usize,
    /// Unnormalized `Σ −log p`.
    pub nll_sum: f64,
}

/// Dropout stream for one example in one epoch.
fn example_rng(seed: u64, epoch: usize, example: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | example as u64);
    rng
}

/// `λ‖θ‖²` over every parameter in `store`, recorded on `tape`.
fn l2_term(tape: &mut Tape, store: &ParameterStore, lambda: f64) -> Result<Option<Var>> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut parts = Vec::with_capacity(names.len());
    for name in &names {
        let p = tape.param(store, name)?;
        let sq = tape.mul(p, p)?;
        parts.push(tape.sum(sq));
    }
    let joined = tape.concat(&parts)?;
    let total = tape.sum(joined);
    Ok(Some(tape.scale(total, lambda)))
}

/// `−(1/N)·Σᵢ Σₜ log p_t(w_t) + λ‖θ‖²` over a batch under teacher forcing.
///
/// `dropout` carries `(rate, seed, epoch)`; example `j` of the batch draws
/// its masks from its own stream keyed by `ids[j]`.
pub fn caption_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &CaptionModel,
    batch: &[(&ImageInputs, &[usize])],
    lambda: f64,
    dropout: Option<(f64, u64, usize)>,
    ids: &[usize],
) -> Result<(Var, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::Contract("caption loss over an empty batch".into()));
    }
    let mut seq = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for (j, (image, caption)) in batch.iter().enumerate() {
        let mut drop = match dropout {
            Some((rate, seed, epoch)) if rate > 0.0 => Some(DropoutCtx {
                rate,
                rng: example_rng(seed, epoch, ids.get(j).copied().unwrap_or(j)),
            }),
            _ => None,
        };
        let (nll, count) = model.sequence_nll(tape, store, image, caption, &mut drop)?;
        seq.push(nll);
        tokens += count;
    }
    let joined = tape.concat(&seq)?;
    let nll_sum_var = tape.sum(joined);
    let nll = tape.scale(nll_sum_var, 1.0 / batch.len() as f64);
    let (root, reg) = match l2_term(tape, store, lambda)? {
        Some(r) => (tape.add(nll, r)?, tape.value(r).item()),
        None => (nll, 0.0),
    };
    let terms = LossTerms {
        nll: tape.value(nll).item(),
        reg,
        total: tape.value(root).item(),
        tokens,
        nll_sum: tape.value(nll_sum_var).item(),
    };
    if !terms.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", terms.total)));
    }
    Ok((root, terms))
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossRecord {
    pub const HEADER: &'static str = "epoch,batch,nll,reg,total";

    pub fn csv(&self) -> String {
        format!("{},{},{:.17e},{:.17e},{:.17e}", self.epoch, self.batch, self.nll, self.reg, self.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean of the batch totals.
    pub loss: f64,
    /// `Σ −log p / Σ positions` over the epoch.
    pub token_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn loss_log(&self) -> String {
        let mut out = String::from(LossRecord::HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }
}

/// Trains `store` in place. `on_epoch` runs after every epoch (used for
/// checkpointing); an error from it aborts training.
pub fn train<F>(
    model: &CaptionModel,
    store: &mut ParameterStore,
    images: &[ImageInputs],
    examples: &[CaptionExample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&EpochSummary, &ParameterStore) -> Result<()>,
{
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.image >= images.len() {
            return Err(Error::Data(format!("example {i} references missing image {}", ex.image)));
        }
        if ex.tokens.is_empty() {
            return Err(Error::Data(format!("example {i} has an empty caption")));
        }
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= model.config.vocab_size) {
            return Err(Error::Data(format!(
                "example {i} token {t} outside vocabulary of {}",
                model.config.vocab_size
            )));
        }
    }

    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut nll_sum = 0.0;
        let mut positions = 0;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for (b, chunk) in batches.enumerate() {
            let batch: Vec<(&ImageInputs, &[usize])> = chunk
                .iter()
                .map(|&i| (&images[examples[i].image], examples[i].tokens.as_slice()))
                .collect();
            tape.reset();
            let drop = (cfg.dropout > 0.0).then_some((cfg.dropout, cfg.seed, epoch));
            let (root, terms) = caption_loss(&mut tape, store, model, &batch, cfg.lambda, drop, chunk)?;
            tape.backward(root, store)?;
            if let Some(max) = cfg.clip {
                clip_grad_norm(store, max);
            }
            adam_update(store, &adam);

            report.records.push(LossRecord {
                epoch,
                batch: b,
                nll: terms.nll,
                reg: terms.reg,
                total: terms.total,
            });
            loss_sum += terms.total;
            nll_sum += terms.nll_sum;
            positions += terms.tokens;
        }
        let summary = EpochSummary {
            epoch,
            loss: loss_sum / n_batches as f64,
            token_nll: nll_sum / positions as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} token nll {:.6}",
            summary.loss,
            summary.token_nll
        );
        report.epochs.push(summary);
        on_epoch(&summary, store)?;

        if matches!(cfg.stop_below, Some(t) if summary.token_nll < t) {
            report.stopped_early = true;
            break;
        }

        if let Some(p) = cfg.patience {
            if summary.loss < best {
                best = summary.loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(report)
}

/// Mean per-position NLL over `examples` with dropout off.
pub fn token_nll(
    model: &CaptionModel,
    store: &ParameterStore,
    images: &[ImageInputs],
    examples: &[CaptionExample],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut tape = Tape::new();
        let (nll, n) = model.sequence_nll(&mut tape, store, &images[ex.image], &ex.tokens, &mut None)?;
        total += tape.value(nll).item();
        count += n;
    }
    Ok(total / count.max(1) as f64)
}
