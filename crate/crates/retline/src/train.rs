//! Minibatch training with AdamW, cosine restarts and held-out CER.

use anyhow::{bail, Result};
use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use retline_core::data::{augment, LineSample, Vocab};
use retline_core::decode::{default_backend, Decoder};
use retline_core::metrics::corpus_rates;
use retline_core::model::{AdamW, AdamWConfig, CosineSchedule, Model};
use retline_core::rng::{indexed_substream, substream};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;

/// Process CPU time (user + system) in seconds.
pub fn cpu_seconds() -> f64 {
    // SAFETY: getrusage only writes into the zeroed struct we own.
    let mut u: libc::rusage = unsafe { std::mem::zeroed() };
    unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut u) };
    let t = |tv: libc::timeval| tv.tv_sec as f64 + tv.tv_usec as f64 * 1e-6;
    t(u.ru_utime) + t(u.ru_stime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_cer: f64,
    pub val_wer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Epochs,
    TargetCer,
    CpuBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub cpu_seconds: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone)]
struct Prepared {
    sample: LineSample,
    ids: Vec<usize>,
}

fn prepare(samples: &[LineSample], vocab: &Vocab, max_text_len: usize) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                ids: vocab.tokenize(&s.transcript, max_text_len)?,
                sample: s.clone(),
            })
        })
        .collect()
}

/// Greedy transcripts of `samples`, in order.
pub fn transcribe(model: &Model, vocab: &Vocab, samples: &[LineSample], max_len: usize) -> Result<Vec<String>> {
    let backend = default_backend(model);
    samples
        .par_iter()
        .map(|s| {
            let h = Decoder::new(model, &s.image)?.greedy(max_len, backend)?;
            Ok(vocab.detokenize(&h.tokens))
        })
        .collect()
}

/// Corpus CER and WER of greedy decoding.
pub fn evaluate(model: &Model, vocab: &Vocab, samples: &[LineSample]) -> Result<(f64, f64)> {
    let hyps = transcribe(model, vocab, samples, model.config().max_text_len)?;
    Ok(corpus_rates(hyps.iter().map(String::as_str).zip(samples.iter().map(|s| s.transcript.as_str())))?)
}

/// Train `model` in place. `on_epoch` sees every metrics row as it is produced.
pub fn train(
    model: &mut Model,
    vocab: &Vocab,
    train_set: &[LineSample],
    val_set: &[LineSample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        bail!("training set is empty");
    }
    if cfg.batch_size == 0 {
        bail!("batch_size must be at least 1");
    }
    let start_cpu = cpu_seconds();
    let data = prepare(train_set, vocab, model.config().max_text_len)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
        model.params(),
    );
    let sched = CosineSchedule {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        period: cfg.restart_period,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = substream(seed, "data");
    let batches = data.len().div_ceil(cfg.batch_size);
    let mut metrics = Vec::new();
    let mut stop = StopReason::Epochs;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut lr) = (0.0, cfg.lr_max);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = opt.steps();
            let results: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let p = &data[i];
                    let key = step * cfg.batch_size as u64 + j as u64;
                    let sample = if cfg.augment {
                        augment(&p.sample, indexed_substream(seed, "augment", key).next_u64())
                    } else {
                        p.sample.clone()
                    };
                    let mut rng = indexed_substream(seed, "dropout", key);
                    Ok(model.loss_and_grads(&sample.image, &p.ids, cfg.label_smoothing, Some(&mut rng))?)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l * scale;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x * scale;
                    }
                }
            }
            if !batch_loss.is_finite() {
                bail!("loss diverged at epoch {epoch}, batch {b}");
            }
            lr = sched.lr(epoch as f64 + b as f64 / batches as f64);
            opt.step(model.params_mut(), &grads, lr)?;
            loss_sum += batch_loss;
        }
        let (val_cer, val_wer) = if val_set.is_empty() { (f64::NAN, f64::NAN) } else { evaluate(model, vocab, val_set)? };
        let row = EpochMetrics {
            epoch: epoch + 1,
            step: opt.steps(),
            lr,
            loss: loss_sum / batches as f64,
            val_cer,
            val_wer,
        };
        on_epoch(&row)?;
        metrics.push(row);
        if cfg.target_cer.is_some_and(|t| val_cer <= t) {
            stop = StopReason::TargetCer;
            break;
        }
        if cfg.max_cpu_seconds.is_some_and(|m| cpu_seconds() - start_cpu >= m) {
            stop = StopReason::CpuBudget;
            break;
        }
    }
    Ok(TrainOutcome {
        metrics,
        cpu_seconds: cpu_seconds() - start_cpu,
        stop,
    })
}
