//! The PEFT training loop.

use std::io::Write;

use log::info;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::manifest::{Dataset, Split};
use super::optim::{Adam, AdamConfig};
use super::sampler::{Composition, Sampler};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{forward, init_model, MixtureContext};
use crate::numerics::{forward_backward, Graph, ParamSet};
use crate::objective::total_loss;
use crate::rng::{self, RngState};
use crate::Mode;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub bce: f64,
    pub scl: f64,
    pub mixture_active: bool,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogEntry>,
}

/// Training rows: the train split restricted to real images and the
/// configured forgery domains.
pub fn training_subset(dataset: &Dataset, config: &Config) -> Dataset {
    let domains = &config.train.domains;
    dataset.subset(|e| e.split == Split::Train && (e.domain == 0 || domains.contains(&e.domain)))
}

/// Checkpoint of freshly initialized parameters.
pub fn initial_checkpoint(config: &Config) -> Result<Checkpoint> {
    config.validate()?;
    let params = init_model(&config.model, config.train.seed)?;
    Ok(Checkpoint {
        config: config.clone(),
        train_domains: config.train.domains.clone(),
        iteration: 0,
        rng_states: vec![
            (rng::STREAM_DATA.to_string(), RngState::capture(&rng::stream(config.train.seed, rng::STREAM_DATA))),
            (rng::STREAM_MIXTURE.to_string(), RngState::capture(&rng::stream(config.train.seed, rng::STREAM_MIXTURE))),
        ],
        params,
    })
}

/// Trains on `dataset` (already restricted to training rows).
pub fn train(config: &Config, dataset: &Dataset) -> Result<TrainOutput> {
    train_with(config, dataset, None, |_, _| {})
}

/// Like [`train`], starting from `init` when given, and calling `observe`
/// with every log entry and the dataset rows of that iteration's batch.
pub fn train_with(
    config: &Config,
    dataset: &Dataset,
    init: Option<ParamSet>,
    mut observe: impl FnMut(&TrainLogEntry, &[usize]),
) -> Result<TrainOutput> {
    let mut checkpoint = initial_checkpoint(config)?;
    if let Some(params) = init {
        super::checkpoint::check_params(&params, &config.model)?;
        checkpoint.params = params;
    }
    let composition = Composition::balanced(config.train.batch_size, config.train.real_fraction, &config.train.domains)?;
    let sampler = Sampler::new(dataset, composition)?;
    let loss_config = config.loss_config();
    let t = &config.train;
    let mut adam = Adam::new(AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps }, &checkpoint.params);
    let mut data_rng = rng::stream(t.seed, rng::STREAM_DATA);
    let mut mix_rng = rng::stream(t.seed, rng::STREAM_MIXTURE);
    let params = &mut checkpoint.params;
    let mut log = Vec::with_capacity(t.iterations);

    for iteration in 1..=t.iterations {
        let wrap = |source: Error| Error::Training { iteration, source: Box::new(source) };
        let batch = sampler.sample_batch(dataset, &mut data_rng).map_err(wrap)?;
        let labels = batch.meta.label_values();
        let mut g = Graph::new();
        let ctx = MixtureContext { meta: &batch.meta, rng: &mut mix_rng, config: &config.mix };
        let out = forward(&mut g, params, &config.model, &batch.images, Mode::Train, Some(ctx)).map_err(wrap)?;
        let (loss, parts) = total_loss(&mut g, out.logits, out.features, &labels, &loss_config).map_err(wrap)?;
        params.zero_grad();
        forward_backward(&g, loss, params).map_err(wrap)?;
        adam.step(params).map_err(wrap)?;

        let entry = TrainLogEntry {
            iteration,
            loss: parts.total,
            bce: parts.bce,
            scl: parts.scl,
            mixture_active: out.mixture.active,
            lr: t.lr,
        };
        if iteration % 100 == 0 {
            info!("iteration {iteration}: loss {:.4} (bce {:.4}, scl {:.4})", entry.loss, entry.bce, entry.scl);
        }
        observe(&entry, &batch.indices);
        log.push(entry);
    }
    params.zero_grad();
    checkpoint.iteration = t.iterations as u64;
    checkpoint.rng_states = vec![
        (rng::STREAM_DATA.to_string(), RngState::capture(&data_rng)),
        (rng::STREAM_MIXTURE.to_string(), RngState::capture(&mix_rng)),
    ];
    Ok(TrainOutput { checkpoint, log })
}

/// One JSON object per line.
pub fn write_log(log: &[TrainLogEntry], out: &mut impl Write) -> Result<()> {
    for entry in log {
        serde_json::to_writer(&mut *out, entry)?;
        out.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// Moving average of the logged loss over `window` entries ending at
/// `iteration` (1-based).
pub fn smoothed_loss(log: &[TrainLogEntry], iteration: usize, window: usize) -> Option<f64> {
    if iteration == 0 || iteration > log.len() {
        return None;
    }
    let start = iteration.saturating_sub(window);
    let slice = &log[start..iteration];
    Some(slice.iter().map(|e| e.loss).sum::<f64>() / slice.len() as f64)
}
