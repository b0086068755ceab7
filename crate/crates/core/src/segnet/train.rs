use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::GaldConfig;
use crate::error::{spec_err, Result};
use crate::nn::{Ctx, LayerParams, Mode};
use crate::segnet::{forward_model, poly_lr, predict, Sgd, IGNORE_INDEX};
use crate::synth::{stack_batch, EvalReport, SegSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhemConfig {
    pub enabled: bool,
    pub keep_fraction: f64,
    pub min_kept: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            keep_fraction: 0.25,
            min_kept: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub ohem: OhemConfig,
    pub seed: u64,
    pub ignore_index: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            power: 0.9,
            max_iter: 3000,
            batch_size: 4,
            ohem: OhemConfig::default(),
            seed: 42,
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(spec_err(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.ohem.keep_fraction > 0.0 && self.ohem.keep_fraction <= 1.0) {
            return Err(spec_err(format!(
                "keep_fraction {} outside (0, 1]",
                self.ohem.keep_fraction
            )));
        }
        if self.max_iter == 0 || self.batch_size == 0 {
            return Err(spec_err("max_iter and batch_size must be positive"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trains a fresh model on `data` for `max_iter` iterations and returns its
/// parameters, rounded to `f32` so that a saved checkpoint reproduces them.
///
/// Minibatches walk a permutation of the dataset that is reshuffled at the
/// start of every epoch; a batch never straddles two epochs. `on_iter`
/// receives each iteration's record as it completes.
pub fn train<F>(cfg: &GaldConfig, data: &[SegSample], mut on_iter: F) -> Result<LayerParams>
where
    F: FnMut(&IterRecord) -> Result<()>,
{
    cfg.validate()?;
    let tc = &cfg.train;
    if data.is_empty() {
        return Err(spec_err("training set is empty"));
    }
    let batch = tc.batch_size.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut params = LayerParams::new(tc.seed);
    let mut opt = Sgd::new(tc.momentum);

    for iter in 0..tc.max_iter {
        if order.len() < batch {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let (images, labels) = stack_batch(data, &idx)?;
        let lr = poly_lr(iter, tc);

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train);
        let x = ctx.tape.constant(images);
        let out = forward_model(&mut ctx, x, cfg)?;
        let loss = if tc.ohem.enabled {
            ctx.tape.ohem_loss(
                out.logits,
                &labels,
                tc.ohem.keep_fraction,
                tc.ohem.min_kept,
                tc.ignore_index,
            )?
        } else {
            ctx.tape.cross_entropy(out.logits, &labels, tc.ignore_index)?
        };
        ctx.backward(loss)?;
        let loss = tape.value(loss).data()[0];
        opt.step(&mut params, lr)?;
        on_iter(&IterRecord { iter, lr, loss })?;
    }
    params.narrow_to_f32();
    Ok(params)
}

/// Eval-mode confusion matrix of the model over `data`, in batches of
/// `batch` samples.
pub fn evaluate(cfg: &GaldConfig, params: &mut LayerParams, data: &[SegSample], batch: usize) -> Result<EvalReport> {
    let mut report = EvalReport::new(cfg.num_classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = stack_batch(data, chunk)?;
        let pred = predict(cfg, params, &images)?;
        report.accumulate(&pred, &labels)?;
    }
    Ok(report)
}
