use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::sliding_window_infer;
use super::optim::Adam;
use super::patches::{sample_patches, Sample};
use super::schedule::{Schedule, ScheduleState};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::loss::{class_weights, downsample_labels, margin_loss, masked_mse, total_loss, weighted_ce, LossReport};
use crate::metrics::dsc;
use crate::model::Network;
use crate::tensor::{Tape, Var};

pub const LOG_HEADER: &str = "iter,lr,margin,ce,recon,total,val_dsc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_size: [usize; 3],
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: u64,
    pub early_stop_patience: u64,
    pub improvement_threshold: f64,
    /// Optimizer steps.
    pub max_iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_interval: u64,
    /// Probability that a training patch is centred on foreground.
    pub fg_bias: f64,
    /// Tile overlap for validation and inference.
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: [32, 32, 32],
            learning_rate: 1e-4,
            weight_decay: 2e-6,
            lr_decay_factor: 0.1,
            plateau_patience: 50_000,
            early_stop_patience: 25_000,
            improvement_threshold: 1e-4,
            max_iterations: 100_000,
            batch_size: 1,
            seed: 0,
            validation_interval: 100,
            fg_bias: 0.5,
            overlap: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size.iter().any(|&e| e == 0 || e % 8 != 0) {
            return bad(format!("patch_size {:?} must be positive multiples of 8", self.patch_size));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lr_decay_factor", self.lr_decay_factor),
            ("improvement_threshold", self.improvement_threshold),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        for (name, v) in [
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("max_iterations", self.max_iterations),
            ("validation_interval", self.validation_interval),
            ("batch_size", self.batch_size as u64),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return bad(format!("fg_bias = {} must be in [0, 1]", self.fg_bias));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap = {} must be in [0, 1)", self.overlap));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            threshold: self.improvement_threshold,
            decay_factor: self.lr_decay_factor,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
        }
    }
}

/// Mean Dice over the foreground classes `1..classes`.
pub fn foreground_dsc(truth: &LabelVolume, pred: &LabelVolume, classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for c in 1..classes {
        sum += dsc(truth, pred, c as u8)?;
    }
    Ok(sum / (classes - 1) as f64)
}

/// Records the batch-mean objective on `tape`.
fn batch_loss(tape: &Tape<f32>, net: &Network<f32>, params: &[Var], batch: &[Sample]) -> Result<(Var, LossReport)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let cfg = &net.config;
    let weights = class_weights(&batch.iter().map(|s| &s.labels).collect::<Vec<_>>(), cfg.classes);
    if let Some(c) = batch.iter().map(|s| s.labels.max_class()).find(|&c| c as usize >= cfg.classes) {
        return Err(Error::Invalid(format!("label {c} exceeds the network's {} classes", cfg.classes)));
    }
    let mut totals = Vec::with_capacity(batch.len());
    let mut parts = [0.0; 3];
    for s in batch {
        let x = tape.constant(s.image.clone());
        let pass = net.forward(tape, params, x)?;
        let target = tape.constant(downsample_labels(&s.labels, cfg.capsule_factor(), cfg.classes)?);
        let m = margin_loss(tape, pass.class_scores, target)?;
        let ce = weighted_ce(tape, pass.seg, &s.labels, &weights)?;
        let r = masked_mse(tape, pass.recon, x, &s.labels)?;
        let (total, report) = total_loss(tape, m, ce, r, cfg.loss_weights())?;
        totals.push(total);
        parts[0] += report.margin;
        parts[1] += report.ce;
        parts[2] += report.recon;
    }
    let n = batch.len() as f64;
    let total = if totals.len() == 1 {
        totals[0]
    } else {
        tape.linear_combination(&totals.iter().map(|&t| (t, 1.0 / n)).collect::<Vec<_>>())?
    };
    let report = LossReport::compose(parts[0] / n, parts[1] / n, parts[2] / n, cfg.loss_weights())?;
    Ok((total, report))
}

/// Objective on `batch` without touching the parameters.
pub fn evaluate_loss(net: &Network<f32>, batch: &[Sample]) -> Result<LossReport> {
    let tape = Tape::no_grad();
    let params: Vec<Var> = net.params.iter().map(|p| tape.constant(p.value.clone())).collect();
    Ok(batch_loss(&tape, net, &params, batch)?.1)
}

/// Forward, backward and one optimizer update; returns the loss before the
/// update.
pub fn train_step(net: &mut Network<f32>, batch: &[Sample], adam: &mut Adam) -> Result<LossReport> {
    let (grads, report, params) = {
        let tape = Tape::new();
        let params = net.bind(&tape);
        let (total, report) = batch_loss(&tape, net, &params, batch)?;
        (tape.backward(total)?, report, params)
    };
    for (p, &v) in net.params.iter_mut().zip(&params) {
        grads.accumulate_into(v, &mut p.value);
    }
    adam.step(net);
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation Dice.
    pub best: Network<f32>,
    pub best_dsc: f64,
    pub best_iter: u64,
    pub iterations: u64,
    pub schedule: ScheduleState,
    pub losses: Vec<LossReport>,
}

/// Mean foreground Dice of full-volume predictions.
fn validate(net: &Network<f32>, set: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for s in set {
        let pred = sliding_window_infer(net, &s.image, cfg.patch_size, cfg.overlap)?;
        sum += foreground_dsc(&s.labels, &pred, net.config.classes)?;
    }
    Ok(sum / set.len() as f64)
}

/// Trains on random patches of `train_set`, validating on `val_set` (or the
/// training volumes when it is empty). Writes one CSV row per iteration.
pub fn train(
    net: &mut Network<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("no training volumes".into()));
    }
    let val_set = if val_set.is_empty() { train_set } else { val_set };
    writeln!(log, "# arch={}", net.arch.tag())?;
    writeln!(log, "{LOG_HEADER}")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = cfg.schedule();
    let mut state = ScheduleState::new(cfg.learning_rate);
    let mut adam = Adam::new(net, cfg.learning_rate, cfg.weight_decay);
    let mut best = net.clone();
    let mut losses = Vec::new();
    let mut iter = 0;
    while iter < cfg.max_iterations && !state.stop {
        iter += 1;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &train_set[rng.random_range(0..train_set.len())];
            batch.extend(sample_patches(&s.image, &s.labels, cfg.patch_size, 1, cfg.fg_bias, &mut rng)?);
        }
        adam.lr = state.lr;
        let report = train_step(net, &batch, &mut adam)
            .map_err(|e| Error::Invalid(format!("iteration {iter}: {e}")))?;
        let mut val = String::new();
        if iter % cfg.validation_interval == 0 || iter == cfg.max_iterations {
            let d = validate(net, val_set, cfg)?;
            state = schedule.update(&state, d, iter);
            if state.improved_at(iter) {
                best = net.clone();
            }
            val = d.to_string();
        }
        writeln!(
            log,
            "{iter},{},{},{},{},{},{val}",
            adam.lr, report.margin, report.ce, report.recon, report.total
        )?;
        losses.push(report);
    }
    log.flush()?;
    Ok(TrainOutcome {
        best,
        best_dsc: state.best_dsc,
        best_iter: state.best_iter,
        iterations: iter,
        schedule: state,
        losses,
    })
}
