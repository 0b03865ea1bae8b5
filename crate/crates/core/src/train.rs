//! Ranking training loops: dense teacher training and ℓ1-sparsified
//! fine-tuning (soft-threshold epochs, then orthant epochs).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{derive_seed, RankedPairInstance};
use crate::error::{Error, Result};
use crate::image::Patch;
use crate::net::{count_params, pair_forward, score_patches, BoundParams, NetworkSpec, ParameterSet};
use crate::optim::{
    adamax_step, bce, bce_mean, orthant_step, prox_l1_step, weight_signs, AdaMaxState,
    OptimizerConfig,
};
use crate::tensor::Tensor;

/// Which sparsifier follows each AdaMax step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    Off,
    Prox,
    Orthant,
}

/// Parameters plus optimizer state; `epoch` is the next epoch to run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet<f32>,
    pub optimizer: AdaMaxState<f32>,
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(params: ParameterSet<f32>) -> Self {
        let optimizer = AdaMaxState::new(&params);
        TrainState {
            params,
            optimizer,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l1_norm: f64,
    pub nonzero: u64,
    pub accuracy: f64,
}

pub fn train_log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,l1_norm,nonzero,accuracy\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{:.4}",
            r.epoch, r.loss, r.l1_norm, r.nonzero, r.accuracy
        );
    }
    s
}

pub fn write_train_log(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, train_log_csv(records)).map_err(|e| Error::io(path, e))
}

/// Preference probabilities for every instance.
pub fn predict_pairs(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    data: &[RankedPairInstance],
) -> Result<Vec<f64>> {
    let r: Vec<&Patch> = data.iter().flat_map(|d| [&d.r1, &d.r2]).collect();
    let dd: Vec<&Patch> = data.iter().flat_map(|d| [&d.d1, &d.d2]).collect();
    let s = score_patches(spec, params, &r, &dd)?;
    Ok(s.chunks(2)
        .map(|c| crate::autodiff::sigmoid(c[0] - c[1]))
        .collect())
}

/// Fraction of instances whose predicted preference agrees with the label
/// (`p > 0.5` predicts label 1).
pub fn accuracy_of(probs: &[f64], data: &[RankedPairInstance]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(data)
        .filter(|(&p, d)| u8::from(p > 0.5) == d.label)
        .count();
    hits as f64 / data.len() as f64
}

/// Held-out ranking accuracy.
pub fn pair_accuracy(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    data: &[RankedPairInstance],
) -> Result<f64> {
    Ok(accuracy_of(&predict_pairs(spec, params, data)?, data))
}

/// Mean ranking BCE plus `λ‖θ‖₁` over `data`.
pub fn sparse_objective(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    data: &[RankedPairInstance],
    lambda: f64,
) -> Result<f64> {
    let probs = predict_pairs(spec, params, data)?;
    let loss = probs
        .iter()
        .zip(data)
        .map(|(&p, d)| bce(p, d.label as f64))
        .sum::<f64>()
        / data.len().max(1) as f64;
    Ok(loss + lambda * params.weight_l1())
}

pub(crate) struct PairBatch<'a> {
    pub r1: Vec<&'a Patch>,
    pub d1: Vec<&'a Patch>,
    pub r2: Vec<&'a Patch>,
    pub d2: Vec<&'a Patch>,
    pub labels: Tensor<f32>,
}

pub(crate) fn gather<'a>(data: &'a [RankedPairInstance], idx: &[usize]) -> PairBatch<'a> {
    let pick = |f: fn(&RankedPairInstance) -> &Patch| idx.iter().map(|&i| f(&data[i])).collect();
    PairBatch {
        r1: pick(|d| &d.r1),
        d1: pick(|d| &d.d1),
        r2: pick(|d| &d.r2),
        d2: pick(|d| &d.d2),
        labels: Tensor::new(
            vec![idx.len(), 1],
            idx.iter().map(|&i| data[i].label as f32).collect(),
        )
        .expect("one label per row"),
    }
}

/// Seeded per-epoch shuffle split into batches (the last one may be short).
pub(crate) fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, epoch as u64]));
    order.shuffle(&mut rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_corpus(spec: &NetworkSpec, data: &[RankedPairInstance]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::data("training corpus is empty"));
    }
    if let Some(d) = data.iter().find(|d| d.geometry() != spec.patch) {
        return Err(Error::shape(format!(
            "corpus patch {} does not match network geometry {}",
            d.geometry(),
            spec.patch
        )));
    }
    Ok(())
}

fn run_epoch(
    spec: &NetworkSpec,
    state: &mut TrainState,
    data: &[RankedPairInstance],
    config: &OptimizerConfig,
    reg: Regularizer,
) -> Result<f64> {
    let mut total = 0.0;
    for idx in epoch_batches(data.len(), config.batch_size, config.seed, state.epoch) {
        let batch = gather(data, &idx);
        let mut tape = Tape::<f32>::new();
        let bound = BoundParams::bind(&mut tape, &state.params, true);
        let out = pair_forward(
            &mut tape, spec, &bound, &batch.r1, &batch.d1, &batch.r2, &batch.d2,
        )?;
        let y = tape.constant(batch.labels);
        let loss = bce_mean(&mut tape, out.p, y)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {value} in epoch {}",
                state.epoch
            )));
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        let signs = (reg == Regularizer::Orthant).then(|| weight_signs(&state.params));
        adamax_step(&mut state.params, &grads, &mut state.optimizer, config)?;
        match reg {
            Regularizer::Off => {}
            Regularizer::Prox => prox_l1_step(&mut state.params, config.lr, config.lambda),
            Regularizer::Orthant => orthant_step(
                &mut state.params,
                signs.as_deref().expect("captured"),
                config.lr,
                config.lambda,
            )?,
        }
        total += value * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Runs epochs `state.epoch..config.epochs`, choosing the sparsifier per
/// epoch. `on_epoch` sees every finished epoch (e.g. to checkpoint it).
pub fn train_epochs<F>(
    spec: &NetworkSpec,
    state: &mut TrainState,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
    config: &OptimizerConfig,
    schedule: impl Fn(usize) -> Regularizer,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &TrainState) -> Result<()>,
{
    config.validate()?;
    check_corpus(spec, train)?;
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let reg = schedule(state.epoch);
        let loss = run_epoch(spec, state, train, config, reg)?;
        let accuracy = if held_out.is_empty() {
            pair_accuracy(spec, &state.params, train)?
        } else {
            pair_accuracy(spec, &state.params, held_out)?
        };
        let record = EpochRecord {
            epoch: state.epoch,
            loss,
            l1_norm: state.params.weight_l1(),
            nonzero: count_params(&state.params, true),
            accuracy,
        };
        log::info!(
            "epoch {} {:?}: loss {:.4} nonzero {} accuracy {:.4}",
            record.epoch,
            reg,
            record.loss,
            record.nonzero,
            record.accuracy
        );
        state.epoch += 1;
        on_epoch(&record, state)?;
        log.push(record);
    }
    Ok(log)
}

/// Dense AdaMax training on the ranking loss alone.
pub fn train_teacher<F>(
    spec: &NetworkSpec,
    state: &mut TrainState,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
    config: &OptimizerConfig,
    on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &TrainState) -> Result<()>,
{
    train_epochs(spec, state, train, held_out, config, |_| Regularizer::Off, on_epoch)
}

/// Sparsity schedule: soft-threshold before `config.orthant_epoch()`,
/// orthant steps from then on, nothing when `λ = 0`.
pub fn sparse_schedule(config: &OptimizerConfig) -> impl Fn(usize) -> Regularizer {
    let switch = config.orthant_epoch();
    let active = config.lambda > 0.0;
    move |epoch| match (active, epoch < switch) {
        (false, _) => Regularizer::Off,
        (true, true) => Regularizer::Prox,
        (true, false) => Regularizer::Orthant,
    }
}

/// ℓ1-regularized fine-tuning of a trained network.
pub fn train_sparse<F>(
    spec: &NetworkSpec,
    state: &mut TrainState,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
    config: &OptimizerConfig,
    on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &TrainState) -> Result<()>,
{
    train_epochs(spec, state, train, held_out, config, sparse_schedule(config), on_epoch)
}
