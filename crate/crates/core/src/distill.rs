//! Multi-level distillation from a frozen teacher: instance-level BCE,
//! batch-level Gram matching, class-level self-inner-product matching, plus
//! the ground-truth ranking loss weighted by α.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::data::RankedPairInstance;
use crate::error::{Error, Result};
use crate::net::{pair_forward, BoundParams, NetworkSpec, ParameterSet};
use crate::optim::{adamax_step, bce, bce_mean, OptimizerConfig};
use crate::tensor::{Real, Tensor};
use crate::train::{check_corpus, epoch_batches, gather, pair_accuracy, predict_pairs, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Weight of the ground-truth ranking loss.
    pub alpha: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.1,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Teacher and student probabilities with ground-truth labels for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPredictions {
    p_teacher: Vec<f64>,
    p_student: Vec<f64>,
    labels: Vec<f64>,
}

impl BatchPredictions {
    pub fn new(p_teacher: Vec<f64>, p_student: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if p_teacher.is_empty()
            || p_student.len() != p_teacher.len()
            || labels.len() != p_teacher.len()
        {
            return Err(Error::shape(format!(
                "batch predictions of lengths {}, {}, {}",
                p_teacher.len(),
                p_student.len(),
                labels.len()
            )));
        }
        Ok(BatchPredictions {
            p_teacher,
            p_student,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.p_teacher.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_teacher.is_empty()
    }

    pub fn p_teacher(&self) -> &[f64] {
        &self.p_teacher
    }

    pub fn p_student(&self) -> &[f64] {
        &self.p_student
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

/// Mean BCE of the student against the teacher's soft targets.
pub fn instance_loss(bp: &BatchPredictions) -> f64 {
    let s: f64 = bp
        .p_teacher
        .iter()
        .zip(&bp.p_student)
        .map(|(&t, &s)| bce(s, t))
        .sum();
    s / bp.len() as f64
}

/// `(1/B)·‖p_t p_tᵀ − p_s p_sᵀ‖_F²`.
pub fn batch_loss(bp: &BatchPredictions) -> f64 {
    let (t, s) = (&bp.p_teacher, &bp.p_student);
    let mut acc = 0.0;
    for i in 0..t.len() {
        for j in 0..t.len() {
            let d = t[i] * t[j] - s[i] * s[j];
            acc += d * d;
        }
    }
    acc / t.len() as f64
}

/// `(p_tᵀp_t − p_sᵀp_s)²`.
pub fn class_loss(bp: &BatchPredictions) -> f64 {
    let dot = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    (dot(&bp.p_teacher) - dot(&bp.p_student)).powi(2)
}

pub fn multilevel_loss(bp: &BatchPredictions) -> f64 {
    instance_loss(bp) + batch_loss(bp) + class_loss(bp)
}

/// Mean ranking BCE of the student against the ground-truth labels.
pub fn ground_truth_loss(bp: &BatchPredictions) -> f64 {
    let s: f64 = bp
        .p_student
        .iter()
        .zip(&bp.labels)
        .map(|(&p, &y)| bce(p, y))
        .sum();
    s / bp.len() as f64
}

pub fn total_loss(bp: &BatchPredictions, alpha: f64) -> f64 {
    multilevel_loss(bp) + alpha * ground_truth_loss(bp)
}

/// Tape handles of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    pub instance: Var,
    pub batch: Var,
    pub class: Var,
    pub ground_truth: Var,
    pub total: Var,
}

/// Loss terms on the tape; `p_student`, `p_teacher` and `labels` are `[B,1]`.
pub fn distill_terms<T: Real>(
    tape: &mut Tape<T>,
    p_student: Var,
    p_teacher: Var,
    labels: Var,
    alpha: f64,
) -> Result<DistillTerms> {
    let b = tape.shape(p_student)[0];
    let instance = bce_mean(tape, p_student, p_teacher)?;

    let tt = tape.transpose(p_teacher)?;
    let gram_t = tape.matmul(p_teacher, tt)?;
    let st = tape.transpose(p_student)?;
    let gram_s = tape.matmul(p_student, st)?;
    let gd = tape.sub(gram_t, gram_s)?;
    let gd2 = tape.mul(gd, gd)?;
    let gsum = tape.sum(gd2);
    let batch = tape.scale(gsum, T::one() / T::lit(b as f64));

    let self_t = tape.matmul(tt, p_teacher)?;
    let self_s = tape.matmul(st, p_student)?;
    let cd = tape.sub(self_t, self_s)?;
    let cd2 = tape.mul(cd, cd)?;
    let class = tape.sum(cd2);

    let ground_truth = bce_mean(tape, p_student, labels)?;

    let ib = tape.add(instance, batch)?;
    let multi = tape.add(ib, class)?;
    let weighted = tape.scale(ground_truth, T::lit(alpha));
    let total = tape.add(multi, weighted)?;
    Ok(DistillTerms {
        instance,
        batch,
        class,
        ground_truth,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillRecord {
    pub epoch: usize,
    pub instance: f64,
    pub batch: f64,
    pub class: f64,
    pub ground_truth: f64,
    pub total: f64,
    pub accuracy: f64,
}

pub fn distill_log_csv(records: &[DistillRecord]) -> String {
    let mut s = String::from("epoch,instance,batch,class,ground_truth,total,accuracy\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4}",
            r.epoch, r.instance, r.batch, r.class, r.ground_truth, r.total, r.accuracy
        );
    }
    s
}

pub fn write_distill_log(path: impl AsRef<Path>, records: &[DistillRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, distill_log_csv(records)).map_err(|e| Error::io(path, e))
}

/// Trains the student on the multi-level objective for epochs
/// `state.epoch..config.optimizer.epochs`. The teacher is only read; its
/// digest is checked again before returning.
#[allow(clippy::too_many_arguments)]
pub fn distill_train<F>(
    teacher_spec: &NetworkSpec,
    teacher: &ParameterSet<f32>,
    student_spec: &NetworkSpec,
    state: &mut TrainState,
    train: &[RankedPairInstance],
    held_out: &[RankedPairInstance],
    config: &DistillConfig,
    mut on_epoch: F,
) -> Result<Vec<DistillRecord>>
where
    F: FnMut(&DistillRecord, &TrainState) -> Result<()>,
{
    let opt = &config.optimizer;
    opt.validate()?;
    if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be non-negative, got {}", config.alpha)));
    }
    if teacher_spec.patch != student_spec.patch {
        return Err(Error::shape(format!(
            "teacher geometry {} differs from student geometry {}",
            teacher_spec.patch, student_spec.patch
        )));
    }
    check_corpus(student_spec, train)?;
    let digest = teacher.digest();
    let teacher_probs: Vec<f32> = predict_pairs(teacher_spec, teacher, train)?
        .into_iter()
        .map(|p| p as f32)
        .collect();

    let mut log = Vec::new();
    while state.epoch < opt.epochs {
        let mut sums = [0.0f64; 5];
        for idx in epoch_batches(train.len(), opt.batch_size, opt.seed, state.epoch) {
            let batch = gather(train, &idx);
            let pt = Tensor::new(
                vec![idx.len(), 1],
                idx.iter().map(|&i| teacher_probs[i]).collect(),
            )?;
            let mut tape = Tape::<f32>::new();
            let bound = BoundParams::bind(&mut tape, &state.params, true);
            let out = pair_forward(
                &mut tape,
                student_spec,
                &bound,
                &batch.r1,
                &batch.d1,
                &batch.r2,
                &batch.d2,
            )?;
            let pt = tape.constant(pt);
            let y = tape.constant(batch.labels);
            let terms = distill_terms(&mut tape, out.p, pt, y, config.alpha)?;
            let vals = [
                terms.instance,
                terms.batch,
                terms.class,
                terms.ground_truth,
                terms.total,
            ]
            .map(|v| tape.value(v).data()[0] as f64);
            if !vals[4].is_finite() {
                return Err(Error::Numerical(format!(
                    "distillation loss became {} in epoch {}",
                    vals[4], state.epoch
                )));
            }
            tape.backward(terms.total)?;
            let grads = bound.grads(&tape);
            adamax_step(&mut state.params, &grads, &mut state.optimizer, opt)?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * idx.len() as f64;
            }
        }
        let n = train.len() as f64;
        let eval_set = if held_out.is_empty() { train } else { held_out };
        let record = DistillRecord {
            epoch: state.epoch,
            instance: sums[0] / n,
            batch: sums[1] / n,
            class: sums[2] / n,
            ground_truth: sums[3] / n,
            total: sums[4] / n,
            accuracy: pair_accuracy(student_spec, &state.params, eval_set)?,
        };
        log::info!(
            "distill epoch {}: total {:.4} accuracy {:.4}",
            record.epoch,
            record.total,
            record.accuracy
        );
        state.epoch += 1;
        on_epoch(&record, state)?;
        log.push(record);
    }
    if teacher.digest() != digest {
        return Err(Error::Structure("teacher parameters changed during distillation".into()));
    }
    Ok(log)
}
