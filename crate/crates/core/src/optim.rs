//! AdaMax, the ranking cross-entropy, and the ℓ1 sparsifiers (soft-threshold
//! and orthant projection).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::{ParameterSet, PreferencePrediction};
use crate::tensor::{Real, Tensor};

/// Probability clamp used wherever a logarithm is taken.
pub const PROB_EPS: f64 = 1e-7;

/// Added to the infinity-norm moment so a zero gradient never divides by zero.
pub const ADAMAX_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// ℓ1 weight λ.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// First epoch that uses orthant steps; `None` means `epochs / 2`.
    pub orthant_from: Option<usize>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            lambda: 0.1,
            epochs: 30,
            batch_size: 16,
            orthant_from: None,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn orthant_epoch(&self) -> usize {
        self.orthant_from.unwrap_or(self.epochs / 2)
    }
}

/// `−(y·ln p + (1−y)·ln(1−p))` with `p` clamped to `[ε, 1−ε]`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Ranking loss of one prediction against a (possibly soft) label.
pub fn ranking_bce_loss(pred: &PreferencePrediction, label: f64) -> f64 {
    bce(pred.p, label)
}

/// Batch-mean clamped BCE on the tape; `target` has the shape of `p`.
pub fn bce_mean<T: Real>(tape: &mut Tape<T>, p: Var, target: Var) -> Result<Var> {
    let eps = T::lit(PROB_EPS);
    let pc = tape.clamp(p, eps, T::one() - eps);
    let ln_p = tape.ln(pc);
    let neg = tape.scale(pc, -T::one());
    let q = tape.add_scalar(neg, T::one());
    let ln_q = tape.ln(q);
    let neg_t = tape.scale(target, -T::one());
    let one_minus_t = tape.add_scalar(neg_t, T::one());
    let a = tape.mul(target, ln_p)?;
    let b = tape.mul(one_minus_t, ln_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -T::one()))
}

/// AdaMax moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaMaxState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub u: Vec<Vec<T>>,
}

impl<T: Real> AdaMaxState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        AdaMaxState {
            step: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }

    fn matches(&self, params: &ParameterSet<T>) -> bool {
        let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let m: Vec<usize> = self.m.iter().map(Vec::len).collect();
        let u: Vec<usize> = self.u.iter().map(Vec::len).collect();
        m == lens && u == lens
    }
}

impl AdaMaxState<f32> {
    /// Moments as named tensors for a checkpoint's extra section.
    pub fn to_extra(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(
            "adamax.step".to_string(),
            Tensor::scalar(self.step as f32),
        )];
        for (prefix, bufs) in [("adamax.m", &self.m), ("adamax.u", &self.u)] {
            for (i, b) in bufs.iter().enumerate() {
                let t = Tensor::new(vec![b.len()], b.clone()).expect("flat buffer");
                out.push((format!("{prefix}.{i}"), t));
            }
        }
        out
    }

    /// Restores moments written by [`to_extra`](Self::to_extra).
    pub fn from_extra(
        extra: &[(String, Tensor<f32>)],
        params: &ParameterSet<f32>,
    ) -> Result<Self> {
        let find = |name: &str| {
            extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::data(format!("checkpoint lacks optimizer tensor {name}")))
        };
        let step = find("adamax.step")?.data()[0];
        let n = params.tensors().len();
        let load = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            (0..n)
                .map(|i| Ok(find(&format!("{prefix}.{i}"))?.data().to_vec()))
                .collect()
        };
        let state = AdaMaxState {
            step: step as u64,
            m: load("adamax.m")?,
            u: load("adamax.u")?,
        };
        if !state.matches(params) {
            return Err(Error::data("optimizer moments do not match the parameter shapes"));
        }
        Ok(state)
    }
}

/// One bias-corrected AdaMax update:
/// `m ← β1·m + (1−β1)·g`, `u ← max(β2·u, |g| + 1e-8)`, `θ ← θ − lr/(1−β1^t)·m/u`.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adamax_step<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &[Vec<T>],
    state: &mut AdaMaxState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if grads.len() != lens.len() || grads.iter().zip(&lens).any(|(g, &l)| g.len() != l) {
        return Err(Error::shape("gradient buffers do not match the parameter set"));
    }
    if !state.matches(params) {
        return Err(Error::shape("optimizer state does not match the parameter set"));
    }
    for (ti, g) in grads.iter().enumerate() {
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in tensor {ti} at coordinate {j}"
            )));
        }
    }
    state.step += 1;
    let b1 = T::lit(config.beta1);
    let b2 = T::lit(config.beta2);
    let eps = T::lit(ADAMAX_EPS);
    let step_size = T::lit(config.lr / (1.0 - config.beta1.powi(state.step as i32)));
    for (ti, theta) in params.tensors_mut().into_iter().enumerate() {
        let (m, u, g) = (&mut state.m[ti], &mut state.u[ti], &grads[ti]);
        for (j, w) in theta.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            u[j] = (b2 * u[j]).max(g[j].abs() + eps);
            *w = *w - step_size * m[j] / u[j];
        }
    }
    Ok(())
}

/// Soft-threshold on the weights (biases untouched):
/// `w ← sign(w)·max(|w| − ηλ, 0)`.
pub fn prox_l1_step<T: Real>(params: &mut ParameterSet<T>, eta: f64, lambda: f64) {
    let t = T::lit(eta * lambda);
    for layer in params.layers_mut() {
        for w in layer.weight.data_mut() {
            *w = soft_threshold(*w, t);
        }
    }
}

pub fn soft_threshold<T: Real>(w: T, t: T) -> T {
    let mag = w.abs() - t;
    if mag > T::zero() {
        w.signum() * mag
    } else {
        T::zero()
    }
}

/// Sign of every weight, `0` for exact zeros; one buffer per layer.
pub fn weight_signs<T: Real>(params: &ParameterSet<T>) -> Vec<Vec<i8>> {
    params
        .layers()
        .iter()
        .map(|l| l.weight.data().iter().map(|&w| sign(w)).collect())
        .collect()
}

fn sign<T: Real>(w: T) -> i8 {
    if w > T::zero() {
        1
    } else if w < T::zero() {
        -1
    } else {
        0
    }
}

/// ℓ1 subgradient step inside the reference orthant, then projection:
/// coordinates whose sign differs from the reference become 0, and
/// reference zeros stay 0.
pub fn orthant_step<T: Real>(
    params: &mut ParameterSet<T>,
    reference: &[Vec<i8>],
    eta: f64,
    lambda: f64,
) -> Result<()> {
    let layers = params.layers_mut();
    if reference.len() != layers.len()
        || reference
            .iter()
            .zip(layers.iter())
            .any(|(r, l)| r.len() != l.weight.len())
    {
        return Err(Error::shape("reference signs do not match the parameter set"));
    }
    let t = T::lit(eta * lambda);
    for (layer, signs) in layers.iter_mut().zip(reference) {
        for (w, &s) in layer.weight.data_mut().iter_mut().zip(signs) {
            if s == 0 {
                *w = T::zero();
                continue;
            }
            let moved = *w - t * T::lit(s as f64);
            *w = if sign(moved) == s { moved } else { T::zero() };
        }
    }
    Ok(())
}
