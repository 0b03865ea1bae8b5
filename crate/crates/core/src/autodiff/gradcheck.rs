//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference steps, tried in order while the estimate disagrees.
/// A step that straddles a ReLU-style kink is wrong at that step only.
const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Gradients smaller than this are compared absolutely, since roundoff in
/// the differenced loss is of that order.
const FLOOR: f64 = 1e-6;
const RETRY_ABOVE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`,
    /// taking the best of the step sizes for each coordinate.
    pub max_rel_error: f64,
    /// `(leaf index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn eval<F>(leaves: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares analytic gradients of `f` against central differences on up to
/// `coords_per_leaf` random coordinates of every leaf.
pub fn check_leaves<F>(
    leaves: &[Tensor<f64>],
    coords_per_leaf: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let zeros = vec![0.0; leaf.len()];
        let analytic = tape.grad(vars[li]).unwrap_or(&zeros);
        let picks = if leaf.len() <= coords_per_leaf {
            (0..leaf.len()).collect::<Vec<_>>()
        } else {
            sample(&mut rng, leaf.len(), coords_per_leaf).into_vec()
        };
        for j in picks {
            if !analytic[j].is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite analytic gradient at leaf {li}, coordinate {j}"
                )));
            }
            let orig = leaf.data()[j];
            let mut err = f64::INFINITY;
            for step in STEPS {
                probe[li].data_mut()[j] = orig + step;
                let plus = eval(&probe, &f)?;
                probe[li].data_mut()[j] = orig - step;
                let minus = eval(&probe, &f)?;
                probe[li].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                if !numeric.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite numeric gradient at leaf {li}, coordinate {j}"
                    )));
                }
                err = err.min(relative_error(analytic[j], numeric));
                if err <= RETRY_ABOVE {
                    break;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((li, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let w = Tensor::from_f64(vec![1, 3], &[0.3, -0.7, 1.1]).unwrap();
        let b = Tensor::from_f64(vec![1], &[0.2]).unwrap();
        let x = Tensor::from_f64(vec![4, 3], &[1., 2., 3., -1., 0.5, 2., 0., 0., 1., 3., -2., 1.])
            .unwrap();
        let report = check_leaves(&[w, b], 20, 1, |tape, v| {
            let xi = tape.constant(x.clone());
            let y = tape.dense(xi, v[0], v[1])?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }
}
