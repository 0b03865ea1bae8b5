//! Rank correlation, logistic regression and the F distribution.

use crate::error::{Error, Result};

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} values against {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation with average ranks for ties.
pub fn srocc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} scores",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::Undefined(format!("SROCC needs at least 3 points, got {}", pred.len())));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in SROCC input".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
}

/// `q(x) = b1·(1/2 − 1/(1+exp(b2·(x−b3)))) + b4`.
pub fn logistic4(b: &[f64; 4], x: f64) -> f64 {
    // 1/2 − 1/(1+e^z) = tanh(z/2)/2, evaluated without cancellation near z = 0.
    b[0] * (0.5 * (0.5 * b[1] * (x - b[2])).tanh()) + b[3]
}

fn jacobian_row(b: &[f64; 4], x: f64) -> [f64; 4] {
    let t = (0.5 * b[1] * (x - b[2])).tanh();
    let dt = 0.25 * b[0] * (1.0 - t * t);
    [0.5 * t, dt * (x - b[2]), -dt * b[1], 1.0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// `b1..b4`, or `[slope, intercept, 0, 0]` after the linear fallback.
    pub params: [f64; 4],
    /// `truth − q(pred)`.
    pub residuals: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    pub linear_fallback: bool,
}

impl LogisticFit {
    pub fn predict(&self, x: f64) -> f64 {
        if self.linear_fallback {
            self.params[0] * x + self.params[1]
        } else {
            logistic4(&self.params, x)
        }
    }
}

const MAX_ITERATIONS: usize = 2000;

/// Least-squares line `(slope, intercept)`; slope 0 for constant `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

fn sse(b: &[f64; 4], x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| (yi - logistic4(b, xi)).powi(2)).sum()
}

fn solve4(mut a: [[f64; 4]; 4], mut r: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..4 {
            let pivot = a[col];
            let f = a[row][col] / pivot[col];
            for (x, p) in a[row][col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            r[row] -= f * r[col];
        }
    }
    let mut out = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * out[k]).sum();
        out[row] = (r[row] - s) / a[row][row];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Damped Gauss–Newton from `b`. Returns the final parameters, the SSE
/// after every accepted step, and whether it converged.
fn levenberg_marquardt(mut b: [f64; 4], x: &[f64], y: &[f64], scale: f64) -> ([f64; 4], Vec<f64>, bool) {
    let mut cur = sse(&b, x, y);
    let mut history = vec![cur];
    let mut mu = 1e-3;
    for _ in 0..MAX_ITERATIONS {
        if cur <= 1e-28 * scale {
            return (b, history, true);
        }
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let j = jacobian_row(&b, xi);
            let r = yi - logistic4(&b, xi);
            for p in 0..4 {
                jtr[p] += j[p] * r;
                for q in 0..4 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        let mut improved = false;
        while mu < 1e16 {
            let mut a = jtj;
            for (p, row) in a.iter_mut().enumerate() {
                row[p] += mu * jtj[p][p].max(1e-12);
            }
            if let Some(step) = solve4(a, jtr) {
                let cand = [b[0] + step[0], b[1] + step[1], b[2] + step[2], b[3] + step[3]];
                let s = sse(&cand, x, y);
                if s.is_finite() && s < cur {
                    let gain = (cur - s) / cur.max(1e-300);
                    b = cand;
                    cur = s;
                    history.push(cur);
                    mu = (mu / 3.0).max(1e-12);
                    improved = true;
                    if gain < 1e-12 {
                        return (b, history, true);
                    }
                    break;
                }
            }
            mu *= 4.0;
        }
        if !improved {
            // No damped step reduces the SSE: a stationary point.
            return (b, history, true);
        }
    }
    (b, history, false)
}

/// Four-parameter logistic fit of `truth` against `pred`.
///
/// Two starts are tried: one from the data range and median, one from the
/// near-linear limit of the curve; the lower SSE wins. If neither converges
/// the linear fit is returned with `linear_fallback` set.
pub fn logistic_fit(pred: &[f64], truth: &[f64]) -> Result<LogisticFit> {
    Ok(logistic_fit_traced(pred, truth)?.0)
}

/// [`logistic_fit`] plus the SSE after every accepted iteration of the
/// winning start.
pub fn logistic_fit_traced(pred: &[f64], truth: &[f64]) -> Result<(LogisticFit, Vec<f64>)> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} scores",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 5 {
        return Err(Error::Undefined(format!(
            "logistic fit needs at least 5 points, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in regression input".into()));
    }
    let n = truth.len() as f64;
    let my = truth.iter().sum::<f64>() / n;
    let tss: f64 = truth.iter().map(|y| (y - my).powi(2)).sum();
    if tss == 0.0 {
        return Err(Error::Undefined("ground truth is constant".into()));
    }
    let (slope, intercept) = linear_fit(pred, truth);
    let mx = pred.iter().sum::<f64>() / n;
    let sx = (pred.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();

    let mut starts = Vec::new();
    if sx > 0.0 {
        let (lo, hi) = truth
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let mut sorted = pred.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let dir = if slope < 0.0 { -1.0 } else { 1.0 };
        starts.push([hi - lo, dir / sx, median, (hi + lo) / 2.0]);
        // tanh(z/2)/2 ≈ z/4: this start reproduces the least-squares line.
        let b2 = 1e-6 / sx;
        starts.push([4.0 * slope / b2, b2, mx, intercept + slope * mx]);
    }
    let best = starts
        .into_iter()
        .map(|s| levenberg_marquardt(s, pred, truth, tss))
        .filter(|(_, _, ok)| *ok)
        .min_by(|a, b| a.1.last().unwrap().total_cmp(b.1.last().unwrap()));

    Ok(match best {
        Some((b, history, _)) => {
            let residuals: Vec<f64> = pred
                .iter()
                .zip(truth)
                .map(|(&x, &y)| y - logistic4(&b, x))
                .collect();
            let fit = LogisticFit {
                params: b,
                sse: *history.last().expect("initial sse"),
                iterations: history.len() - 1,
                residuals,
                linear_fallback: false,
            };
            (fit, history)
        }
        None => {
            log::warn!("logistic fit did not converge; using the linear fit");
            let residuals: Vec<f64> = pred
                .iter()
                .zip(truth)
                .map(|(&x, &y)| y - (slope * x + intercept))
                .collect();
            let sse = residuals.iter().map(|r| r * r).sum();
            let fit = LogisticFit {
                params: [slope, intercept, 0.0, 0.0],
                residuals,
                sse,
                iterations: MAX_ITERATIONS,
                linear_fallback: true,
            };
            (fit, vec![sse])
        }
    })
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// CDF of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_cdf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 0.0;
    }
    inc_beta(d1 / 2.0, d2 / 2.0, d1 * f / (d1 * f + d2))
}

/// Quantile of the F distribution by bisection on the CDF.
pub fn f_quantile(p: f64, d1: f64, d2: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while f_cdf(hi, d1, d2) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f_cdf(mid, d1, d2) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FTest {
    /// `var(a) / var(b)`.
    pub statistic: f64,
    pub df_a: usize,
    pub df_b: usize,
    /// Two-sided tail probability.
    pub p_value: f64,
    /// +1: `a` has significantly smaller residual variance; −1: larger; 0: neither.
    pub verdict: i8,
}

fn variance(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Two-sided variance-ratio test on regression residuals.
pub fn f_test(residuals_a: &[f64], residuals_b: &[f64], confidence: f64) -> Result<FTest> {
    if residuals_a.len() < 3 || residuals_b.len() < 3 {
        return Err(Error::Undefined("F-test needs at least 3 residuals per model".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config(format!("confidence must lie in (0,1), got {confidence}")));
    }
    let (va, vb) = (variance(residuals_a), variance(residuals_b));
    let (da, db) = (residuals_a.len() - 1, residuals_b.len() - 1);
    let statistic = if va == vb {
        1.0
    } else if vb == 0.0 {
        f64::INFINITY
    } else {
        va / vb
    };
    let cdf = if statistic.is_infinite() {
        1.0
    } else {
        f_cdf(statistic, da as f64, db as f64)
    };
    let p_value = (2.0 * cdf.min(1.0 - cdf)).min(1.0);
    let verdict = if p_value < 1.0 - confidence {
        if va < vb {
            1
        } else {
            -1
        }
    } else {
        0
    };
    Ok(FTest {
        statistic,
        df_a: da,
        df_b: db,
        p_value,
        verdict,
    })
}
