//! Model evaluation against pseudo-MOS datasets and pairwise comparison
//! reports.

mod stats;

pub use stats::{
    average_ranks, f_cdf, f_quantile, f_test, inc_beta, linear_fit, ln_gamma, logistic4,
    logistic_fit, logistic_fit_traced, pearson, srocc, FTest, LogisticFit,
};

use std::fmt::Write as _;

use crate::data::EvalDataset;
use crate::error::{Error, Result};
use crate::net::{count_flops, count_params, sequence_quality, NetworkSpec, ParameterSet, PatchSampler};

/// Confidence level of the F-test verdicts.
pub const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEval {
    pub name: String,
    pub predictions: Vec<f64>,
    pub truth: Vec<f64>,
    pub srocc: f64,
    pub fit: LogisticFit,
    pub residual_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub params: u64,
    pub nonzero: u64,
    pub flops: u64,
    pub datasets: Vec<DatasetEval>,
}

impl EvalReport {
    /// Mean SROCC over the datasets.
    pub fn overall_srocc(&self) -> f64 {
        self.datasets.iter().map(|d| d.srocc).sum::<f64>() / self.datasets.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,dataset,items,srocc,residual_variance,linear_fallback\n");
        for d in &self.datasets {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.6},{}",
                self.model,
                d.name,
                d.truth.len(),
                d.srocc,
                d.residual_variance,
                u8::from(d.fit.linear_fallback)
            );
        }
        let _ = writeln!(s, "{},overall,,{:.4},,", self.model, self.overall_srocc());
        let _ = writeln!(s, "# params={} nonzero={} flops={}", self.params, self.nonzero, self.flops);
        s
    }
}

fn residual_variance(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// SROCC and logistic regression of `predictions` against `truth`.
pub fn evaluate_predictions(name: &str, predictions: Vec<f64>, truth: Vec<f64>) -> Result<DatasetEval> {
    if predictions.is_empty() {
        return Err(Error::data(format!("dataset {name} is empty")));
    }
    let srocc = srocc(&predictions, &truth)?;
    let fit = logistic_fit(&predictions, &truth)?;
    Ok(DatasetEval {
        name: name.to_string(),
        residual_variance: residual_variance(&fit.residuals),
        predictions,
        truth,
        srocc,
        fit,
    })
}

/// Scores every item by mean patch quality and evaluates each dataset.
pub fn evaluate_model(
    model: &str,
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    datasets: &[EvalDataset],
) -> Result<EvalReport> {
    if datasets.is_empty() {
        return Err(Error::data("no evaluation datasets"));
    }
    let mut out = Vec::with_capacity(datasets.len());
    for set in datasets {
        let first = set
            .items
            .first()
            .and_then(|i| i.reference.first())
            .ok_or_else(|| Error::data(format!("dataset {} is empty", set.name)))?;
        let frame_channels = first.geometry().channels;
        if !spec.patch.channels.is_multiple_of(frame_channels) {
            return Err(Error::shape(format!(
                "{}-channel network cannot consume {}-channel frames",
                spec.patch.channels, frame_channels
            )));
        }
        let sampler = PatchSampler::tiling(spec, spec.patch.channels / frame_channels);
        let predictions = set
            .items
            .iter()
            .map(|item| sequence_quality(spec, params, &item.reference, &item.distorted, &sampler))
            .collect::<Result<Vec<_>>>()?;
        let truth = set.items.iter().map(|i| i.mos as f64).collect();
        out.push(evaluate_predictions(&set.name, predictions, truth)?);
    }
    Ok(EvalReport {
        model: model.to_string(),
        params: count_params(params, false),
        nonzero: count_params(params, true),
        flops: count_flops(spec)?,
        datasets: out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub dataset: String,
    pub srocc_reference: f64,
    pub srocc_candidate: f64,
    /// Candidate residuals against reference residuals.
    pub f_test: FTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference: String,
    pub candidate: String,
    pub rows: Vec<ComparisonRow>,
    pub params: (u64, u64),
    pub flops: (u64, u64),
    pub overall: (f64, f64),
}

impl Comparison {
    pub fn params_ratio(&self) -> f64 {
        self.params.1 as f64 / self.params.0 as f64
    }

    pub fn flops_ratio(&self) -> f64 {
        self.flops.1 as f64 / self.flops.0 as f64
    }

    /// Candidate overall SROCC as a fraction of the reference's.
    pub fn srocc_retention(&self) -> f64 {
        self.overall.1 / self.overall.0
    }
}

/// Per-dataset comparison; a verdict of +1 means the candidate is
/// significantly better than the reference.
pub fn compare_models(reference: &EvalReport, candidate: &EvalReport) -> Result<Comparison> {
    if reference.datasets.len() != candidate.datasets.len() {
        return Err(Error::data("reports cover different dataset lists"));
    }
    let rows = reference
        .datasets
        .iter()
        .zip(&candidate.datasets)
        .map(|(r, c)| {
            if r.name != c.name || r.truth != c.truth {
                return Err(Error::data(format!(
                    "dataset {} does not match dataset {}",
                    r.name, c.name
                )));
            }
            Ok(ComparisonRow {
                dataset: r.name.clone(),
                srocc_reference: r.srocc,
                srocc_candidate: c.srocc,
                f_test: f_test(&c.fit.residuals, &r.fit.residuals, CONFIDENCE)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        reference: reference.model.clone(),
        candidate: candidate.model.clone(),
        rows,
        params: (reference.params, candidate.params),
        flops: (reference.flops, candidate.flops),
        overall: (reference.overall_srocc(), candidate.overall_srocc()),
    })
}

/// Percentage truncated (not rounded) to two decimals: `0.135774 → "13.57%"`.
pub fn percent(ratio: f64) -> String {
    let hundredths = (ratio * 10_000.0 + 1e-9).floor() as i64;
    format!("{}.{:02}%", hundredths / 100, hundredths % 100)
}

pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut s = String::from("dataset,srocc_reference,srocc_candidate,f_statistic,p_value,verdict\n");
    for r in &cmp.rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4},{}",
            r.dataset, r.srocc_reference, r.srocc_candidate, r.f_test.statistic, r.f_test.p_value, r.f_test.verdict
        );
    }
    let _ = writeln!(s, "overall,{:.4},{:.4},,,", cmp.overall.0, cmp.overall.1);
    let _ = writeln!(
        s,
        "# params {} -> {} ({}), flops {} -> {} ({}), srocc retention {}",
        cmp.params.0,
        cmp.params.1,
        percent(cmp.params_ratio()),
        cmp.flops.0,
        cmp.flops.1,
        percent(cmp.flops_ratio()),
        percent(cmp.srocc_retention())
    );
    s
}

/// Aligned table with `x(y)` cells: SROCC and the F-test verdict against
/// the reference model.
pub fn comparison_table(cmp: &Comparison) -> String {
    let w = cmp
        .rows
        .iter()
        .map(|r| r.dataset.len())
        .chain([16])
        .max()
        .unwrap_or(16);
    let c1 = cmp.reference.len().max(12);
    let c2 = cmp.candidate.len().max(14);
    let mut s = format!("{:<w$}  {:>c1$}  {:>c2$}\n", "dataset", cmp.reference, cmp.candidate);
    for r in &cmp.rows {
        let cell = format!("{:.4}({})", r.srocc_candidate, r.f_test.verdict);
        let _ = writeln!(s, "{:<w$}  {:>c1$.4}  {:>c2$}", r.dataset, r.srocc_reference, cell);
    }
    let _ = writeln!(s, "{:<w$}  {:>c1$.4}  {:>c2$.4}", "overall", cmp.overall.0, cmp.overall.1);
    let _ = writeln!(s, "{:<w$}  {:>c1$}  {:>c2$}", "params", cmp.params.0, cmp.params.1);
    let _ = writeln!(s, "{:<w$}  {:>c1$}  {:>c2$}", "flops", cmp.flops.0, cmp.flops.1);
    let _ = writeln!(s, "{:<w$}  {:>c1$}  {:>c2$}", "params retained", "", percent(cmp.params_ratio()));
    let _ = writeln!(s, "{:<w$}  {:>c1$}  {:>c2$}", "flops retained", "", percent(cmp.flops_ratio()));
    let _ = writeln!(s, "{:<w$}  {:>c1$}  {:>c2$}", "srocc retained", "", percent(cmp.srocc_retention()));
    s
}

/// Single-model table: dataset, SROCC, residual variance.
pub fn report_table(report: &EvalReport) -> String {
    let mut s = format!("{:<28} {:>8} {:>10}\n", "dataset", "srocc", "resid.var");
    for d in &report.datasets {
        let _ = writeln!(s, "{:<28} {:>8.4} {:>10.4}", d.name, d.srocc, d.residual_variance);
    }
    let _ = writeln!(s, "{:<28} {:>8.4}", "overall", report.overall_srocc());
    let _ = writeln!(
        s,
        "params {} (nonzero {}), flops {}",
        report.params, report.nonzero, report.flops
    );
    s
}
