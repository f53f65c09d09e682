//! Summary statistics over repaired samples, and their on-disk forms.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ccp::CcpInstance;
use crate::datagen::{csv_to_file, empirical_rho};
use crate::error::{Error, Result};
use crate::sampler::Projector;

/// Column headers of the CSV report.
pub const REPORT_HEADERS: [&str; 7] = [
    "FvalMean",
    "FvalStd",
    "FvalMedian",
    "FvalQuan25",
    "FvalQuan75",
    "Probability",
    "Runtime",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub fval_mean: f64,
    pub fval_std: f64,
    pub fval_median: f64,
    pub fval_q25: f64,
    pub fval_q75: f64,
    /// Mean over samples of the fraction of fresh draws satisfying the constraint.
    pub empirical_feasibility: f64,
    /// Wall-clock sampling time per repeat.
    pub runtime_seconds: f64,
    pub repeats: usize,
    /// Number of samples that needed projection.
    pub repaired: usize,
}

/// Linear-interpolation quantile of ascending `sorted` (the median of an even
/// count is the mean of the two central values).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(median, q25, q75)` of `values`.
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (
        quantile_sorted(&sorted, 0.5),
        quantile_sorted(&sorted, 0.25),
        quantile_sorted(&sorted, 0.75),
    )
}

/// Mean and sample standard deviation; a single value has deviation 0.
/// Deviations are taken about the first value, so a constant batch gives
/// exactly its value and zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let pivot = values[0];
    let shift = values.iter().map(|v| v - pivot).sum::<f64>() / n;
    let mean = pivot + shift;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - pivot - shift).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Repairs every sample, evaluates the objective, and estimates feasibility
/// on `l_eval` fresh draws seeded by `seed`. Returns the report and the
/// repaired samples.
pub fn compute_report(
    samples: &[DVector<f64>],
    instance: &CcpInstance,
    l_eval: usize,
    seed: u64,
    runtime_seconds: f64,
) -> Result<(SampleReport, Vec<DVector<f64>>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one sample".into()));
    }
    let projector = Projector::new(instance.constraint())?;
    let draws = instance.uncertainty().draw_seeded(l_eval, seed)?;
    let mut repaired = Vec::with_capacity(samples.len());
    let mut fvals = Vec::with_capacity(samples.len());
    let mut feasible = 0.0;
    let mut moved = 0;
    for x in samples {
        let y = projector.project(x)?;
        if &y != x {
            moved += 1;
        }
        fvals.push(instance.objective().eval(&y)?);
        feasible += 1.0 - empirical_rho(instance, &y, &draws)?;
        repaired.push(y);
    }
    let (fval_mean, fval_std) = mean_std(&fvals);
    let (fval_median, fval_q25, fval_q75) = quartiles(&fvals);
    let report = SampleReport {
        fval_mean,
        fval_std,
        fval_median,
        fval_q25,
        fval_q75,
        empirical_feasibility: feasible / samples.len() as f64,
        runtime_seconds,
        repeats: samples.len(),
        repaired: moved,
    };
    Ok((report, repaired))
}

/// Writes `<stem>.json` and `<stem>.csv` under `dir`. The CSV holds one row
/// per labelled report.
pub fn write_reports(dir: &Path, stem: &str, rows: &[(&str, &SampleReport)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let json: serde_json::Map<String, serde_json::Value> = rows
        .iter()
        .map(|(label, r)| Ok((label.to_string(), serde_json::to_value(r)?)))
        .collect::<Result<_>>()?;
    fs::write(&json_path, serde_json::to_string_pretty(&json)?).map_err(|e| Error::file(&json_path, e))?;

    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_to_file(&csv_path, e))?;
    let mut header = vec!["Method"];
    header.extend(REPORT_HEADERS);
    w.write_record(&header)?;
    for (label, r) in rows {
        w.write_record([
            label.to_string(),
            format!("{:.4}", r.fval_mean),
            format!("{:.4}", r.fval_std),
            format!("{:.4}", r.fval_median),
            format!("{:.4}", r.fval_q25),
            format!("{:.4}", r.fval_q75),
            format!("{:.4}", r.empirical_feasibility),
            format!("{:.6}", r.runtime_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}
