//! Training data from deterministic restricted problems.
//!
//! For each margin `z` on a grid, the restricted problem replaces the chance
//! constraint by `h̄ᵀx + d ≥ z` at the empirical mean `h̄` of one shared batch
//! of draws. Its minimiser is labelled with the empirical risk measured on
//! that same batch.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::normal_cdf;
use crate::ccp::{column_mean, CcpInstance, SeededRng, UncertaintyKind};
use crate::error::{check_dim, Error, Result};

/// Ascending, non-negative restriction margins.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictionGrid {
    z: Vec<f64>,
}

impl RestrictionGrid {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::InvalidArgument("restriction grid is empty".into()));
        }
        if z.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("restriction margins must be finite and >= 0".into()));
        }
        if z.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("restriction margins must be sorted".into()));
        }
        Ok(Self { z })
    }

    /// `count` evenly spaced margins from `lo` to `hi` inclusive.
    pub fn linspace(lo: f64, hi: f64, count: usize) -> Result<Self> {
        let z = match count {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect(),
        };
        Self::new(z)
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedSolution {
    pub x: DVector<f64>,
    pub multiplier: f64,
}

/// Closed-form KKT solver for `min f(x)` s.t. `h̄ᵀx + d ≥ z`, reusable across `z`.
#[derive(Debug, Clone)]
pub struct RestrictedSolver {
    a: DMatrix<f64>,
    b: DVector<f64>,
    hbar: DVector<f64>,
    d: f64,
    a_inv_b: DVector<f64>,
    a_inv_h: DVector<f64>,
    h_a_inv_h: f64,
    h_a_inv_b: f64,
}

impl RestrictedSolver {
    pub fn new(instance: &CcpInstance, hbar: &DVector<f64>) -> Result<Self> {
        check_dim("hbar", hbar.len(), instance.dim())?;
        let obj = instance.objective();
        let chol = Cholesky::new(obj.a().clone()).ok_or_else(|| {
            Error::IllPosed("objective Hessian is not positive definite".into())
        })?;
        let a_inv_b = chol.solve(obj.b());
        let a_inv_h = chol.solve(hbar);
        Ok(Self {
            a: obj.a().clone(),
            b: obj.b().clone(),
            hbar: hbar.clone(),
            d: instance.constraint().d(),
            h_a_inv_h: hbar.dot(&a_inv_h),
            h_a_inv_b: hbar.dot(&a_inv_b),
            a_inv_b,
            a_inv_h,
        })
    }

    /// `x = −A⁻¹(b − λh̄)`, `λ = max(0, (z − d + h̄ᵀA⁻¹b) / h̄ᵀA⁻¹h̄)`.
    pub fn solve(&self, z: f64) -> Result<RestrictedSolution> {
        if !(z >= 0.0) {
            return Err(Error::InvalidArgument(format!("restriction margin {z} must be >= 0")));
        }
        let shortfall = z - self.d + self.h_a_inv_b;
        if self.h_a_inv_h == 0.0 {
            if z > self.d {
                return Err(Error::InfeasibleRestriction(format!(
                    "empirical mean is zero and z = {z} exceeds d = {}",
                    self.d
                )));
            }
            return Ok(RestrictedSolution {
                x: -&self.a_inv_b,
                multiplier: 0.0,
            });
        }
        let multiplier = (shortfall / self.h_a_inv_h).max(0.0);
        let x = &self.a_inv_h * multiplier - &self.a_inv_b;
        Ok(RestrictedSolution { x, multiplier })
    }

    /// Stationarity and complementarity residuals for a solution at margin `z`.
    pub fn kkt_residuals(&self, sol: &RestrictedSolution, z: f64) -> (f64, f64) {
        let stationarity = (&self.a * &sol.x + &self.b - &self.hbar * sol.multiplier).amax();
        let slack = self.hbar.dot(&sol.x) + self.d - z;
        (stationarity, (sol.multiplier * slack).abs())
    }
}

pub fn solve_restricted(instance: &CcpInstance, hbar: &DVector<f64>, z: f64) -> Result<RestrictedSolution> {
    RestrictedSolver::new(instance, hbar)?.solve(z)
}

/// `1 − (1/L)·#{l : h⁽ˡ⁾ᵀx + d ≥ 0}`; ties count as satisfied.
pub fn empirical_rho(instance: &CcpInstance, x: &DVector<f64>, draws: &DMatrix<f64>) -> Result<f64> {
    check_dim("x", x.len(), instance.dim())?;
    check_dim("draws", draws.ncols(), instance.dim())?;
    if draws.nrows() == 0 {
        return Err(Error::InvalidArgument("at least one draw is required".into()));
    }
    let d = instance.constraint().d();
    let values = draws * x;
    let violated = values.iter().filter(|v| !(**v + d >= 0.0)).count();
    Ok(violated as f64 / draws.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub count: usize,
    pub draws: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub hbar: Vec<f64>,
    pub z: Vec<f64>,
}

/// Pairs `(x⁽ⁱ⁾, ρ⁽ⁱ⁾)`, one row of `points` per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleDataset {
    pub points: DMatrix<f64>,
    pub risks: Vec<f64>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub index: usize,
    pub z: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub dataset: FeasibleDataset,
    pub skipped: Vec<SkippedPoint>,
}

impl FeasibleDataset {
    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    /// Largest Euclidean norm among the stored points.
    pub fn radius(&self) -> f64 {
        self.points.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// Per-coordinate variance of the points, averaged over coordinates.
    pub fn mean_variance(&self) -> f64 {
        let n = self.len() as f64;
        let total: f64 = self
            .points
            .column_iter()
            .map(|c| {
                let m = c.sum() / n;
                c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
            })
            .sum();
        total / self.dim() as f64
    }

    pub fn risk_range(&self) -> (f64, f64) {
        let lo = self.risks.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Writes `x_1..x_n,rho` rows and a `<path>.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_file(path, e))?;
        let mut header: Vec<String> = (1..=self.dim()).map(|i| format!("x_{i}")).collect();
        header.push("rho".into());
        w.write_record(&header)?;
        for (i, rho) in self.risks.iter().enumerate() {
            let mut rec: Vec<String> = self.points.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{rho:?}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let meta_path = sidecar_path(path);
        fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::file(&meta_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = sidecar_path(path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::file(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_to_file(path, e))?;
        let n = meta.n;
        if r.headers()?.len() != n + 1 {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("expected {} columns", n + 1),
            });
        }
        let mut data = Vec::new();
        let mut risks = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    path: path.into(),
                    detail: e.to_string(),
                })?;
            data.extend_from_slice(&vals[..n]);
            risks.push(vals[n]);
        }
        if risks.len() != meta.count {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("{} rows, metadata says {}", risks.len(), meta.count),
            });
        }
        Ok(Self {
            points: DMatrix::from_row_slice(risks.len(), n, &data),
            risks,
            meta,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub(crate) fn csv_to_file(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Format {
            path: path.into(),
            detail: format!("{other:?}"),
        },
    }
}

/// Solves the restricted problem at every grid margin against one shared
/// batch of `draws` draws. Grid points whose restriction is infeasible are
/// skipped and reported.
pub fn generate_dataset(instance: &CcpInstance, grid: &RestrictionGrid, draws: usize, seed: u64) -> Result<Generation> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("restriction grid is empty".into()));
    }
    let batch = instance.uncertainty().draw_seeded(draws, seed)?;
    let hbar = column_mean(&batch);
    let solver = RestrictedSolver::new(instance, &hbar)?;

    let results: Vec<Result<(DVector<f64>, f64)>> = grid
        .values()
        .par_iter()
        .map(|&z| {
            let sol = solver.solve(z)?;
            let rho = empirical_rho(instance, &sol.x, &batch)?;
            Ok((sol.x, rho))
        })
        .collect();

    let n = instance.dim();
    let mut data = Vec::with_capacity(grid.len() * n);
    let mut risks = Vec::with_capacity(grid.len());
    let mut kept_z = Vec::with_capacity(grid.len());
    let mut skipped = Vec::new();
    for (index, (res, &z)) in results.into_iter().zip(grid.values()).enumerate() {
        match res {
            Ok((x, rho)) => {
                data.extend(x.iter());
                risks.push(rho);
                kept_z.push(z);
            }
            Err(e @ Error::InfeasibleRestriction(_)) => skipped.push(SkippedPoint {
                index,
                z,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let count = risks.len();
    Ok(Generation {
        dataset: FeasibleDataset {
            points: DMatrix::from_row_slice(count, n, &data),
            risks,
            meta: DatasetMeta {
                n,
                count,
                draws,
                seed,
                fingerprint: instance.fingerprint(),
                hbar: hbar.iter().copied().collect(),
                z: kept_z,
            },
        },
        skipped,
    })
}

/// `max(0, 1 − variance/(z_min/lipschitz − bias)²)`, or 0 once the margin
/// is eaten by the bias.
pub fn chebyshev_bound(z_min: f64, lipschitz: f64, variance: f64, mean_bias: f64) -> Result<f64> {
    if !(lipschitz > 0.0) {
        return Err(Error::InvalidArgument(format!("Lipschitz constant {lipschitz} must be positive")));
    }
    if !(variance >= 0.0 && mean_bias >= 0.0) {
        return Err(Error::InvalidArgument("variance and bias must be non-negative".into()));
    }
    let gap = z_min / lipschitz - mean_bias;
    if gap <= 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - variance / (gap * gap)).max(0.0))
}

/// Chebyshev feasibility bound at a restricted solution of an analytic
/// Gaussian instance, measured in the Euclidean norm: `L_x = ‖x‖₂`,
/// `Var(h) = tr Σ`, bias `‖h̄ − c̄‖₂`.
pub fn linear_chebyshev_bound(instance: &CcpInstance, hbar: &DVector<f64>, x: &DVector<f64>, z_min: f64) -> Result<f64> {
    let UncertaintyKind::AnalyticGaussian { mean, covariance } = instance.uncertainty().kind() else {
        return Err(Error::InvalidArgument("the bound needs the true mean and covariance".into()));
    };
    check_dim("hbar", hbar.len(), instance.dim())?;
    let lipschitz = x.norm();
    if lipschitz == 0.0 {
        return Ok(if instance.constraint().d() >= 0.0 { 1.0 } else { 0.0 });
    }
    chebyshev_bound(z_min, lipschitz, covariance.trace(), (hbar - mean).norm())
}

fn quadform_moments(q: &DMatrix<f64>, r: &DVector<f64>, s: f64) -> Result<(f64, f64)> {
    let n = r.len();
    if q.shape() != (n, n) {
        return Err(Error::InvalidArgument("Q shape does not match r".into()));
    }
    let mean = 0.5 * q.trace() + s;
    let var = 0.5 * q.norm_squared() + r.norm_squared();
    Ok((mean, var.sqrt()))
}

/// Normal approximation of `Prob{½uᵀQu + rᵀu + s ≥ 0}`, `u ~ N(0, I)`,
/// matching the first two moments of the quadratic form.
pub fn quadform_probability_gaussian(q: &DMatrix<f64>, r: &DVector<f64>, s: f64) -> Result<f64> {
    let (mean, sd) = quadform_moments(q, r, s)?;
    if sd == 0.0 {
        return Ok(if mean >= 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - normal_cdf(-mean / sd))
}

/// Monte-Carlo frequency of `½uᵀQu + rᵀu + s ≥ 0`. Draws are taken in the
/// eigenbasis of `Q`, which leaves the law of `u` unchanged.
pub fn quadform_probability_mc(q: &DMatrix<f64>, r: &DVector<f64>, s: f64, draws: usize, seed: u64) -> Result<f64> {
    quadform_moments(q, r, s)?;
    if draws == 0 {
        return Err(Error::InvalidArgument("draw count must be positive".into()));
    }
    let sym = (q + q.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let r_rot: Vec<f64> = eig.eigenvectors.tr_mul(r).iter().copied().collect();

    const CHUNK: usize = 1 << 14;
    let chunks = draws.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = SeededRng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let count = CHUNK.min(draws - c * CHUNK);
            (0..count)
                .filter(|_| {
                    let mut y = s;
                    for (l, rr) in lam.iter().zip(&r_rot) {
                        let u: f64 = StandardNormal.sample(&mut rng);
                        y += 0.5 * l * u * u + rr * u;
                    }
                    y >= 0.0
                })
                .count()
        })
        .sum();
    Ok(hits as f64 / draws as f64)
}
