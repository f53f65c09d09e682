//! Problem instances: a quadratic objective, one linear chance constraint and
//! the source of its uncertain coefficients.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::baselines::{normal_cdf, quantile_gaussian};
use crate::error::{check_dim, Error, Result};

/// Seeded generator used by every stochastic routine in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `f(x) = ½ xᵀAx + bᵀx + c0` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c0: f64,
}

impl QuadraticObjective {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c0: f64) -> Result<Self> {
        let n = b.len();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "A is {}x{}, expected {n}x{n}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a != a.transpose() {
            return Err(Error::InvalidArgument("A must be exactly symmetric".into()));
        }
        if !a.iter().chain(b.iter()).all(|v| v.is_finite()) || !c0.is_finite() {
            return Err(Error::InvalidArgument("objective has non-finite entries".into()));
        }
        Ok(Self { a, b, c0 })
    }

    /// `½ xᵀx + bᵀx`.
    pub fn identity(b: DVector<f64>) -> Self {
        let n = b.len();
        Self {
            a: DMatrix::identity(n, n),
            b,
            c0: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("x", x.len(), self.dim())?;
        Ok(0.5 * x.dot(&(&self.a * x)) + self.b.dot(x) + self.c0)
    }

    pub fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x", x.len(), self.dim())?;
        Ok(&self.a * x + &self.b)
    }

    pub fn hess(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("x", x.len(), self.dim())?;
        Ok(self.a.clone())
    }
}

/// `Prob{cᵀx + d ≥ 0} ≥ 1 − ρ` with `c ~ N(c̄, Σ)` in the analytic model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearChanceConstraint {
    cbar: DVector<f64>,
    d: f64,
    rho: f64,
    covariance: DMatrix<f64>,
    /// Lower Cholesky factor of the covariance.
    chol_l: DMatrix<f64>,
}

impl LinearChanceConstraint {
    pub fn new(cbar: DVector<f64>, d: f64, rho: f64, covariance: DMatrix<f64>) -> Result<Self> {
        let n = cbar.len();
        if !(rho > 0.0 && rho < 0.5) {
            return Err(Error::InvalidArgument(format!("rho = {rho} must lie in (0, 0.5)")));
        }
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "covariance is {}x{}, expected {n}x{n}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if covariance != covariance.transpose() {
            return Err(Error::InvalidArgument("covariance must be symmetric".into()));
        }
        let chol = Cholesky::new(covariance.clone()).ok_or_else(|| {
            Error::InvalidArgument("covariance must be positive definite".into())
        })?;
        if !d.is_finite() || !cbar.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("constraint has non-finite entries".into()));
        }
        Ok(Self {
            cbar,
            d,
            rho,
            chol_l: chol.l(),
            covariance,
        })
    }

    pub fn with_identity(cbar: DVector<f64>, d: f64, rho: f64) -> Result<Self> {
        let n = cbar.len();
        Self::new(cbar, d, rho, DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.cbar.len()
    }

    pub fn cbar(&self) -> &DVector<f64> {
        &self.cbar
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn covariance_factor(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    pub fn is_identity_covariance(&self) -> bool {
        self.covariance == DMatrix::identity(self.dim(), self.dim())
    }

    /// Same constraint at a different risk level.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(self.cbar.clone(), self.d, rho, self.covariance.clone())
    }

    /// `κ = −Φ⁻¹(ρ)`, positive for `ρ < ½`.
    pub fn kappa(&self) -> f64 {
        -quantile_gaussian(self.rho).expect("rho validated at construction")
    }

    /// `g(x, h) = hᵀx + d`.
    pub fn value(&self, x: &DVector<f64>, h: &DVector<f64>) -> Result<f64> {
        check_dim("x", x.len(), self.dim())?;
        check_dim("h", h.len(), self.dim())?;
        Ok(h.dot(x) + self.d)
    }

    /// Standard deviation of `cᵀx` under the analytic model, `‖Lᵀx‖`.
    pub fn spread(&self, x: &DVector<f64>) -> f64 {
        self.chol_l.tr_mul(x).norm()
    }

    /// Exact `Prob{cᵀx + d ≥ 0}` under `c ~ N(c̄, Σ)`.
    pub fn analytic_feasibility(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("x", x.len(), self.dim())?;
        let mean = self.cbar.dot(x) + self.d;
        let sd = self.spread(x);
        if sd == 0.0 {
            return Ok(if mean >= 0.0 { 1.0 } else { 0.0 });
        }
        Ok(normal_cdf(mean / sd))
    }

    /// Signed slack of the deterministic cone form `c̄ᵀx + d − κ‖Lᵀx‖`.
    pub fn cone_slack(&self, x: &DVector<f64>) -> f64 {
        self.cbar.dot(x) + self.d - self.kappa() * self.spread(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyKind {
    AnalyticGaussian {
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
    /// Stored draws, one per row. The analytic density is never consulted.
    EmpiricalSamples { samples: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySource {
    kind: UncertaintyKind,
    dim: usize,
    seed: u64,
    chol_l: Option<DMatrix<f64>>,
}

impl UncertaintySource {
    pub fn analytic(mean: DVector<f64>, covariance: DMatrix<f64>, seed: u64) -> Result<Self> {
        let n = mean.len();
        if covariance.shape() != (n, n) {
            return Err(Error::InvalidArgument("covariance shape does not match mean".into()));
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::InvalidArgument("covariance must be positive definite".into()))?;
        Ok(Self {
            kind: UncertaintyKind::AnalyticGaussian { mean, covariance },
            dim: n,
            seed,
            chol_l: Some(chol.l()),
        })
    }

    /// Resamples stored rows. `samples` may have zero rows; drawing then fails.
    pub fn empirical(samples: DMatrix<f64>, seed: u64) -> Self {
        Self {
            dim: samples.ncols(),
            kind: UncertaintyKind::EmpiricalSamples { samples },
            seed,
            chol_l: None,
        }
    }

    pub fn kind(&self) -> &UncertaintyKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draw(&self, count: usize) -> Result<DMatrix<f64>> {
        self.draw_seeded(count, self.seed)
    }

    /// `count × d` matrix of draws, deterministic in `seed`.
    pub fn draw_seeded(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        if count == 0 {
            return Err(Error::InvalidArgument("draw count must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        match &self.kind {
            UncertaintyKind::AnalyticGaussian { mean, .. } => {
                let l = self.chol_l.as_ref().expect("analytic source has a factor");
                let z = DMatrix::from_fn(self.dim, count, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut draws = l * z;
                for mut col in draws.column_iter_mut() {
                    col += mean;
                }
                Ok(draws.transpose())
            }
            UncertaintyKind::EmpiricalSamples { samples } => {
                let rows = samples.nrows();
                if rows == 0 {
                    return Err(Error::State("empirical source has no stored samples".into()));
                }
                let picks: Vec<usize> = (0..count).map(|_| rng.random_range(0..rows)).collect();
                Ok(samples.select_rows(picks.iter()))
            }
        }
    }

    fn fingerprint_into(&self, hasher: &mut Sha256) {
        match &self.kind {
            UncertaintyKind::AnalyticGaussian { mean, covariance } => {
                hasher.update(b"analytic-gaussian");
                hash_slice(hasher, mean.as_slice());
                hash_slice(hasher, covariance.as_slice());
            }
            UncertaintyKind::EmpiricalSamples { samples } => {
                hasher.update(b"empirical-samples");
                hasher.update((samples.nrows() as u64).to_le_bytes());
                hash_slice(hasher, samples.as_slice());
            }
        }
        hasher.update(self.seed.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcpInstance {
    objective: QuadraticObjective,
    constraint: LinearChanceConstraint,
    uncertainty: UncertaintySource,
}

impl CcpInstance {
    pub fn new(
        objective: QuadraticObjective,
        constraint: LinearChanceConstraint,
        uncertainty: UncertaintySource,
    ) -> Result<Self> {
        let n = objective.dim();
        check_dim("constraint", constraint.dim(), n)?;
        check_dim("uncertainty", uncertainty.dim(), n)?;
        Ok(Self {
            objective,
            constraint,
            uncertainty,
        })
    }

    /// `min ½‖x‖² + 1ᵀx` s.t. `Prob{cᵀx + 1 ≥ 0} ≥ 1 − ρ`, `c ~ N(1, I)`.
    pub fn linear_benchmark(n: usize, rho: f64, seed: u64) -> Result<Self> {
        let ones = DVector::from_element(n, 1.0);
        let constraint = LinearChanceConstraint::with_identity(ones.clone(), 1.0, rho)?;
        let uncertainty = UncertaintySource::analytic(ones.clone(), DMatrix::identity(n, n), seed)?;
        Self::new(QuadraticObjective::identity(ones), constraint, uncertainty)
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn objective(&self) -> &QuadraticObjective {
        &self.objective
    }

    pub fn constraint(&self) -> &LinearChanceConstraint {
        &self.constraint
    }

    pub fn uncertainty(&self) -> &UncertaintySource {
        &self.uncertainty
    }

    pub fn rho(&self) -> f64 {
        self.constraint.rho
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Ok(Self {
            constraint: self.constraint.with_rho(rho)?,
            ..self.clone()
        })
    }

    /// SHA-256 over a canonical little-endian encoding of every field.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"ccp-instance-v1");
        hasher.update((self.dim() as u64).to_le_bytes());
        hash_slice(&mut hasher, self.objective.a.as_slice());
        hash_slice(&mut hasher, self.objective.b.as_slice());
        hash_slice(&mut hasher, &[self.objective.c0]);
        hash_slice(&mut hasher, self.constraint.cbar.as_slice());
        hash_slice(
            &mut hasher,
            &[self.constraint.d, self.constraint.rho],
        );
        hash_slice(&mut hasher, self.constraint.covariance.as_slice());
        self.uncertainty.fingerprint_into(&mut hasher);
        hex::encode(hasher.finalize())
    }

    /// Parses an instance definition file. See [`parse_instance`] for the schema.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        parse_instance(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

fn hash_slice(hasher: &mut Sha256, values: &[f64]) {
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
}

/// Parses the key-value instance format.
///
/// One `key = value` per line; `#` starts a comment. Vectors are whitespace
/// or comma separated numbers, and a single number is broadcast to length
/// `n`. Matrices are `identity`, `diag v1 … vn` or `n²` row-major numbers.
///
/// | key           | required | meaning                                         |
/// |---------------|----------|-------------------------------------------------|
/// | `n`           | yes      | dimension                                       |
/// | `A`           | no       | objective Hessian, default `identity`           |
/// | `b`           | yes      | objective linear term                           |
/// | `c0`          | no       | objective offset, default 0                     |
/// | `cbar`        | yes      | mean of the uncertain coefficient               |
/// | `d`           | yes      | constraint offset                               |
/// | `rho`         | yes      | risk level in (0, 0.5)                          |
/// | `covariance`  | no       | default `identity`                              |
/// | `uncertainty` | no       | `analytic-gaussian` (default) or `empirical-samples` |
/// | `samples`     | empirical| headerless CSV, one draw per row, relative to the file |
/// | `seed`        | no       | default 0                                       |
pub fn parse_instance(text: &str, base_dir: &Path) -> Result<CcpInstance> {
    let mut kv = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if kv.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    let known = [
        "n", "A", "b", "c0", "cbar", "d", "rho", "covariance", "uncertainty", "samples", "seed",
    ];
    if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown key `{k}`")));
    }
    let get = |k: &str| kv.get(k).map(String::as_str);
    let need = |k: &str| get(k).ok_or_else(|| Error::Config(format!("missing key `{k}`")));

    let n: usize = need("n")?
        .parse()
        .map_err(|_| Error::Config("`n` must be a positive integer".into()))?;
    if n == 0 {
        return Err(Error::Config("`n` must be positive".into()));
    }
    let a = parse_matrix("A", get("A").unwrap_or("identity"), n)?;
    let b = parse_vector("b", need("b")?, n)?;
    let c0 = parse_scalar("c0", get("c0").unwrap_or("0"))?;
    let cbar = parse_vector("cbar", need("cbar")?, n)?;
    let d = parse_scalar("d", need("d")?)?;
    let rho = parse_scalar("rho", need("rho")?)?;
    let cov = parse_matrix("covariance", get("covariance").unwrap_or("identity"), n)?;
    let seed: u64 = get("seed")
        .unwrap_or("0")
        .parse()
        .map_err(|_| Error::Config("`seed` must be a non-negative integer".into()))?;

    let objective = QuadraticObjective::new(a, b, c0)?;
    let constraint = LinearChanceConstraint::new(cbar.clone(), d, rho, cov.clone())?;
    let uncertainty = match get("uncertainty").unwrap_or("analytic-gaussian") {
        "analytic-gaussian" => UncertaintySource::analytic(cbar, cov, seed)?,
        "empirical-samples" => {
            let rel = need("samples")?;
            let path: PathBuf = base_dir.join(rel);
            UncertaintySource::empirical(load_draws_csv(&path, n)?, seed)
        }
        other => return Err(Error::Config(format!("unknown uncertainty kind `{other}`"))),
    };
    CcpInstance::new(objective, constraint, uncertainty)
}

/// Loads a headerless CSV of draws with `dim` columns.
pub fn load_draws_csv(path: &Path, dim: usize) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::file(path, io),
            other => Error::Format {
                path: path.into(),
                detail: format!("{other:?}"),
            },
        })?;
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        if record.len() != dim {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("row {} has {} columns, expected {dim}", rows + 1, record.len()),
            });
        }
        for field in record.iter() {
            data.push(field.parse::<f64>().map_err(|_| Error::Format {
                path: path.into(),
                detail: format!("row {}: `{field}` is not a number", rows + 1),
            })?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, dim, &data))
}

fn numbers(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("`{key}`: `{s}` is not a number")))
        })
        .collect()
}

fn parse_scalar(key: &str, value: &str) -> Result<f64> {
    match numbers(key, value)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Config(format!("`{key}` must be a single number"))),
    }
}

fn parse_vector(key: &str, value: &str, n: usize) -> Result<DVector<f64>> {
    let v = numbers(key, value)?;
    match v.len() {
        1 => Ok(DVector::from_element(n, v[0])),
        len if len == n => Ok(DVector::from_vec(v)),
        len => Err(Error::Config(format!("`{key}` has {len} entries, expected 1 or {n}"))),
    }
}

fn parse_matrix(key: &str, value: &str, n: usize) -> Result<DMatrix<f64>> {
    if value == "identity" {
        return Ok(DMatrix::identity(n, n));
    }
    if let Some(rest) = value.strip_prefix("diag") {
        let diag = parse_vector(key, rest, n)?;
        return Ok(DMatrix::from_diagonal(&diag));
    }
    let v = numbers(key, value)?;
    if v.len() != n * n {
        return Err(Error::Config(format!(
            "`{key}` has {} entries, expected {}",
            v.len(),
            n * n
        )));
    }
    Ok(DMatrix::from_row_slice(n, n, &v))
}

/// Column means of a draw matrix, `h̄ = (1/L) Σ h⁽ˡ⁾`.
pub fn column_mean(draws: &DMatrix<f64>) -> DVector<f64> {
    let l = draws.nrows() as f64;
    DVector::from_iterator(draws.ncols(), draws.column_iter().map(|c| c.sum() / l))
}
