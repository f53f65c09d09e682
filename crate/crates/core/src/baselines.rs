//! Analytic reference solutions: the exact cone reformulation of a Gaussian
//! linear chance constraint, and the empirical-mean restricted solution.
//!
//! Both the cone program and Euclidean projection onto the cone reduce to
//! `min ½xᵀAx + bᵀx  s.t.  κ‖Lᵀx‖ ≤ c̄ᵀx + d` with `Σ = LLᵀ`. [`ConeSolver`]
//! whitens by `y = Lᵀx`, diagonalises the whitened Hessian, and solves the
//! dual in the single multiplier `λ` by bisection: the constraint violation
//! at the Lagrangian minimiser is non-increasing in `λ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ccp::{CcpInstance, LinearChanceConstraint};
use crate::datagen::solve_restricted;
use crate::error::{check_dim, Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ⁻¹(p)`: Acklam's rational approximation refined by one Halley step.
pub fn quantile_gaussian(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {p} must lie in (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };

    let e = normal_cdf(x) - p;
    let u = e / normal_pdf(x);
    Ok(x - u / (1.0 + 0.5 * x * u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSolution {
    pub x: DVector<f64>,
    pub multiplier: f64,
    pub active: bool,
}

/// Minimiser of a strictly convex quadratic over one second-order cone
/// `κ‖Lᵀx‖ ≤ c̄ᵀx + d`. The Hessian, whitening and eigenbasis are fixed at
/// construction so repeated solves with different linear terms are cheap.
#[derive(Debug, Clone)]
pub struct ConeSolver {
    kappa: f64,
    d: f64,
    /// Eigenvalues of `L⁻¹AL⁻ᵀ`.
    lambda: DVector<f64>,
    /// Maps eigen coordinates back to `x`: `x = L⁻ᵀQ y'`.
    to_x: DMatrix<f64>,
    /// Maps a linear term `b` into eigen coordinates: `Qᵀ L⁻¹ b`.
    to_eig: DMatrix<f64>,
    c_eig: DVector<f64>,
    a: DMatrix<f64>,
    cbar: DVector<f64>,
    cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

const BISECTION_LIMIT: usize = 400;

impl ConeSolver {
    pub fn new(a: &DMatrix<f64>, constraint: &LinearChanceConstraint, kappa: f64) -> Result<Self> {
        let n = constraint.dim();
        if a.shape() != (n, n) {
            return Err(Error::InvalidArgument("Hessian shape does not match constraint".into()));
        }
        if !(kappa >= 0.0) {
            return Err(Error::InvalidArgument(format!("cone slope {kappa} must be non-negative")));
        }
        let l = constraint.covariance_factor();
        let l_inv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Singular("covariance factor is singular".into()))?;
        let mut a_w = &l_inv * a * l_inv.transpose();
        a_w = (&a_w + a_w.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a_w);
        let min_eig = eig.eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::IllPosed(format!(
                "objective Hessian is not positive definite (smallest whitened eigenvalue {min_eig:e})"
            )));
        }
        let q = eig.eigenvectors;
        let to_eig = q.transpose() * &l_inv;
        let c_eig = &to_eig * constraint.cbar();
        Ok(Self {
            kappa,
            d: constraint.d(),
            lambda: eig.eigenvalues,
            to_x: l_inv.transpose() * q,
            to_eig,
            c_eig,
            a: a.clone(),
            cbar: constraint.cbar().clone(),
            cov: constraint.covariance().clone(),
            chol_l: l.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// The cone is nonempty iff `d ≥ 0` or the whitened mean outgrows `κ`.
    pub fn is_feasible(&self) -> bool {
        self.d >= 0.0 || self.c_eig.norm() > self.kappa
    }

    /// Slack `c̄ᵀx + d − κ‖Lᵀx‖` of a point in original coordinates.
    pub fn slack(&self, x: &DVector<f64>) -> f64 {
        self.cbar.dot(x) + self.d - self.kappa * self.chol_l.tr_mul(x).norm()
    }

    /// Lagrangian minimiser in eigen coordinates for a fixed multiplier.
    fn inner(&self, b_eig: &DVector<f64>, lam: f64) -> DVector<f64> {
        let v = &self.c_eig * lam - b_eig;
        let target = lam * self.kappa;
        if lam == 0.0 || target == 0.0 {
            return v.component_div(&self.lambda);
        }
        if v.norm() <= target {
            return DVector::zeros(v.len());
        }
        // μ‖(Λ + μ)⁻¹v‖ increases from 0 to ‖v‖ on μ ∈ [0, ∞).
        let phi = |mu: f64| -> f64 {
            v.iter()
                .zip(self.lambda.iter())
                .map(|(vi, li)| {
                    let r = vi * mu / (li + mu);
                    r * r
                })
                .sum::<f64>()
                .sqrt()
                - target
        };
        let mut lo = 0.0;
        let mut hi = target.max(self.lambda.max()).max(1e-300);
        let mut expansions = 0;
        while phi(hi) < 0.0 && expansions < 2000 {
            lo = hi;
            hi *= 2.0;
            expansions += 1;
        }
        for _ in 0..BISECTION_LIMIT {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if phi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mu = 0.5 * (lo + hi);
        v.zip_map(&self.lambda, |vi, li| vi / (li + mu))
    }

    fn violation(&self, y: &DVector<f64>) -> f64 {
        self.kappa * y.norm() - self.c_eig.dot(y) - self.d
    }

    /// Minimises `½xᵀAx + bᵀx` over the cone.
    pub fn solve(&self, b: &DVector<f64>) -> Result<ConeSolution> {
        check_dim("b", b.len(), self.dim())?;
        if !self.is_feasible() {
            return Err(Error::InfeasibleInstance(format!(
                "cone is empty: d = {} < 0 and whitened mean norm {} <= kappa {}",
                self.d,
                self.c_eig.norm(),
                self.kappa
            )));
        }
        let b_eig = &self.to_eig * b;
        let y0 = self.inner(&b_eig, 0.0);
        if self.violation(&y0) <= 0.0 {
            return Ok(ConeSolution {
                x: &self.to_x * y0,
                multiplier: 0.0,
                active: false,
            });
        }

        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut expansions = 0;
        while self.violation(&self.inner(&b_eig, hi)) > 0.0 {
            lo = hi;
            hi *= 2.0;
            expansions += 1;
            if expansions > 200 || !hi.is_finite() {
                return Err(Error::Numerical(format!(
                    "multiplier search failed to bracket a root (last lambda {hi:e}, violation {:e})",
                    self.violation(&self.inner(&b_eig, lo))
                )));
            }
        }
        for _ in 0..BISECTION_LIMIT {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo <= 1e-12 * f64::EPSILON * hi {
                break;
            }
            if self.violation(&self.inner(&b_eig, mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let y = self.inner(&b_eig, hi);
        Ok(ConeSolution {
            x: &self.to_x * y,
            multiplier: hi,
            active: true,
        })
    }

    /// Largest of the stationarity, complementarity and primal-feasibility residuals.
    pub fn kkt_residual(&self, b: &DVector<f64>, sol: &ConeSolution) -> f64 {
        let x = &sol.x;
        let spread = self.chol_l.tr_mul(x).norm();
        let mut grad = &self.a * x + b - &self.cbar * sol.multiplier;
        if spread > 0.0 {
            grad += (&self.cov * x) * (sol.multiplier * self.kappa / spread);
        }
        let slack = self.slack(x);
        let stationarity = grad.amax();
        let complementarity = (sol.multiplier * slack).abs();
        let infeasibility = (-slack).max(0.0);
        stationarity.max(complementarity).max(infeasibility)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocpSolution {
    pub x_star: DVector<f64>,
    pub f_star: f64,
    pub multiplier: f64,
    pub active: bool,
    pub kkt_residual: f64,
}

/// Exact solution of the Gaussian chance-constrained program via its cone
/// reformulation `κ‖Σ^{1/2}x‖ ≤ c̄ᵀx + d`, `κ = −Φ⁻¹(ρ)`.
pub fn socp_solve(instance: &CcpInstance) -> Result<SocpSolution> {
    let con = instance.constraint();
    let obj = instance.objective();
    let solver = ConeSolver::new(obj.a(), con, con.kappa())?;
    let sol = solver.solve(obj.b())?;
    let kkt_residual = solver.kkt_residual(obj.b(), &sol);
    Ok(SocpSolution {
        f_star: obj.eval(&sol.x)?,
        x_star: sol.x,
        multiplier: sol.multiplier,
        active: sol.active,
        kkt_residual,
    })
}

/// Restricted solution at the empirical mean of `draws` with zero margin.
pub fn empirical_mean_baseline(instance: &CcpInstance, draws: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    check_dim("draws", draws.ncols(), instance.dim())?;
    if draws.nrows() == 0 {
        return Err(Error::InvalidArgument("no draws supplied".into()));
    }
    let hbar = crate::ccp::column_mean(draws);
    let x = solve_restricted(instance, &hbar, 0.0)?.x;
    let f = instance.objective().eval(&x)?;
    Ok((x, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccp::{rng_from_seed, QuadraticObjective, UncertaintySource};
    use rand::Rng;

    /// Closed form for `A = I`, `b = c̄ = 1`: by symmetry `x = −a·1` with
    /// `a(n + κ√n) = d` on the boundary.
    fn symmetric_oracle(n: usize, rho: f64) -> f64 {
        let kappa = -quantile_gaussian(rho).unwrap();
        let nf = n as f64;
        let a = (1.0 / (nf + kappa * nf.sqrt())).min(1.0);
        0.5 * nf * a * a - nf * a
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile_gaussian(0.5).unwrap(), 0.0);
        assert!((quantile_gaussian(0.975).unwrap() - 1.959963984540054).abs() < 1e-6);
        // Reference value from an independent high-precision evaluation.
        assert!((quantile_gaussian(0.1).unwrap() + 1.2815515655446004).abs() < 1e-12);
        for p in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(quantile_gaussian(p).is_err());
        }
    }

    #[test]
    fn quantile_round_trips() {
        let mut rng = rng_from_seed(5);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(1e-10..1.0 - 1e-10);
            let x = quantile_gaussian(p).unwrap();
            assert!((normal_cdf(x) - p).abs() <= 1e-9, "p = {p}");
        }
    }

    #[test]
    fn socp_matches_symmetric_closed_form() {
        for rho in [0.01, 0.05, 0.1, 0.2, 0.3, 0.45] {
            for n in [1, 2, 8, 32] {
                let inst = CcpInstance::linear_benchmark(n, rho, 0).unwrap();
                let sol = socp_solve(&inst).unwrap();
                assert!((sol.f_star - symmetric_oracle(n, rho)).abs() < 1e-12, "n {n} rho {rho}");
                assert!(sol.kkt_residual <= 1e-8);
                assert!(sol.active);
            }
        }
    }

    #[test]
    fn linear_constraint_limit() {
        // κ = 0: x = −1 + λ1 on 1ᵀx + 1 = 0 gives x_i = −1/8.
        let inst = CcpInstance::linear_benchmark(8, 0.1, 0).unwrap();
        let solver = ConeSolver::new(inst.objective().a(), inst.constraint(), 0.0).unwrap();
        let sol = solver.solve(inst.objective().b()).unwrap();
        for v in sol.x.iter() {
            assert!((v + 0.125).abs() < 1e-12);
        }
        let f = inst.objective().eval(&sol.x).unwrap();
        assert!((f + 0.9375).abs() < 1e-12);
    }

    #[test]
    fn inactive_constraint_returns_unconstrained_minimum() {
        let f = QuadraticObjective::identity(DVector::from_element(2, 0.1));
        let con = LinearChanceConstraint::with_identity(DVector::from_element(2, 1.0), 5.0, 0.1).unwrap();
        let src = UncertaintySource::analytic(DVector::from_element(2, 1.0), DMatrix::identity(2, 2), 0).unwrap();
        let inst = CcpInstance::new(f, con, src).unwrap();
        let sol = socp_solve(&inst).unwrap();
        assert!(!sol.active);
        assert_eq!(sol.multiplier, 0.0);
        assert!((sol.x_star[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn empty_cone_is_reported() {
        let f = QuadraticObjective::identity(DVector::from_element(2, 1.0));
        let con = LinearChanceConstraint::with_identity(DVector::from_element(2, 0.1), -1.0, 0.1).unwrap();
        let src = UncertaintySource::analytic(DVector::from_element(2, 0.1), DMatrix::identity(2, 2), 0).unwrap();
        let inst = CcpInstance::new(f, con, src).unwrap();
        assert!(matches!(socp_solve(&inst), Err(Error::InfeasibleInstance(_))));
    }

    #[test]
    fn empirical_mean_examples() {
        let inst = CcpInstance::linear_benchmark(1, 0.1, 0).unwrap();
        let draws = DMatrix::from_element(4, 1, 1.0);
        let (x, f) = empirical_mean_baseline(&inst, &draws).unwrap();
        assert_eq!(x[0], -1.0);
        assert_eq!(f, -0.5);

        let f = QuadraticObjective::identity(DVector::from_element(3, 0.5));
        let con = LinearChanceConstraint::with_identity(DVector::from_element(3, 1.0), 4.0, 0.1).unwrap();
        let src = UncertaintySource::analytic(DVector::from_element(3, 1.0), DMatrix::identity(3, 3), 0).unwrap();
        let inst = CcpInstance::new(f, con, src).unwrap();
        let (x, _) = empirical_mean_baseline(&inst, &inst.uncertainty().draw(100).unwrap()).unwrap();
        assert!(x.iter().all(|v| *v == -0.5));
    }
}
