//! Objective-gradient guidance terms added to the learned score.
//!
//! Both closed forms return `G`, the gradient of `log E[e^{−βf(x₀)} | x_t]`
//! taken with respect to the posterior mean `μ_{0|t}`. The reverse process
//! needs the gradient with respect to `x_t`, which carries the extra factor
//! `∂μ_{0|t}/∂x_t`; [`score_space_factor`] supplies it under a Gaussian prior
//! of per-coordinate variance `prior_var`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ccp::QuadraticObjective;
use crate::diffusion::{cond_score, NoisePredictor, NoiseSchedule};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceOrder {
    Off,
    First,
    Second,
}

/// How the inverse temperature evolves over the reverse process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BetaSchedule {
    Constant,
    /// Linear in `t` from `start·β` at `t = T` to `β` at `t = 0`.
    Linear { start: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub order: GuidanceOrder,
    pub beta: f64,
    pub sigma2: f64,
    /// Classifier-free guidance weight.
    pub w: f64,
    /// Prior variance used for `∂μ_{0|t}/∂x_t`.
    pub prior_var: f64,
    /// Caps `‖μ_{0|t}‖` fed to second-order guidance.
    pub mu_clip: Option<f64>,
    pub beta_schedule: BetaSchedule,
    /// Replace `sigma2` by the posterior variance of `x₀ | x_t` under the
    /// Gaussian prior, `v(1 − ᾱ)/(ᾱv + 1 − ᾱ)`.
    #[serde(default)]
    pub posterior_sigma2: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            order: GuidanceOrder::First,
            beta: 1.0,
            sigma2: 0.1,
            w: 0.0,
            prior_var: 1.0,
            mu_clip: None,
            beta_schedule: BetaSchedule::Constant,
            posterior_sigma2: false,
        }
    }
}

impl GuidanceConfig {
    pub fn off() -> Self {
        Self {
            order: GuidanceOrder::Off,
            ..Self::default()
        }
    }

    pub fn first(beta: f64) -> Self {
        Self {
            order: GuidanceOrder::First,
            beta,
            ..Self::default()
        }
    }

    pub fn second(beta: f64, sigma2: f64) -> Self {
        Self {
            order: GuidanceOrder::Second,
            beta,
            sigma2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != GuidanceOrder::Off && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta = {} must be positive", self.beta)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        if !(self.prior_var > 0.0) {
            return Err(Error::InvalidArgument("prior variance must be positive".into()));
        }
        if let Some(r) = self.mu_clip {
            if !(r > 0.0) {
                return Err(Error::InvalidArgument("mu clip radius must be positive".into()));
            }
        }
        if let BetaSchedule::Linear { start } = self.beta_schedule {
            if !(start >= 0.0) {
                return Err(Error::InvalidArgument("beta ramp start must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Second-order variance used at noise level `alpha_bar`.
    pub fn sigma2_at(&self, alpha_bar: f64) -> f64 {
        if self.posterior_sigma2 {
            let v = self.prior_var;
            v * (1.0 - alpha_bar) / (alpha_bar * v + 1.0 - alpha_bar)
        } else {
            self.sigma2
        }
    }

    /// Inverse temperature used at step `t` of a `steps`-step process.
    pub fn beta_at(&self, t: usize, steps: usize) -> f64 {
        match self.beta_schedule {
            BetaSchedule::Constant => self.beta,
            BetaSchedule::Linear { start } => {
                let frac = t as f64 / steps as f64;
                self.beta * (start * frac + (1.0 - frac))
            }
        }
    }
}

/// `G = −β∇f(x_t)`.
pub fn first_order_guidance(obj: &QuadraticObjective, x_t: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta = {beta} must be non-negative")));
    }
    Ok(obj.grad(x_t)? * -beta)
}

/// Tweedie's estimate `μ_{0|t} = (x_t + (1 − ᾱ_t)s)/√ᾱ_t` from a score.
pub fn tweedie_from_score(x_t: &DVector<f64>, score: &DVector<f64>, alpha_bar: f64) -> DVector<f64> {
    (x_t + score * (1.0 - alpha_bar)) / alpha_bar.sqrt()
}

pub fn tweedie_posterior_mean<P: NoisePredictor + ?Sized>(
    net: &P,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
    rho: f64,
    w: f64,
) -> Result<DVector<f64>> {
    let s = cond_score(net, schedule, x_t, t, rho, w)?;
    Ok(tweedie_from_score(x_t, &s, schedule.alpha_bar(t)))
}

/// `∂μ_{0|t}/∂x_t = √ᾱ v/(ᾱ v + 1 − ᾱ)` for data with variance `v`.
pub fn score_space_factor(alpha_bar: f64, prior_var: f64) -> f64 {
    alpha_bar.sqrt() * prior_var / (alpha_bar * prior_var + 1.0 - alpha_bar)
}

/// Second-order guidance with `H = ∇²f + I/(βσ²)` factored once. For a
/// quadratic objective `H` does not depend on the expansion point.
#[derive(Debug, Clone)]
pub struct SecondOrder<'a> {
    obj: &'a QuadraticObjective,
    beta: f64,
    sigma2: f64,
    h: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> SecondOrder<'a> {
    pub fn new(obj: &'a QuadraticObjective, beta: f64, sigma2: f64) -> Result<Self> {
        if !(beta > 0.0 && sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta = {beta} and sigma2 = {sigma2} must be positive"
            )));
        }
        let n = obj.dim();
        let shift = 1.0 / (beta * sigma2);
        let h = obj.a() + DMatrix::identity(n, n) * shift;
        let chol = Cholesky::new(h.clone()).ok_or_else(|| {
            let min = SymmetricEigen::new(obj.a().clone()).eigenvalues.min();
            Error::Singular(format!(
                "H = ∇²f + I/(βσ²) is not positive definite: smallest Hessian eigenvalue {min:e} <= -1/(beta*sigma2) = {:e}",
                -shift
            ))
        })?;
        Ok(Self {
            obj,
            beta,
            sigma2,
            h,
            chol,
        })
    }

    /// `−(1/σ²)[H⁻¹((−∇²f x_t + ∇f(x_t)) − μ/(βσ²)) + μ]`.
    pub fn apply(&self, x_t: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("mu", mu.len(), self.obj.dim())?;
        let hess = self.obj.hess(x_t)?;
        let rhs = -(&hess * x_t) + self.obj.grad(x_t)? - mu / (self.beta * self.sigma2);
        let y = self.chol.solve(&rhs);
        let residual = (&self.h * &y - &rhs).amax();
        if residual > 1e-10 * rhs.amax().max(1.0) {
            return Err(Error::Numerical(format!(
                "second-order solve residual {residual:e} exceeds tolerance"
            )));
        }
        Ok((y + mu) * (-1.0 / self.sigma2))
    }
}

pub fn second_order_guidance(
    obj: &QuadraticObjective,
    x_t: &DVector<f64>,
    beta: f64,
    sigma2: f64,
    mu: &DVector<f64>,
) -> Result<DVector<f64>> {
    SecondOrder::new(obj, beta, sigma2)?.apply(x_t, mu)
}
