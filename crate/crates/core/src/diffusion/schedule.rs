use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ccp::rng_from_seed;
use crate::error::{Error, Result};

/// Parameters of a linear noise-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub eta_start: f64,
    pub eta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            eta_start: 1e-4,
            eta_end: 0.02,
        }
    }
}

/// Per-step noise rates `η_t` and cumulative products `ᾱ_t = Π_{i≤t}(1 − η_i)`
/// for `t = 1..=T`, with the convention `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    eta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            steps,
            eta_start,
            eta_end,
        } = spec;
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(eta_start > 0.0 && eta_end < 1.0 && eta_start <= eta_end) {
            return Err(Error::InvalidArgument(format!(
                "noise rates must satisfy 0 < {eta_start} <= {eta_end} < 1"
            )));
        }
        let eta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    eta_start
                } else {
                    eta_start + (eta_end - eta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for e in &eta {
            let prev = *alpha_bar.last().expect("seeded with 1");
            alpha_bar.push(prev * (1.0 - e));
        }
        Ok(Self { spec, eta, alpha_bar })
    }

    pub fn linear(steps: usize, eta_start: f64, eta_end: f64) -> Result<Self> {
        Self::new(ScheduleSpec {
            steps,
            eta_start,
            eta_end,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    /// `η_t` for `1 ≤ t ≤ T`.
    pub fn eta(&self, t: usize) -> f64 {
        self.eta[t - 1]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "time step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε` for a given `ε`.
    pub fn perturb_with(&self, x0: &DVector<f64>, t: usize, eps: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        Ok(x0 * a.sqrt() + eps * (1.0 - a).sqrt())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleSpec::default()).expect("default schedule is valid")
    }
}

/// Samples `x_t ~ N(√ᾱ_t x0, (1 − ᾱ_t)I)`; returns `(x_t, ε)`.
pub fn forward_perturb(
    schedule: &NoiseSchedule,
    x0: &DVector<f64>,
    t: usize,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    schedule.check_t(t)?;
    let mut rng = rng_from_seed(seed);
    let eps = DVector::from_fn(x0.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let xt = schedule.perturb_with(x0, t, &eps)?;
    Ok((xt, eps))
}
