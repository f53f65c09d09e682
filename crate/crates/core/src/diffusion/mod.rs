//! Forward noising, the conditional noise-prediction network and its training.

mod checkpoint;
mod network;
mod schedule;
mod train;

use nalgebra::{DMatrix, DVector};

pub use network::{Gradients, NetworkConfig, RhoNormalizer, ScoreNetwork};
pub use schedule::{forward_perturb, NoiseSchedule, ScheduleSpec};
pub use train::{
    draw_noised_batch, initial_network, train, training_loss, LossBreakdown, NoisedBatch, TrainConfig, TrainReport,
};

/// Anything that predicts the noise `ε` added to a clean sample.
///
/// Columns of `x` are independent samples; `t[j]` and `rho[j]` condition
/// column `j`, with `None` selecting the unconditional (null) branch.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;

    fn predict_noise(&self, x: &DMatrix<f64>, t: &[usize], rho: &[Option<f64>]) -> DMatrix<f64>;
}

/// `s = −ε̂ / √(1 − ᾱ_t)`.
pub fn score_from_noise(eps: f64, alpha_bar: f64) -> f64 {
    -eps / (1.0 - alpha_bar).sqrt()
}

/// `ε̂ = −√(1 − ᾱ_t)·s`.
pub fn noise_from_score(score: f64, alpha_bar: f64) -> f64 {
    -(1.0 - alpha_bar).sqrt() * score
}

/// Classifier-free combination `(1 + w)·s(x, t, ρ) − w·s(x, t, ∅)` for every
/// column of `x`. The unconditional pass is skipped when `w = 0`.
pub fn cond_score_batch<P: NoisePredictor + ?Sized>(
    net: &P,
    schedule: &NoiseSchedule,
    x: &DMatrix<f64>,
    t: usize,
    rho: f64,
    w: f64,
) -> DMatrix<f64> {
    let cols = x.ncols();
    let ts = vec![t; cols];
    let a = schedule.alpha_bar(t);
    let cond = net
        .predict_noise(x, &ts, &vec![Some(rho); cols])
        .map(|e| score_from_noise(e, a));
    if w == 0.0 {
        return cond;
    }
    let uncond = net
        .predict_noise(x, &ts, &vec![None; cols])
        .map(|e| score_from_noise(e, a));
    cond * (1.0 + w) - uncond * w
}

pub fn cond_score<P: NoisePredictor + ?Sized>(
    net: &P,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
    rho: f64,
    w: f64,
) -> crate::Result<DVector<f64>> {
    crate::error::check_dim("x", x.len(), net.dim())?;
    if t == 0 || t > schedule.steps() {
        return Err(crate::Error::InvalidArgument(format!("time step {t} out of range")));
    }
    let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    Ok(cond_score_batch(net, schedule, &m, t, rho, w).column(0).into_owned())
}

/// Exact noise predictor for isotropic Gaussian data `N(mean, var·I)`,
/// ignoring the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianData {
    pub mean: DVector<f64>,
    pub var: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianData {
    /// Score of the diffused law `N(√ᾱ m, (ᾱv + 1 − ᾱ)I)`.
    pub fn score(&self, x: &DVector<f64>, alpha_bar: f64) -> DVector<f64> {
        let denom = alpha_bar * self.var + 1.0 - alpha_bar;
        -(x - &self.mean * alpha_bar.sqrt()) / denom
    }
}

impl NoisePredictor for GaussianData {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_noise(&self, x: &DMatrix<f64>, t: &[usize], _rho: &[Option<f64>]) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let a = self.schedule.alpha_bar(t[j]);
            let scale = (1.0 - a).sqrt() / (a * self.var + 1.0 - a);
            for (i, v) in col.iter_mut().enumerate() {
                *v = scale * (*v - a.sqrt() * self.mean[i]);
            }
        }
        out
    }
}

/// Exact noise predictor for a point mass at `point`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub point: DVector<f64>,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for PointMass {
    fn dim(&self) -> usize {
        self.point.len()
    }

    fn predict_noise(&self, x: &DMatrix<f64>, t: &[usize], _rho: &[Option<f64>]) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let a = self.schedule.alpha_bar(t[j]);
            for (i, v) in col.iter_mut().enumerate() {
                *v = (*v - a.sqrt() * self.point[i]) / (1.0 - a).sqrt();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns fixed outputs for the conditional and null branches.
    struct TwoBranch {
        cond: f64,
        uncond: f64,
    }

    impl NoisePredictor for TwoBranch {
        fn dim(&self) -> usize {
            2
        }

        fn predict_noise(&self, x: &DMatrix<f64>, _t: &[usize], rho: &[Option<f64>]) -> DMatrix<f64> {
            DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
                let base = if rho[j].is_some() { self.cond } else { self.uncond };
                base + i as f64
            })
        }
    }

    #[test]
    fn guidance_weight_endpoints() {
        let s = NoiseSchedule::default();
        let net = TwoBranch { cond: 0.3, uncond: -1.7 };
        let x = DVector::zeros(2);
        let a = s.alpha_bar(400);
        let cond = cond_score(&net, &s, &x, 400, 0.1, 0.0).unwrap();
        assert_eq!(cond[0], score_from_noise(0.3, a));
        let uncond = cond_score(&net, &s, &x, 400, 0.1, -1.0).unwrap();
        assert_eq!(uncond[1], score_from_noise(-0.7, a));

        let same = TwoBranch { cond: 0.4, uncond: 0.4 };
        let base = cond_score(&same, &s, &x, 10, 0.1, 0.0).unwrap();
        for w in [-3.0, 0.5, 2.0, 7.0] {
            let guided = cond_score(&same, &s, &x, 10, 0.1, w).unwrap();
            assert!((guided - &base).amax() <= 1e-14 * base.amax() * (1.0 + 2.0 * f64::abs(w)));
        }
        assert!(cond_score(&same, &s, &x, 0, 0.1, 0.0).is_err());
    }

    #[test]
    fn score_noise_round_trip_within_an_ulp() {
        let s = NoiseSchedule::default();
        for t in [1, 2, 10, 333, 999, 1000] {
            let a = s.alpha_bar(t);
            for e in [-3.2f64, -1e-3, 0.0, 0.7, 2.5] {
                let e32 = e as f32 as f64;
                let back = noise_from_score(score_from_noise(e32, a), a);
                assert!((back - e32).abs() <= e32.abs() * f64::EPSILON, "t {t} e {e}");
            }
        }
    }

    #[test]
    fn analytic_predictors_match_scores() {
        let s = NoiseSchedule::default();
        let g = GaussianData {
            mean: DVector::from_row_slice(&[2.0, -1.0]),
            var: 0.5,
            schedule: s.clone(),
        };
        let x = DVector::from_row_slice(&[0.3, 0.9]);
        let a = s.alpha_bar(250);
        let via_eps = cond_score(&g, &s, &x, 250, 0.0, 0.0).unwrap();
        let direct = g.score(&x, a);
        assert!((via_eps - direct).amax() < 1e-12);

        let p = PointMass {
            point: DVector::from_row_slice(&[1.0, 2.0]),
            schedule: s.clone(),
        };
        let sc = cond_score(&p, &s, &x, 250, 0.0, 0.0).unwrap();
        let expected = -(x - &p.point * a.sqrt()) / (1.0 - a);
        assert!((sc - expected).amax() < 1e-12);
    }
}
