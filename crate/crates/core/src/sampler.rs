//! Reverse-time sampling with objective guidance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::ConeSolver;
use crate::ccp::{rng_from_seed, LinearChanceConstraint, QuadraticObjective, SeededRng};
use crate::diffusion::{cond_score_batch, NoisePredictor, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::guidance::{score_space_factor, tweedie_from_score, GuidanceConfig, GuidanceOrder, SecondOrder};

/// Samples are simulated in fixed-size chunks so the result does not depend
/// on the thread count.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Deterministic DDIM update.
    Deterministic,
    /// Stochastic DDPM update.
    Ancestral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: SamplerMode,
    pub guidance: GuidanceConfig,
    pub rho: f64,
    pub batch: usize,
    pub seed: u64,
    /// Scale of the data; a state norm above `1e3·radius` is a divergence.
    pub radius: f64,
    pub record_trajectories: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            mode: SamplerMode::Deterministic,
            guidance: GuidanceConfig::default(),
            rho: 0.1,
            batch: 100,
            seed: 0,
            radius: 1.0,
            record_trajectories: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "sampling steps {} must lie in 1..={}",
                self.steps,
                schedule.steps()
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument("radius must be positive".into()));
        }
        self.guidance.validate()
    }
}

/// Descending grid from `T` to `0` with `steps` intervals.
pub fn time_grid(total: usize, steps: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (0..=steps)
        .rev()
        .map(|k| ((total as f64) * k as f64 / steps as f64).round() as usize)
        .collect();
    grid.dedup();
    grid
}

/// One reverse update of every column of `x` from `ᾱ_t` to `ᾱ_next` given
/// the (guided) score. `noise` is used only in ancestral mode.
pub fn reverse_step(
    x: &DMatrix<f64>,
    score: &DMatrix<f64>,
    alpha_bar_t: f64,
    alpha_bar_next: f64,
    mode: SamplerMode,
    noise: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    match mode {
        SamplerMode::Deterministic => {
            let sd = (1.0 - alpha_bar_t).sqrt();
            let eps = score * -sd;
            let x0 = (x - &eps * sd) / alpha_bar_t.sqrt();
            x0 * alpha_bar_next.sqrt() + eps * (1.0 - alpha_bar_next).sqrt()
        }
        SamplerMode::Ancestral => {
            let beta = 1.0 - alpha_bar_t / alpha_bar_next;
            let mean = (x + score * beta) / (1.0 - beta).sqrt();
            match noise {
                Some(z) => mean + z * beta.sqrt(),
                None => mean,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// State at every grid point, starting from `x_T`.
    pub states: Vec<Vec<f64>>,
    /// `f(μ_{0|t})` at every grid point; the last entry is `f(x₀)`.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub samples: Vec<DVector<f64>>,
    pub trajectories: Vec<Trajectory>,
}

/// Adds `J_t·G` to each column of `score`.
fn add_guidance(
    score: &mut DMatrix<f64>,
    x: &DMatrix<f64>,
    obj: &QuadraticObjective,
    cfg: &GuidanceConfig,
    beta: f64,
    alpha_bar: f64,
) -> Result<()> {
    let jac = score_space_factor(alpha_bar, cfg.prior_var);
    match cfg.order {
        GuidanceOrder::Off => {}
        GuidanceOrder::First => {
            let mut g = obj.a() * x;
            for mut col in g.column_iter_mut() {
                col += obj.b();
            }
            *score -= g * (beta * jac);
        }
        GuidanceOrder::Second => {
            let so = SecondOrder::new(obj, beta, cfg.sigma2_at(alpha_bar))?;
            for j in 0..x.ncols() {
                let xt = x.column(j).into_owned();
                let mut mu = (&xt + score.column(j) * (1.0 - alpha_bar)) / alpha_bar.sqrt();
                if let Some(r) = cfg.mu_clip {
                    let norm = mu.norm();
                    if norm > r {
                        mu *= r / norm;
                    }
                }
                let g = so.apply(&xt, &mu)?;
                let mut col = score.column_mut(j);
                col += g * jac;
            }
        }
    }
    Ok(())
}

fn standard_normal_matrix(n: usize, rngs: &mut [SeededRng]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, rngs.len());
    for (j, rng) in rngs.iter_mut().enumerate() {
        for i in 0..n {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

fn run_chunk<P: NoisePredictor + ?Sized>(
    net: &P,
    schedule: &NoiseSchedule,
    obj: &QuadraticObjective,
    cfg: &SamplerConfig,
    grid: &[usize],
    first: usize,
    count: usize,
) -> Result<(Vec<DVector<f64>>, Vec<Trajectory>)> {
    let n = net.dim();
    let mut rngs: Vec<SeededRng> = (0..count)
        .map(|i| rng_from_seed(cfg.seed.wrapping_add((first + i) as u64)))
        .collect();
    let mut x = standard_normal_matrix(n, &mut rngs);
    let mut trajectories = vec![
        Trajectory {
            states: Vec::new(),
            objective_trace: Vec::new()
        };
        if cfg.record_trajectories { count } else { 0 }
    ];
    let limit = 1e3 * cfg.radius;
    for (step, w) in grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let (a_t, a_next) = (schedule.alpha_bar(t), schedule.alpha_bar(t_next));
        let beta = cfg.guidance.beta_at(t, schedule.steps());
        let mut score = cond_score_batch(net, schedule, &x, t, cfg.rho, cfg.guidance.w);
        for (j, tr) in trajectories.iter_mut().enumerate() {
            let xt = x.column(j).into_owned();
            let mu = tweedie_from_score(&xt, &score.column(j).into_owned(), a_t);
            tr.objective_trace.push(obj.eval(&mu)?);
            tr.states.push(xt.as_slice().to_vec());
        }
        add_guidance(&mut score, &x, obj, &cfg.guidance, beta, a_t)?;
        let noise = (cfg.mode == SamplerMode::Ancestral && t_next > 0).then(|| standard_normal_matrix(n, &mut rngs));
        x = reverse_step(&x, &score, a_t, a_next, cfg.mode, noise.as_ref());
        for (j, col) in x.column_iter().enumerate() {
            let norm = col.norm();
            if !norm.is_finite() || norm > limit {
                return Err(Error::Divergence {
                    step,
                    t,
                    beta,
                    detail: format!("sample {} reached norm {norm:e} (limit {limit:e})", first + j),
                });
            }
        }
    }
    for (j, tr) in trajectories.iter_mut().enumerate() {
        let x0 = x.column(j).into_owned();
        tr.objective_trace.push(obj.eval(&x0)?);
        tr.states.push(x0.as_slice().to_vec());
    }
    let samples = x.column_iter().map(|c| c.into_owned()).collect();
    Ok((samples, trajectories))
}

/// Draws `cfg.batch` samples. Sample `i` is seeded with `cfg.seed + i`.
pub fn sample<P: NoisePredictor + ?Sized>(
    net: &P,
    schedule: &NoiseSchedule,
    obj: &QuadraticObjective,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    cfg.validate(schedule)?;
    check_dim("objective", obj.dim(), net.dim())?;
    if cfg.guidance.order == GuidanceOrder::Second {
        // Surface a non-positive-definite system before any work is done,
        // at the largest variance the run will use.
        let sigma2 = cfg.guidance.sigma2_at(schedule.alpha_bar(schedule.steps()));
        SecondOrder::new(obj, cfg.guidance.beta, sigma2)?;
    }
    let grid = time_grid(schedule.steps(), cfg.steps);
    let starts: Vec<usize> = (0..cfg.batch).step_by(CHUNK).collect();
    let chunks: Vec<_> = starts
        .par_iter()
        .map(|&first| run_chunk(net, schedule, obj, cfg, &grid, first, CHUNK.min(cfg.batch - first)))
        .collect::<Result<_>>()?;
    let mut out = SampleOutput {
        samples: Vec::with_capacity(cfg.batch),
        trajectories: Vec::new(),
    };
    for (s, t) in chunks {
        out.samples.extend(s);
        out.trajectories.extend(t);
    }
    Ok(out)
}

/// Euclidean projection onto the cone `κ‖Lᵀy‖ ≤ c̄ᵀy + d` at the target risk.
#[derive(Debug, Clone)]
pub struct Projector {
    solver: ConeSolver,
}

impl Projector {
    pub fn new(constraint: &LinearChanceConstraint) -> Result<Self> {
        let n = constraint.dim();
        let solver = ConeSolver::new(&DMatrix::identity(n, n), constraint, constraint.kappa())?;
        Ok(Self { solver })
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("x", x.len(), self.solver.dim())?;
        if self.solver.slack(x) >= 0.0 {
            return Ok(x.clone());
        }
        Ok(self.solver.solve(&-x)?.x)
    }
}

pub fn feasibility_repair(x: &DVector<f64>, constraint: &LinearChanceConstraint) -> Result<DVector<f64>> {
    Projector::new(constraint)?.project(x)
}
