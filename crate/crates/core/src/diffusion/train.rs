use std::time::Instant;

use nalgebra::DMatrix;
#[cfg(test)]
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{NetworkConfig, RhoNormalizer, ScoreNetwork};
use super::{NoisePredictor, NoiseSchedule};
use crate::ccp::{rng_from_seed, SeededRng};
use crate::datagen::FeasibleDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the condition by the null token.
    pub p_uncond: f64,
    pub seed: u64,
    /// Fraction of rows held out to monitor generalisation.
    pub holdout_fraction: f64,
    /// Record the running training loss every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 1e-4,
            p_uncond: 0.1,
            seed: 0,
            holdout_fraction: 0.2,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidArgument(format!("p_uncond {} must lie in [0, 1)", self.p_uncond)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One minibatch after forward noising.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    /// `n × B`, one noised sample per column.
    pub xt: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    pub t: Vec<usize>,
    /// `None` where the condition was dropped.
    pub rho: Vec<Option<f64>>,
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and condition dropout for each row.
pub fn draw_noised_batch(
    schedule: &NoiseSchedule,
    x0: &DMatrix<f64>,
    rho: &[f64],
    p_uncond: f64,
    rng: &mut SeededRng,
) -> NoisedBatch {
    let (n, b) = x0.shape();
    let mut xt = DMatrix::zeros(n, b);
    let mut eps = DMatrix::zeros(n, b);
    let mut ts = Vec::with_capacity(b);
    let mut conds = Vec::with_capacity(b);
    for j in 0..b {
        let t = rng.random_range(1..=schedule.steps());
        let a = schedule.alpha_bar(t);
        for i in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            eps[(i, j)] = e;
            xt[(i, j)] = a.sqrt() * x0[(i, j)] + (1.0 - a).sqrt() * e;
        }
        let drop = p_uncond > 0.0 && rng.random::<f64>() < p_uncond;
        ts.push(t);
        conds.push(if drop { None } else { Some(rho[j]) });
    }
    NoisedBatch {
        xt,
        eps,
        t: ts,
        rho: conds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean over the batch of `‖ε̂ − ε‖²`.
    pub loss: f64,
    /// How many rows were presented with the null condition.
    pub null_presented: usize,
}

/// Denoising loss of `net` on the rows of `x0` (one sample per row).
pub fn training_loss<P: NoisePredictor + ?Sized>(
    net: &P,
    schedule: &NoiseSchedule,
    x0: &DMatrix<f64>,
    rho: &[f64],
    p_uncond: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    if x0.nrows() == 0 {
        return Err(Error::InvalidArgument("batch is empty".into()));
    }
    if rho.len() != x0.nrows() {
        return Err(Error::InvalidArgument("one risk level per row is required".into()));
    }
    let mut rng = rng_from_seed(seed);
    let batch = draw_noised_batch(schedule, &x0.transpose(), rho, p_uncond, &mut rng);
    let pred = net.predict_noise(&batch.xt, &batch.t, &batch.rho);
    let loss = (pred - &batch.eps).norm_squared() / x0.nrows() as f64;
    Ok(LossBreakdown {
        loss,
        null_presented: batch.rho.iter().filter(|r| r.is_none()).count(),
    })
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
struct Adam {
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(net: &ScoreNetwork, lr: f64) -> Self {
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Self {
            lr: lr as f32,
            step: 0,
            m: shapes.iter().map(|&l| vec![0.0; l]).collect(),
            v: shapes.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    fn update(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub holdout_loss_initial: Option<f64>,
    pub holdout_loss_final: Option<f64>,
    /// `(step, mean training loss since the previous entry)`.
    pub loss_trace: Vec<(usize, f64)>,
    pub seconds: f64,
}

impl TrainReport {
    /// Relative reduction of the held-out loss, when a holdout exists.
    pub fn holdout_reduction(&self) -> Option<f64> {
        match (self.holdout_loss_initial, self.holdout_loss_final) {
            (Some(a), Some(b)) if a > 0.0 => Some(1.0 - b / a),
            _ => None,
        }
    }
}

/// Row permutation that depends only on the row contents and `seed`.
fn canonical_shuffle(dataset: &FeasibleDataset, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let key = |i: usize| {
        let mut k: Vec<f64> = dataset.points.row(i).iter().copied().collect();
        k.push(dataset.risks[i]);
        k
    };
    order.sort_by(|&a, &b| {
        key(a)
            .iter()
            .zip(key(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.shuffle(rng);
    order
}

const HOLDOUT_REPEATS: usize = 4;

fn holdout_loss(net: &ScoreNetwork, batch: &NoisedBatch) -> f64 {
    let pred = net.predict_noise(&batch.xt, &batch.t, &batch.rho);
    (pred - &batch.eps).norm_squared() / batch.xt.ncols() as f64
}

/// Trains a fresh network on `dataset`. Rows are put in a canonical order
/// and then shuffled by `config.seed`, so the result does not depend on the
/// order rows were stored in.
pub fn train(
    dataset: &FeasibleDataset,
    net_config: NetworkConfig,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(ScoreNetwork, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if net_config.dim != dataset.dim() {
        return Err(Error::InvalidArgument(format!(
            "network dimension {} does not match dataset dimension {}",
            net_config.dim,
            dataset.dim()
        )));
    }
    let start = Instant::now();
    let mut rng = rng_from_seed(config.seed);
    let init_seed: u64 = rng.random();
    let normalizer = RhoNormalizer::from_risks(&dataset.risks);
    let mut net = ScoreNetwork::init(net_config, normalizer, init_seed)?;

    let order = canonical_shuffle(dataset, &mut rng);
    let holdout_len = if dataset.len() >= 5 {
        (dataset.len() as f64 * config.holdout_fraction).floor() as usize
    } else {
        0
    };
    let (train_idx, hold_idx) = order.split_at(order.len() - holdout_len);

    let holdout = (!hold_idx.is_empty()).then(|| {
        let reps: Vec<usize> = hold_idx.iter().cycle().take(hold_idx.len() * HOLDOUT_REPEATS).copied().collect();
        let x0 = DMatrix::from_fn(dataset.dim(), reps.len(), |i, j| dataset.points[(reps[j], i)]);
        let rho: Vec<f64> = reps.iter().map(|&r| dataset.risks[r]).collect();
        let mut hold_rng = rng_from_seed(config.seed ^ 0x005E_ED0F_401D);
        draw_noised_batch(schedule, &x0, &rho, 0.0, &mut hold_rng)
    });
    let holdout_loss_initial = holdout.as_ref().map(|b| holdout_loss(&net, b));

    let n = dataset.dim();
    let bs = config.batch_size;
    let mut adam = Adam::new(&net, config.learning_rate);
    let mut grads = net.zero_gradients();
    let mut x0 = DMatrix::zeros(n, bs);
    let mut rho = vec![0.0; bs];
    let mut loss_trace = Vec::new();
    let mut running = 0.0;
    let mut running_count = 0;

    for step in 0..config.steps {
        for j in 0..bs {
            let row = train_idx[rng.random_range(0..train_idx.len())];
            for i in 0..n {
                x0[(i, j)] = dataset.points[(row, i)];
            }
            rho[j] = dataset.risks[row];
        }
        let batch = draw_noised_batch(schedule, &x0, &rho, config.p_uncond, &mut rng);
        let xt = batch.xt.map(|v| v as f32);
        let eps = batch.eps.map(|v| v as f32);
        let input = net.assemble_input(&xt, &batch.t, &batch.rho);
        let (out, cache) = net.forward(input);
        let diff = out - eps;
        let loss = diff.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / bs as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr: config.learning_rate,
            });
        }
        running += loss;
        running_count += 1;
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            loss_trace.push((step + 1, running / running_count as f64));
            running = 0.0;
            running_count = 0;
        }

        let d_out = diff * (2.0 / bs as f32);
        let nulls: Vec<bool> = batch.rho.iter().map(Option::is_none).collect();
        for s in grads_mut(&mut grads) {
            s.fill(0.0);
        }
        net.backward(&cache, &d_out, &nulls, &mut grads);
        adam.update(net.param_slices_mut(), grads.slices());
    }

    let holdout_loss_final = holdout.as_ref().map(|b| holdout_loss(&net, b));
    let report = TrainReport {
        steps: config.steps,
        train_rows: train_idx.len(),
        holdout_rows: hold_idx.len(),
        holdout_loss_initial,
        holdout_loss_final,
        loss_trace,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((net, report))
}

fn grads_mut(g: &mut super::Gradients) -> Vec<&mut [f32]> {
    let mut out = Vec::with_capacity(2 * g.layers.len() + 1);
    for l in &mut g.layers {
        out.push(l.w.as_mut_slice());
        out.push(l.b.as_mut_slice());
    }
    out.push(g.null_token.as_mut_slice());
    out
}

/// Initial network `train` would start from with this configuration.
pub fn initial_network(dataset: &FeasibleDataset, net_config: NetworkConfig, config: &TrainConfig) -> Result<ScoreNetwork> {
    let mut rng = rng_from_seed(config.seed);
    let init_seed: u64 = rng.random();
    ScoreNetwork::init(net_config, RhoNormalizer::from_risks(&dataset.risks), init_seed)
}
