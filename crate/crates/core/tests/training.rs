use ggdopt::ccp::rng_from_seed;
use ggdopt::datagen::{DatasetMeta, FeasibleDataset};
use ggdopt::diffusion::{cond_score, initial_network, train, NetworkConfig, NoiseSchedule, TrainConfig};
use ggdopt::Error;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn dataset(points: DMatrix<f64>, rho: f64) -> FeasibleDataset {
    let (count, n) = points.shape();
    FeasibleDataset {
        points,
        risks: vec![rho; count],
        meta: DatasetMeta {
            n,
            count,
            draws: 0,
            seed: 0,
            fingerprint: String::new(),
            hbar: vec![0.0; n],
            z: vec![0.0; count],
        },
    }
}

fn small_net(dim: usize, width: usize, depth: usize) -> NetworkConfig {
    NetworkConfig {
        width,
        depth,
        ..NetworkConfig::new(dim)
    }
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 32,
        log_every: 0,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn learns_gaussian_score() {
    let mut rng = rng_from_seed(1);
    let pts = DMatrix::from_fn(4000, 1, |_, _| 2.0 + rng.sample::<f64, _>(StandardNormal));
    let ds = dataset(pts, 0.1);
    let schedule = NoiseSchedule::default();
    let cfg = TrainConfig {
        steps: 8000,
        batch_size: 128,
        holdout_fraction: 0.0,
        ..quick(0)
    };
    let (net, _) = train(&ds, small_net(1, 64, 2), &cfg, &schedule).unwrap();

    // Below about a tenth of the horizon the ε-to-score factor 1/√(1-ᾱ)
    // amplifies the network error past this tolerance.
    let t = schedule.steps() / 10;
    let a = schedule.alpha_bar(t);
    let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
    let mse = grid
        .iter()
        .map(|&x| {
            let s = cond_score(&net, &schedule, &DVector::from_element(1, x), t, 0.1, 0.0).unwrap()[0];
            // Diffused N(2, 1) stays unit-variance with mean 2√ᾱ.
            let exact = -(x - 2.0 * a.sqrt());
            (s - exact).powi(2)
        })
        .sum::<f64>()
        / grid.len() as f64;
    assert!(mse <= 0.05, "score MSE {mse}");
}

#[test]
fn learns_point_mass_direction() {
    let point = DVector::from_row_slice(&[3.0, -4.0, 5.0]);
    let pts = DMatrix::from_fn(256, 3, |_, j| point[j]);
    let ds = dataset(pts, 0.2);
    let schedule = NoiseSchedule::default();
    let cfg = TrainConfig {
        steps: 4000,
        holdout_fraction: 0.0,
        ..quick(0)
    };
    let (net, _) = train(&ds, small_net(3, 64, 2), &cfg, &schedule).unwrap();
    let t = schedule.steps();
    let a = schedule.alpha_bar(t);
    let learned = cond_score(&net, &schedule, &DVector::zeros(3), t, 0.2, 0.0).unwrap();
    let exact = &point * (a.sqrt() / (1.0 - a));
    let cosine = learned.dot(&exact) / (learned.norm() * exact.norm());
    assert!(cosine >= 0.9, "cosine {cosine}");
}

fn toy_dataset() -> FeasibleDataset {
    let mut rng = rng_from_seed(2);
    let pts = DMatrix::from_fn(60, 2, |_, _| rng.random_range(-1.0..1.0));
    let mut ds = dataset(pts, 0.0);
    ds.risks = (0..60).map(|i| i as f64 / 120.0).collect();
    ds
}

#[test]
fn training_is_deterministic() {
    let ds = toy_dataset();
    let schedule = NoiseSchedule::default();
    let (a, ra) = train(&ds, small_net(2, 16, 1), &quick(50), &schedule).unwrap();
    let (b, rb) = train(&ds, small_net(2, 16, 1), &quick(50), &schedule).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.holdout_loss_final, rb.holdout_loss_final);
    let (c, _) = train(&ds, small_net(2, 16, 1), &TrainConfig { seed: 6, ..quick(50) }, &schedule).unwrap();
    assert_ne!(a, c);
}

#[test]
fn training_ignores_row_order() {
    let ds = toy_dataset();
    let mut reversed = ds.clone();
    let n = ds.len();
    reversed.points = DMatrix::from_fn(n, 2, |i, j| ds.points[(n - 1 - i, j)]);
    reversed.risks = ds.risks.iter().rev().copied().collect();
    let schedule = NoiseSchedule::default();
    let (a, _) = train(&ds, small_net(2, 16, 1), &quick(40), &schedule).unwrap();
    let (b, _) = train(&reversed, small_net(2, 16, 1), &quick(40), &schedule).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_steps_returns_initialisation() {
    let ds = toy_dataset();
    let schedule = NoiseSchedule::default();
    let (net, report) = train(&ds, small_net(2, 16, 2), &quick(0), &schedule).unwrap();
    assert_eq!(net, initial_network(&ds, small_net(2, 16, 2), &quick(0)).unwrap());
    assert_eq!(report.steps, 0);
}

#[test]
fn divergent_learning_rate_is_reported() {
    let ds = toy_dataset();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        ..quick(200)
    };
    let err = train(&ds, small_net(2, 16, 1), &cfg, &NoiseSchedule::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { lr, .. } if lr == 1e30), "{err}");
}
