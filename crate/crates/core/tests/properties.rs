use ggdopt::baselines::{empirical_mean_baseline, normal_cdf, socp_solve};
use ggdopt::ccp::{column_mean, rng_from_seed, CcpInstance, LinearChanceConstraint, QuadraticObjective, UncertaintySource};
use ggdopt::datagen::{
    empirical_rho, generate_dataset, linear_chebyshev_bound, quadform_probability_gaussian, quadform_probability_mc,
    RestrictedSolver, RestrictionGrid,
};
use ggdopt::diffusion::{GaussianData, NoiseSchedule};
use ggdopt::guidance::GuidanceConfig;
use ggdopt::sampler::{sample, Projector, SamplerConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn spd(rng: &mut impl Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt());
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

/// A random strictly convex instance with `d > 0`, so the origin is feasible.
fn random_instance(seed: u64, n: usize, rho: f64) -> CcpInstance {
    let mut rng = rng_from_seed(seed);
    let a = spd(&mut rng, n, 0.5);
    let b = gaussian_vec(&mut rng, n, 1.0);
    let cbar = gaussian_vec(&mut rng, n, 1.0);
    let cov = spd(&mut rng, n, 0.1) * 0.5;
    let d = rng.random_range(0.2..2.0);
    let constraint = LinearChanceConstraint::new(cbar.clone(), d, rho, cov.clone()).unwrap();
    let uncertainty = UncertaintySource::analytic(cbar, cov, seed).unwrap();
    CcpInstance::new(QuadraticObjective::new(a, b, 0.3).unwrap(), constraint, uncertainty).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(100) })]

    #[test]
    fn derivatives_match_finite_differences(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = rng_from_seed(seed);
        let a = spd(&mut rng, n, 0.1);
        let obj = QuadraticObjective::new(a, gaussian_vec(&mut rng, n, 1.0), rng.random_range(-1.0..1.0)).unwrap();
        let x = gaussian_vec(&mut rng, n, 1.0);
        let g = obj.grad(&x).unwrap();
        let h = obj.hess(&x).unwrap();
        let step = 1e-4;
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = step;
            let fd = (obj.eval(&(&x + &e)).unwrap() - obj.eval(&(&x - &e)).unwrap()) / (2.0 * step);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "grad {i}: {fd} vs {}", g[i]);
            let fd_col = (obj.grad(&(&x + &e)).unwrap() - obj.grad(&(&x - &e)).unwrap()) / (2.0 * step);
            for j in 0..n {
                prop_assert!((fd_col[j] - h[(j, i)]).abs() <= 1e-5 * h[(j, i)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn restricted_solution_satisfies_kkt(seed in any::<u64>(), n in 1usize..10, z in 0.0..2.0f64) {
        let inst = random_instance(seed, n, 0.1);
        let mut rng = rng_from_seed(seed ^ 1);
        let hbar = gaussian_vec(&mut rng, n, 1.0);
        let solver = RestrictedSolver::new(&inst, &hbar).unwrap();
        let sol = solver.solve(z).unwrap();
        let (stationarity, complementarity) = solver.kkt_residuals(&sol, z);
        prop_assert!(sol.multiplier >= 0.0);
        prop_assert!(stationarity <= 1e-10, "stationarity {stationarity}");
        prop_assert!(complementarity <= 1e-10, "complementarity {complementarity}");
        prop_assert!(hbar.dot(&sol.x) + inst.constraint().d() >= z - 1e-10);
    }

    #[test]
    fn cone_solution_is_optimal_and_feasible(seed in any::<u64>(), k in 0usize..4, rho in 0.02..0.4f64) {
        let n = [2, 4, 8, 16][k];
        let inst = random_instance(seed, n, rho);
        let sol = socp_solve(&inst).unwrap();
        prop_assert!(sol.kkt_residual <= 1e-8, "KKT residual {}", sol.kkt_residual);
        let p = inst.constraint().analytic_feasibility(&sol.x_star).unwrap();
        prop_assert!(p >= 1.0 - rho - 1e-9, "feasibility {p}");

        // No feasible point beats the optimum.
        let projector = Projector::new(inst.constraint()).unwrap();
        let mut rng = rng_from_seed(seed ^ 2);
        let scale = 2.0 * sol.x_star.norm().max(1.0);
        for _ in 0..1000 {
            let y = projector.project(&gaussian_vec(&mut rng, n, scale)).unwrap();
            prop_assert!(inst.objective().eval(&y).unwrap() >= sol.f_star - 1e-9);
        }

        let looser = socp_solve(&inst.with_rho((rho + 0.05).min(0.49)).unwrap()).unwrap();
        prop_assert!(looser.f_star <= sol.f_star + 1e-12);
    }
}

#[test]
fn benchmark_optimum_decreases_with_risk() {
    let values: Vec<f64> = [0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4]
        .iter()
        .map(|&rho| socp_solve(&CcpInstance::linear_benchmark(8, rho, 0).unwrap()).unwrap().f_star)
        .collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0]), "{values:?}");
}

#[test]
fn monte_carlo_feasibility_matches_closed_form() {
    let inst = CcpInstance::linear_benchmark(8, 0.1, 3).unwrap();
    let draws = inst.uncertainty().draw_seeded(1_000_000, 11).unwrap();
    let mut rng = rng_from_seed(4);
    for _ in 0..20 {
        let x = gaussian_vec(&mut rng, 8, 0.2);
        let exact = inst.constraint().analytic_feasibility(&x).unwrap();
        let mc = 1.0 - empirical_rho(&inst, &x, &draws).unwrap();
        assert!((mc - exact).abs() <= 0.005, "x {x}: MC {mc} vs {exact}");
    }
}

#[test]
fn cone_point_is_feasible_under_sampling() {
    let inst = CcpInstance::linear_benchmark(8, 0.1, 0).unwrap();
    let x = socp_solve(&inst).unwrap().x_star;
    let exact = normal_cdf((inst.constraint().cbar().dot(&x) + inst.constraint().d()) / x.norm());
    assert!(exact >= 0.9 - 1e-9, "{exact}");
}

fn benchmark_generation(seed: u64) -> (CcpInstance, ggdopt::datagen::FeasibleDataset) {
    let inst = CcpInstance::linear_benchmark(8, 0.1, seed).unwrap();
    let grid = RestrictionGrid::linspace(0.0, 0.5, 1000).unwrap();
    let ds = generate_dataset(&inst, &grid, 1000, seed).unwrap().dataset;
    (inst, ds)
}

#[test]
fn objective_and_feasibility_grow_along_the_grid() {
    let (inst, ds) = benchmark_generation(0);
    let mut last_f = f64::NEG_INFINITY;
    let mut last_p = f64::NEG_INFINITY;
    for i in 0..ds.len() {
        let x = ds.point(i);
        let f = inst.objective().eval(&x).unwrap();
        let p = inst.constraint().analytic_feasibility(&x).unwrap();
        assert!(f >= last_f - 1e-12, "objective drops at {i}");
        assert!(p >= last_p - 1e-12, "feasibility drops at {i}");
        last_f = f;
        last_p = p;
    }
}

#[test]
fn dataset_risks_are_reliable() {
    let (inst, ds) = benchmark_generation(0);
    let fresh_count = 10 * ds.meta.draws;
    let fresh = inst.uncertainty().draw_seeded(fresh_count, 0xfeed).unwrap();
    let reliable = (0..ds.len())
        .filter(|&i| {
            let rho = ds.risks[i];
            let again = empirical_rho(&inst, &ds.point(i), &fresh).unwrap();
            again <= rho + 3.0 * (rho * (1.0 - rho) / fresh_count as f64).sqrt()
        })
        .count();
    let fraction = reliable as f64 / ds.len() as f64;
    println!("reliable fraction {fraction:.3}");
    assert!(fraction >= 0.99, "reliable fraction {fraction}");
}

/// Chebyshev bound against 10⁶-draw frequencies; the second instance has
/// small enough noise for the bound to be informative.
#[test]
fn chebyshev_bound_is_conservative() {
    let tight = {
        let n = 2;
        let ones = DVector::from_element(n, 1.0);
        let cov = DMatrix::identity(n, n) * 0.01;
        CcpInstance::new(
            QuadraticObjective::identity(ones.clone()),
            LinearChanceConstraint::new(ones.clone(), 1.0, 0.1, cov.clone()).unwrap(),
            UncertaintySource::analytic(ones, cov, 0).unwrap(),
        )
        .unwrap()
    };
    for inst in [CcpInstance::linear_benchmark(8, 0.1, 0).unwrap(), tight] {
        let grid = RestrictionGrid::linspace(0.0, 0.5, 50).unwrap();
        let ds = generate_dataset(&inst, &grid, 1000, 1).unwrap().dataset;
        let hbar = DVector::from_vec(ds.meta.hbar.clone());
        let draws = inst.uncertainty().draw_seeded(1_000_000, 2).unwrap();
        let mut informative = 0;
        for i in 0..ds.len() {
            let x = ds.point(i);
            let bound = linear_chebyshev_bound(&inst, &hbar, &x, ds.meta.z[i]).unwrap();
            let mc = 1.0 - empirical_rho(&inst, &x, &draws).unwrap();
            assert!(bound <= mc, "z {}: bound {bound} exceeds {mc}", ds.meta.z[i]);
            informative += usize::from(bound > 0.0);
        }
        if inst.dim() == 2 {
            assert!(informative > 0);
        }
    }
}

#[test]
fn quadform_normal_approximation_in_high_dimension() {
    let n = 100;
    let mut rng = rng_from_seed(8);
    for _ in 0..3 {
        let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));
        let r = gaussian_vec(&mut rng, n, 0.5);
        let s = rng.random_range(-3.0..3.0);
        let approx = quadform_probability_gaussian(&q, &r, s).unwrap();
        let mc = quadform_probability_mc(&q, &r, s, 1_000_000, 9).unwrap();
        assert!((approx - mc).abs() <= 0.02, "approx {approx} vs MC {mc}");
    }
}

#[test]
fn empirical_mean_restriction_is_less_feasible_than_cone() {
    for seed in 0..10 {
        let inst = CcpInstance::linear_benchmark(8, 0.1, seed).unwrap();
        let draws = inst.uncertainty().draw_seeded(1000, seed).unwrap();
        assert_eq!(column_mean(&draws).len(), 8);
        let (x_mean, _) = empirical_mean_baseline(&inst, &draws).unwrap();
        let x_cone = socp_solve(&inst).unwrap().x_star;
        let con = inst.constraint();
        assert!(con.analytic_feasibility(&x_mean).unwrap() <= con.analytic_feasibility(&x_cone).unwrap());
    }
}

/// Data `N(m, v)` tilted by `e^{−βf}` with `f = ½ax² + bx` is Gaussian with
/// precision `1/v + βa`. Second-order guidance with the posterior variance
/// reproduces its diffused score exactly.
#[test]
fn guided_sampling_reaches_product_mean() {
    let sched = NoiseSchedule::default();
    let (m0, v0) = (5.0, 0.5);
    let (a, b) = (1.0, -1.0);
    let net = GaussianData {
        mean: DVector::from_element(1, m0),
        var: v0,
        schedule: sched.clone(),
    };
    let obj = QuadraticObjective::new(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), 0.0).unwrap();
    for beta in [0.1, 1.0, 3.0] {
        let target = (m0 / v0 - beta * b) / (1.0 / v0 + beta * a);
        let guidance = GuidanceConfig {
            prior_var: v0,
            posterior_sigma2: true,
            ..GuidanceConfig::second(beta, 0.1)
        };
        let cfg = SamplerConfig {
            batch: 1000,
            guidance,
            radius: 10.0,
            seed: 21,
            ..SamplerConfig::default()
        };
        let out = sample(&net, &sched, &obj, &cfg).unwrap();
        let mean = out.samples.iter().map(|x| x[0]).sum::<f64>() / 1000.0;
        assert!((mean - target).abs() <= 0.02 * target.abs(), "beta {beta}: mean {mean} vs {target}");
    }
}
