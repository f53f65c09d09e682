//! Experiment configuration and the generate → train → sample → evaluate
//! pipeline. Stages exchange data only through files in the output directory.

mod plot;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{empirical_mean_baseline, socp_solve};
use crate::ccp::CcpInstance;
use crate::datagen::{csv_to_file, generate_dataset, sidecar_path, FeasibleDataset, RestrictionGrid, SkippedPoint};
use crate::diffusion::{train, NetworkConfig, NoiseSchedule, ScheduleSpec, ScoreNetwork, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::sampler::{sample, time_grid, SamplerConfig};

pub use plot::emit_plot_data;
pub use report::{compute_report, mean_std, quantile_sorted, quartiles, write_reports, SampleReport, REPORT_HEADERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub generate: bool,
    pub train: bool,
    pub sample: bool,
    pub evaluate: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            generate: true,
            train: true,
            sample: true,
            evaluate: true,
        }
    }
}

/// Margins `z` of the restricted problems, evenly spaced over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 0.5,
            count: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Instance file; `None` selects the linear benchmark of `benchmark_dim`.
    pub instance: Option<PathBuf>,
    pub benchmark_dim: usize,
    /// Overrides the instance risk level.
    pub rho: Option<f64>,
    pub stages: Stages,
    /// Artifact paths; relative defaults live under `output_dir`.
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub grid: GridConfig,
    /// Draws used to form the empirical mean and label risks.
    pub draws: usize,
    pub width: usize,
    pub depth: usize,
    pub schedule: ScheduleSpec,
    /// `seed` is replaced by one derived from the global seed.
    pub train: TrainConfig,
    /// `seed`, `batch`, `rho` and `radius` are filled in by the pipeline.
    pub sampler: SamplerConfig,
    /// Data variance for the guidance factor; `None` estimates it from the
    /// dataset and replaces `sampler.guidance.prior_var`.
    pub prior_var: Option<f64>,
    /// Independent sampling repeats `R`.
    pub repeats: usize,
    /// Fresh draws used to estimate feasibility.
    pub l_eval: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            instance: None,
            benchmark_dim: 8,
            rho: None,
            stages: Stages::default(),
            dataset: None,
            checkpoint: None,
            samples: None,
            grid: GridConfig::default(),
            draws: 1000,
            width: 256,
            depth: 4,
            schedule: ScheduleSpec::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            prior_var: None,
            repeats: 100,
            l_eval: 100_000,
            output_dir: PathBuf::from("ggdopt-out"),
            seed: 0,
        }
    }
}

/// Stage tags mixed into the global seed.
#[derive(Debug, Clone, Copy)]
enum SeedStream {
    Instance = 1,
    Generate = 2,
    Train = 3,
    Sample = 4,
    Evaluate = 5,
}

fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    // SplitMix64 finaliser.
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.output_dir.join("dataset.csv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.ckpt"))
    }

    pub fn samples_path(&self) -> PathBuf {
        self.samples.clone().unwrap_or_else(|| self.output_dir.join("samples.csv"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeat count must be at least 1".into()));
        }
        if self.l_eval == 0 || self.draws == 0 {
            return Err(Error::Config("draw counts must be positive".into()));
        }
        let needs = [
            (self.stages.train && !self.stages.generate, self.dataset_path(), "dataset"),
            (self.stages.sample && !self.stages.train, self.checkpoint_path(), "checkpoint"),
            (self.stages.sample && !self.stages.generate, self.dataset_path(), "dataset"),
            (self.stages.evaluate && !self.stages.sample, self.samples_path(), "samples"),
        ];
        for (required, path, what) in needs {
            if required && !path.exists() {
                return Err(Error::Config(format!("{what} file {} does not exist", path.display())));
            }
        }
        if let Some(p) = &self.instance {
            if !p.exists() {
                return Err(Error::Config(format!("instance file {} does not exist", p.display())));
            }
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.sampler.guidance.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load_instance(&self) -> Result<CcpInstance> {
        let inst = match &self.instance {
            Some(p) => CcpInstance::from_file(p)?,
            None => CcpInstance::linear_benchmark(
                self.benchmark_dim,
                self.rho.unwrap_or(0.1),
                derive_seed(self.seed, SeedStream::Instance),
            )?,
        };
        match self.rho {
            Some(r) if r != inst.rho() => inst.with_rho(r),
            _ => Ok(inst),
        }
    }

    pub fn network_config(&self, dim: usize) -> NetworkConfig {
        NetworkConfig {
            width: self.width,
            depth: self.depth,
            ..NetworkConfig::new(dim)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GenerationLog {
    count: usize,
    skipped: Vec<SkippedPoint>,
}

/// Metadata stored next to a samples CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesMeta {
    pub method: String,
    pub repeats: usize,
    pub rho: f64,
    pub runtime_seconds: f64,
    pub sampler: Option<SamplerConfig>,
}

pub fn run_generate(config: &ExperimentConfig, instance: &CcpInstance) -> Result<FeasibleDataset> {
    let grid = RestrictionGrid::linspace(config.grid.lo, config.grid.hi, config.grid.count)?;
    let gen = generate_dataset(instance, &grid, config.draws, derive_seed(config.seed, SeedStream::Generate))?;
    let path = config.dataset_path();
    gen.dataset.save(&path)?;
    let log_path = config.output_dir.join("generation.json");
    let log = GenerationLog {
        count: gen.dataset.len(),
        skipped: gen.skipped,
    };
    fs::write(&log_path, serde_json::to_string_pretty(&log)?).map_err(|e| Error::file(&log_path, e))?;
    Ok(gen.dataset)
}

pub fn run_train(config: &ExperimentConfig, dataset: &FeasibleDataset) -> Result<(ScoreNetwork, TrainReport)> {
    let schedule = NoiseSchedule::new(config.schedule)?;
    let train_cfg = TrainConfig {
        seed: derive_seed(config.seed, SeedStream::Train),
        ..config.train
    };
    let (net, report) = train(dataset, config.network_config(dataset.dim()), &train_cfg, &schedule)?;
    net.save(&config.checkpoint_path(), config.schedule)?;
    let path = config.output_dir.join("train_report.json");
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::file(&config.output_dir, e))?;
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::file(&path, e))?;
    Ok((net, report))
}

/// The sampler configuration the pipeline runs for `R` repeats.
pub fn sampler_config(config: &ExperimentConfig, instance: &CcpInstance, dataset: &FeasibleDataset) -> SamplerConfig {
    let mut guidance = config.sampler.guidance;
    guidance.prior_var = config.prior_var.unwrap_or_else(|| dataset.mean_variance());
    SamplerConfig {
        rho: instance.rho(),
        batch: config.repeats,
        seed: derive_seed(config.seed, SeedStream::Sample),
        radius: dataset.radius().max(1.0),
        guidance,
        ..config.sampler
    }
}

pub fn run_sample(
    config: &ExperimentConfig,
    instance: &CcpInstance,
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    dataset: &FeasibleDataset,
) -> Result<Vec<DVector<f64>>> {
    let cfg = sampler_config(config, instance, dataset);
    let start = Instant::now();
    let out = sample(net, schedule, instance.objective(), &cfg)?;
    let runtime = start.elapsed().as_secs_f64() / cfg.batch as f64;
    let meta = SamplesMeta {
        method: "GGDOpt".into(),
        repeats: cfg.batch,
        rho: cfg.rho,
        runtime_seconds: runtime,
        sampler: Some(cfg),
    };
    write_samples(&config.samples_path(), instance, &out.samples, &meta)?;
    if cfg.record_trajectories {
        emit_plot_data(&out.trajectories, &time_grid(schedule.steps(), cfg.steps), &config.output_dir.join("plots"))?;
    }
    Ok(out.samples)
}

/// Writes `x_1..x_n,rho,repaired` rows, where `repaired` flags samples
/// outside the analytic feasible set, plus a metadata sidecar.
pub fn write_samples(path: &Path, instance: &CcpInstance, samples: &[DVector<f64>], meta: &SamplesMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    let n = instance.dim();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_to_file(path, e))?;
    let mut header: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
    header.push("rho".into());
    header.push("repaired".into());
    w.write_record(&header)?;
    for x in samples {
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", meta.rho));
        let outside = instance.constraint().cone_slack(x) < 0.0;
        rec.push(u8::from(outside).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::file(&meta_path, e))?;
    Ok(())
}

pub fn read_samples(path: &Path, dim: usize) -> Result<(Vec<DVector<f64>>, SamplesMeta)> {
    let meta_path = sidecar_path(path);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::file(&meta_path, e))?;
    let meta: SamplesMeta = serde_json::from_str(&meta_text)?;
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_to_file(path, e))?;
    let format_err = |detail: String| Error::Format {
        path: path.into(),
        detail,
    };
    if r.headers()?.len() != dim + 2 {
        return Err(format_err(format!("expected {} columns", dim + 2)));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x: Vec<f64> = rec
            .iter()
            .take(dim)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| format_err(e.to_string()))?;
        out.push(DVector::from_vec(x));
    }
    if out.is_empty() {
        return Err(format_err("no samples".into()));
    }
    Ok((out, meta))
}

pub fn run_evaluate(config: &ExperimentConfig, instance: &CcpInstance) -> Result<SampleReport> {
    let (samples, meta) = read_samples(&config.samples_path(), instance.dim())?;
    let (report, _) = compute_report(
        &samples,
        instance,
        config.l_eval,
        derive_seed(config.seed, SeedStream::Evaluate),
        meta.runtime_seconds,
    )?;
    write_reports(&config.output_dir, "report", &[(meta.method.as_str(), &report)])?;
    Ok(report)
}

/// Solves the cone reformulation and the empirical-mean restriction, writes
/// their samples files and a side-by-side report. Returns `(SOC, empirical mean)`.
pub fn run_baseline(config: &ExperimentConfig, instance: &CcpInstance) -> Result<(SampleReport, SampleReport)> {
    let start = Instant::now();
    let socp = socp_solve(instance)?;
    let socp_time = start.elapsed().as_secs_f64();

    let draws = instance
        .uncertainty()
        .draw_seeded(config.draws, derive_seed(config.seed, SeedStream::Generate))?;
    let start = Instant::now();
    let (x_mean, _) = empirical_mean_baseline(instance, &draws)?;
    let mean_time = start.elapsed().as_secs_f64();

    let eval_seed = derive_seed(config.seed, SeedStream::Evaluate);
    let mut reports = Vec::new();
    for (name, x, runtime) in [("SOC", socp.x_star, socp_time), ("EmpiricalMean", x_mean, mean_time)] {
        let meta = SamplesMeta {
            method: name.into(),
            repeats: 1,
            rho: instance.rho(),
            runtime_seconds: runtime,
            sampler: None,
        };
        let path = config.output_dir.join(format!("baseline_{}.csv", name.to_lowercase()));
        write_samples(&path, instance, std::slice::from_ref(&x), &meta)?;
        let (report, _) = compute_report(std::slice::from_ref(&x), instance, config.l_eval, eval_seed, runtime)?;
        reports.push(report);
    }
    write_reports(
        &config.output_dir,
        "baseline_report",
        &[("SOC", &reports[0]), ("EmpiricalMean", &reports[1])],
    )?;
    let mean = reports.pop().expect("two reports");
    let soc = reports.pop().expect("two reports");
    Ok((soc, mean))
}

/// Runs the enabled stages in order. Returns the evaluation report when the
/// evaluate stage is enabled. A failing stage is named in the error; files
/// written by earlier stages are kept.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Option<SampleReport>> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::file(&config.output_dir, e))?;
    let instance = config.load_instance()?;
    let resolved = config.output_dir.join("config.json");
    fs::write(&resolved, serde_json::to_string_pretty(config)?).map_err(|e| Error::file(&resolved, e))?;

    let dataset = if config.stages.generate {
        Some(run_generate(config, &instance).map_err(|e| e.in_stage("generate"))?)
    } else if config.stages.train || config.stages.sample {
        Some(FeasibleDataset::load(&config.dataset_path()).map_err(|e| e.in_stage("generate"))?)
    } else {
        None
    };

    let trained = if config.stages.train {
        let ds = dataset.as_ref().expect("dataset loaded for training");
        Some(run_train(config, ds).map_err(|e| e.in_stage("train"))?.0)
    } else {
        None
    };

    if config.stages.sample {
        let (net, spec) = match trained {
            Some(net) => (net, config.schedule),
            None => ScoreNetwork::load(&config.checkpoint_path()).map_err(|e| e.in_stage("sample"))?,
        };
        let schedule = NoiseSchedule::new(spec).map_err(|e| e.in_stage("sample"))?;
        let ds = dataset.as_ref().expect("dataset loaded for sampling");
        run_sample(config, &instance, &net, &schedule, ds).map_err(|e| e.in_stage("sample"))?;
    }

    if config.stages.evaluate {
        return Ok(Some(run_evaluate(config, &instance).map_err(|e| e.in_stage("evaluate"))?));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            benchmark_dim: 3,
            grid: GridConfig {
                lo: 0.0,
                hi: 0.5,
                count: 40,
            },
            draws: 200,
            width: 16,
            depth: 1,
            train: TrainConfig {
                steps: 30,
                batch_size: 8,
                log_every: 0,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig {
                steps: 10,
                ..SamplerConfig::default()
            },
            repeats: 5,
            l_eval: 500,
            output_dir: dir.to_path_buf(),
            seed: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn seeds_are_distinct_per_stage() {
        let s: Vec<u64> = [
            SeedStream::Instance,
            SeedStream::Generate,
            SeedStream::Train,
            SeedStream::Sample,
            SeedStream::Evaluate,
        ]
        .iter()
        .map(|&st| derive_seed(7, st))
        .collect();
        for i in 0..s.len() {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        assert!(cfg.validate().is_ok());
        cfg.repeats = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.repeats = 1;
        cfg.stages.generate = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let json = serde_json::to_string(&small_config(dir.path())).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, small_config(dir.path()));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn pipeline_writes_artifacts_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_pipeline(&small_config(a.path())).unwrap().unwrap();
        let rb = run_pipeline(&small_config(b.path())).unwrap().unwrap();
        for f in ["dataset.csv", "model.ckpt", "samples.csv", "report.csv", "report.json", "train_report.json"] {
            assert!(a.path().join(f).exists(), "{f}");
        }
        let sa = fs::read(a.path().join("samples.csv")).unwrap();
        let sb = fs::read(b.path().join("samples.csv")).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(ra.fval_mean, rb.fval_mean);
        assert!(ra.fval_q25 <= ra.fval_median && ra.fval_median <= ra.fval_q75);

        // Re-running only the later stages reuses the artifacts on disk.
        let mut later = small_config(a.path());
        later.stages.generate = false;
        later.stages.train = false;
        let rc = run_pipeline(&later).unwrap().unwrap();
        assert_eq!(rc.fval_mean, ra.fval_mean);
    }

    #[test]
    fn failing_stage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.sampler.guidance = crate::guidance::GuidanceConfig::first(1e9);
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "sample", .. }), "{err}");
        assert!(dir.path().join("model.ckpt").exists());
    }

    #[test]
    fn baseline_feasibility_meets_guarantee() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let inst = cfg.load_instance().unwrap();
        let (soc, _) = run_baseline(&cfg, &inst).unwrap();
        assert!((soc.fval_mean + 0.6586).abs() < 5e-4);
        let eval_cfg = ExperimentConfig {
            samples: Some(dir.path().join("baseline_soc.csv")),
            ..cfg
        };
        let report = run_evaluate(&eval_cfg, &inst).unwrap();
        assert!(report.empirical_feasibility >= 1.0 - 0.1 - 0.01, "{}", report.empirical_feasibility);
    }
}
