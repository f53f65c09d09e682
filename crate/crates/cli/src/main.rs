use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ggdopt::datagen::FeasibleDataset;
use ggdopt::diffusion::{NoiseSchedule, ScoreNetwork};
use ggdopt::guidance::GuidanceOrder;
use ggdopt::harness::{self, ExperimentConfig, Stages};
use ggdopt::sampler::SamplerMode;
use ggdopt::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "ggdopt", version, about = "Gradient-guided diffusion for chance constrained programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the restricted problems and write the labelled dataset.
    Generate(Opts),
    /// Train the conditional noise-prediction network on a dataset.
    Train(Opts),
    /// Draw guided samples from a trained checkpoint.
    Sample(Opts),
    /// Solve the cone reformulation and the empirical-mean restriction.
    Baseline(Opts),
    /// Repair samples and report objective and feasibility statistics.
    Evaluate(Opts),
    /// Run the stages enabled in the configuration.
    Pipeline(Opts),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Deterministic,
    Ancestral,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Off,
    First,
    Second,
}

#[derive(Args)]
struct Opts {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "GGDOPT_OUTPUT_ROOT")]
    output_dir: Option<PathBuf>,
    /// Instance file; the linear benchmark is used when absent.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Number of restricted problems.
    #[arg(long)]
    grid_count: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Reverse steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    order: Option<Order>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Use the Gaussian-prior posterior variance in place of --sigma2.
    #[arg(long)]
    posterior_sigma2: bool,
    /// Classifier-free guidance weight.
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    mu_clip: Option<f64>,
    /// Data variance assumed by the guidance factor; estimated from the
    /// dataset when absent.
    #[arg(long)]
    prior_var: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    l_eval: Option<usize>,
    #[arg(long)]
    record_trajectories: bool,
}

impl Opts {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.output_dir, self.output_dir.clone());
        if self.instance.is_some() {
            c.instance = self.instance.clone();
        }
        set!(c.benchmark_dim, self.dim);
        if self.rho.is_some() {
            c.rho = self.rho;
        }
        set!(c.seed, self.seed);
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint.clone();
        }
        if self.samples.is_some() {
            c.samples = self.samples.clone();
        }
        set!(c.grid.count, self.grid_count);
        set!(c.draws, self.draws);
        set!(c.train.steps, self.train_steps);
        set!(c.train.learning_rate, self.learning_rate);
        set!(c.train.batch_size, self.batch_size);
        set!(c.width, self.width);
        set!(c.depth, self.depth);
        set!(c.sampler.steps, self.steps);
        set!(
            c.sampler.mode,
            self.mode.map(|m| match m {
                Mode::Deterministic => SamplerMode::Deterministic,
                Mode::Ancestral => SamplerMode::Ancestral,
            })
        );
        set!(
            c.sampler.guidance.order,
            self.order.map(|o| match o {
                Order::Off => GuidanceOrder::Off,
                Order::First => GuidanceOrder::First,
                Order::Second => GuidanceOrder::Second,
            })
        );
        set!(c.sampler.guidance.beta, self.beta);
        set!(c.sampler.guidance.sigma2, self.sigma2);
        set!(c.sampler.guidance.w, self.w);
        if self.prior_var.is_some() {
            c.prior_var = self.prior_var;
        }
        if self.mu_clip.is_some() {
            c.sampler.guidance.mu_clip = self.mu_clip;
        }
        set!(c.repeats, self.repeats);
        set!(c.l_eval, self.l_eval);
        c.sampler.record_trajectories |= self.record_trajectories;
        c.sampler.guidance.posterior_sigma2 |= self.posterior_sigma2;
        Ok(c)
    }
}

fn only(stage: &str) -> Stages {
    Stages {
        generate: stage == "generate",
        train: stage == "train",
        sample: stage == "sample",
        evaluate: stage == "evaluate",
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(o) => {
            let cfg = ExperimentConfig {
                stages: only("generate"),
                ..o.resolve()?
            };
            cfg.validate()?;
            let ds = harness::run_generate(&cfg, &cfg.load_instance()?)?;
            eprintln!("wrote {} pairs to {}", ds.len(), cfg.dataset_path().display());
        }
        Command::Train(o) => {
            let cfg = ExperimentConfig {
                stages: only("train"),
                ..o.resolve()?
            };
            cfg.validate()?;
            let ds = FeasibleDataset::load(&cfg.dataset_path())?;
            let (_, report) = harness::run_train(&cfg, &ds)?;
            print_json(&report)?;
        }
        Command::Sample(o) => {
            let cfg = ExperimentConfig {
                stages: only("sample"),
                ..o.resolve()?
            };
            cfg.validate()?;
            let instance = cfg.load_instance()?;
            let (net, spec) = ScoreNetwork::load(&cfg.checkpoint_path())?;
            let ds = FeasibleDataset::load(&cfg.dataset_path())?;
            harness::run_sample(&cfg, &instance, &net, &NoiseSchedule::new(spec)?, &ds)?;
            eprintln!("wrote {}", cfg.samples_path().display());
        }
        Command::Baseline(o) => {
            let cfg = o.resolve()?;
            let (soc, mean) = harness::run_baseline(&cfg, &cfg.load_instance()?)?;
            print_json(&serde_json::json!({ "SOC": soc, "EmpiricalMean": mean }))?;
        }
        Command::Evaluate(o) => {
            let cfg = ExperimentConfig {
                stages: only("evaluate"),
                ..o.resolve()?
            };
            cfg.validate()?;
            print_json(&harness::run_evaluate(&cfg, &cfg.load_instance()?)?)?;
        }
        Command::Pipeline(o) => {
            if let Some(report) = harness::run_pipeline(&o.resolve()?)? {
                print_json(&report)?;
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Io => 4,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
