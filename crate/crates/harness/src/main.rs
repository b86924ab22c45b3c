use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use qsm_core::envs::make_env;
use qsm_core::sde::{langevin_stationary_check, LangevinConfig};
use qsm_core::trainer::{evaluate, Algo};
use qsm_core::LabRng;
use qsm_lab::compare::{compare_runs, Reduction};
use qsm_lab::config::{ExperimentConfig, Target};
use qsm_lab::experiment::{load_checkpoint, run_experiment, run_gridworld, write_file};
use qsm_lab::metrics::fmt_f64;
use qsm_lab::presets::{run_preset, PresetOverrides};
use qsm_lab::HarnessError;

#[derive(Parser)]
#[command(name = "qsm-lab", version, about = "Q-score matching desk laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment file (`key = value` lines under `[experiment]`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output root (defaults to $QSM_LAB_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "k-steps")]
    k_steps: Option<usize>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Experiment name (output subdirectory).
    #[arg(long)]
    name: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(algo) = &self.algo {
            cfg.trainer.algo = Algo::parse(algo).map_err(|e| HarnessError::Usage(e.to_string()))?;
        }
        if let Some(env) = &self.env {
            cfg.target = Target::Env(env.clone());
        }
        if let Some(alpha) = self.alpha {
            cfg.trainer.alpha = alpha;
        }
        if let Some(k) = self.k_steps {
            cfg.trainer.k_steps = k;
        }
        if let Some(steps) = self.steps {
            cfg.trainer.total_env_steps = steps;
        }
        if let Some(name) = &self.name {
            cfg.apply("name", name, 0, None)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write metric CSVs, checkpoints and aggregates.
    Train(Common),
    /// Roll out a checkpointed policy without exploration noise.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Soft policy iteration on a gridworld map.
    Gridworld {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Map file; the built-in 8x8 map when absent.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long = "alpha")]
        alphas: Vec<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Langevin stationarity check on Q(a) = -|a|^2 / 2.
    Sde {
        #[arg(long = "alpha")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        chains: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align metric logs on their eval grid and tabulate one metric per group.
    Compare {
        /// Metric files or run directories, one group each.
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "episode_return")]
        metric: String,
        #[arg(long, default_value = "all")]
        reduction: String,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a reproduction preset.
    Repro {
        preset: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .downcast_ref::<HarnessError>()
                .is_some_and(|h| matches!(h, HarnessError::Usage(_) | HarnessError::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            if let Target::Gridworld(_) = cfg.target {
                bail!(HarnessError::Usage("use the gridworld verb for map experiments".into()));
            }
            let report = run_experiment(&cfg)?;
            for (seed, run) in report.runs() {
                let last = run.log.last().map_or("NA".into(), |r| format!("{:.3}", r.episode_return));
                println!("seed {seed}: final return {last}");
            }
            println!("wrote {}", report.run_dir.display());
            let failures = report.failures();
            for (_, msg) in &failures {
                eprintln!("{msg}");
            }
            Ok(if failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => {
            let cfg = common.resolve()?;
            let Target::Env(env_name) = &cfg.target else {
                bail!(HarnessError::Usage("eval needs an environment".into()));
            };
            if episodes == 0 {
                bail!(HarnessError::Usage("--episodes must be positive".into()));
            }
            let env = make_env(env_name)?;
            let spec = env.spec();
            let (score, _) = load_checkpoint(&checkpoint, spec.state_dim, spec.action_dim)?;
            let dcfg = cfg.trainer.diffusion_config(spec)?;
            println!("# qsm-lab eval v1");
            println!("seed,episodes,mean_return");
            for &seed in &cfg.seeds {
                let mut rng = LabRng::seed_from_u64(seed);
                let (ret, _) = evaluate(env.as_ref(), &score, &dcfg, episodes, &mut rng)?;
                println!("{seed},{episodes},{}", fmt_f64(ret));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gridworld {
            config,
            map,
            alphas,
            gamma,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => {
                    let mut c = ExperimentConfig::default();
                    c.name = "gridworld".into();
                    c.target = Target::Gridworld(None);
                    c
                }
            };
            if map.is_some() {
                cfg.target = Target::Gridworld(map);
            }
            if !alphas.is_empty() {
                cfg.gridworld.alphas = alphas;
            }
            if let Some(g) = gamma {
                cfg.gridworld.gamma = g;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let Target::Gridworld(map) = cfg.target.clone() else {
                bail!(HarnessError::Usage("config does not name a map".into()));
            };
            cfg.validate()?;
            let dir = cfg.run_dir();
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            print!("{}", run_gridworld(&cfg, map.as_deref(), &dir)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sde {
            alphas,
            dim,
            dt,
            samples,
            chains,
            seed,
            out,
        } => {
            let alphas = if alphas.is_empty() { vec![2.0, 4.0] } else { alphas };
            if dim == 0 {
                bail!(HarnessError::Usage("--dim must be positive".into()));
            }
            let mut table = String::from("# qsm-lab langevin v1\nalpha,dim,mean,variance,target_variance\n");
            for alpha in alphas {
                let cfg = LangevinConfig {
                    alpha,
                    dt,
                    burn_in: (5.0 / (alpha * dt)).ceil() as usize,
                    n_samples: samples,
                    n_chains: chains,
                    seed,
                    init: vec![0.0; dim],
                    hist_bins: 40,
                    hist_range: (-4.0 / alpha.sqrt(), 4.0 / alpha.sqrt()),
                };
                let grad = |a: &[f64]| a.iter().map(|x| -x).collect::<Vec<_>>();
                let summary = langevin_stationary_check(&grad, &cfg)?;
                for (j, v) in summary.variances().iter().enumerate() {
                    table.push_str(&format!(
                        "{},{j},{},{},{}\n",
                        fmt_f64(alpha),
                        fmt_f64(summary.mean[j]),
                        fmt_f64(*v),
                        fmt_f64(1.0 / alpha)
                    ));
                }
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir)?;
                    let mut hist = String::from("# qsm-lab histogram v1\ncenter,density,boltzmann\n");
                    let norm = (alpha / (2.0 * std::f64::consts::PI)).sqrt();
                    for (c, d) in summary.histogram.centers().iter().zip(&summary.histogram.density) {
                        let exact = norm * (-alpha * c * c / 2.0).exp();
                        hist.push_str(&format!("{},{},{}\n", fmt_f64(*c), fmt_f64(*d), fmt_f64(exact)));
                    }
                    write_file(&dir.join(format!("langevin_hist_alpha_{alpha}.csv")), &hist)?;
                }
            }
            if let Some(dir) = &out {
                write_file(&dir.join("langevin.csv"), &table)?;
            }
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            paths,
            metric,
            reduction,
            out,
        } => {
            let table = compare_runs(&paths, &metric, Reduction::parse(&reduction)?)?;
            match out {
                Some(path) => write_file(&path, &table)?,
                None => print!("{table}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Repro {
            preset,
            out,
            seeds,
            steps,
        } => {
            let overrides = PresetOverrides {
                out_dir: Some(qsm_lab::presets::output_root(out.as_deref())),
                seeds: (!seeds.is_empty()).then_some(seeds),
                total_env_steps: steps,
            };
            let report = run_preset(&preset, &overrides)?;
            print!("{}", report.summary);
            println!("wrote {}", report.summary_path.display());
            let failures = report.failures();
            for f in &failures {
                eprintln!("{f}");
            }
            Ok(if failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
