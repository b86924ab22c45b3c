//! Seeded multi-run execution and the files it leaves behind.
//!
//! For an environment experiment named `x` under output root `out`:
//!
//! ```text
//! out/x/seed_<s>.csv          metrics log
//! out/x/seed_<s>.timing.csv   wall-clock time per eval point
//! out/x/seed_<s>.ckpt         latest checkpoint (score, q1, q2, target1, target2)
//! out/x/seed_<s>.error.txt    only when the seed failed
//! out/x/aggregate.csv         mean and std over successful seeds
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use qsm_core::critic::CriticPair;
use qsm_core::diffusion::ScoreNetwork;
use qsm_core::envs::make_env;
use qsm_core::gridworld::{run_soft_policy_iteration, GridworldModel, PolicyTable, FIG2_MAP};
use qsm_core::nn::{read_checkpoint, write_checkpoint, Mlp};
use qsm_core::trainer::{train_with, TrainRun};

use crate::config::{ExperimentConfig, Target};
use crate::metrics::{fmt_f64, read_metrics, render_aggregate, render_metrics, render_timing};
use crate::HarnessError;

pub struct SeedOutcome {
    pub seed: u64,
    pub csv: PathBuf,
    pub result: Result<TrainRun, String>,
}

pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub aggregate: Option<PathBuf>,
}

impl ExperimentReport {
    pub fn failures(&self) -> Vec<(u64, &str)> {
        self.seeds
            .iter()
            .filter_map(|s| s.result.as_ref().err().map(|e| (s.seed, e.as_str())))
            .collect()
    }

    pub fn succeeded(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn runs(&self) -> impl Iterator<Item = (u64, &TrainRun)> {
        self.seeds
            .iter()
            .filter_map(|s| s.result.as_ref().ok().map(|r| (s.seed, r)))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn save_checkpoint(path: &Path, score: &ScoreNetwork, critics: &CriticPair) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(
        &mut out,
        &[
            ("score", score.net()),
            ("q1", &critics.q1),
            ("q2", &critics.q2),
            ("target1", &critics.target1),
            ("target2", &critics.target2),
        ],
    )
    .map_err(|e| io_err(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    path: &Path,
    state_dim: usize,
    action_dim: usize,
) -> Result<(ScoreNetwork, CriticPair), HarnessError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let nets = read_checkpoint(std::io::BufReader::new(file)).map_err(|e| io_err(path, e))?;
    let take = |role: &str| -> Result<Mlp, HarnessError> {
        nets.iter()
            .find(|(r, _)| r == role)
            .map(|(_, n)| n.clone())
            .ok_or_else(|| io_err(path, format!("checkpoint has no '{role}' network")))
    };
    let score = ScoreNetwork::from_mlp(take("score")?, state_dim, action_dim).map_err(|e| io_err(path, e))?;
    let critics = CriticPair::from_networks(
        take("q1")?,
        take("q2")?,
        take("target1")?,
        take("target2")?,
        state_dim,
        action_dim,
    )
    .map_err(|e| io_err(path, e))?;
    Ok((score, critics))
}

/// Runs every seed of an environment experiment, or the soft policy
/// iteration sweep of a gridworld experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let env_name = match &cfg.target {
        Target::Env(name) => name.clone(),
        Target::Gridworld(map) => {
            run_gridworld(cfg, map.as_deref(), &dir)?;
            return Ok(ExperimentReport {
                run_dir: dir,
                seeds: Vec::new(),
                aggregate: None,
            });
        }
    };
    let env = make_env(&env_name).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let csv = dir.join(format!("seed_{seed}.csv"));
        let ckpt = dir.join(format!("seed_{seed}.ckpt"));
        let error_file = dir.join(format!("seed_{seed}.error.txt"));
        let _ = fs::remove_file(&error_file);
        let mut tcfg = cfg.trainer.clone();
        tcfg.seed = seed;
        let result = train_with(env.as_ref(), &tcfg, &mut |_, score, critics| {
            save_checkpoint(&ckpt, score, critics).map_err(|e| qsm_core::Error::Io(e.to_string()))
        });
        let result = match result {
            Ok(run) => {
                write_file(&csv, &render_metrics(&run.log))?;
                write_file(&dir.join(format!("seed_{seed}.timing.csv")), &render_timing(&run.log))?;
                Ok(run)
            }
            Err(e) => {
                let msg = format!("seed {seed} failed: {e}");
                write_file(&error_file, &format!("{msg}\n"))?;
                Err(msg)
            }
        };
        seeds.push(SeedOutcome { seed, csv, result });
    }
    let mut logs = Vec::new();
    for s in seeds.iter().filter(|s| s.result.is_ok()) {
        logs.push(read_metrics(&s.csv)?);
    }
    let aggregate = dir.join("aggregate.csv");
    write_file(&aggregate, &render_aggregate(&logs)?)?;
    Ok(ExperimentReport {
        run_dir: dir,
        seeds,
        aggregate: Some(aggregate),
    })
}

pub fn load_map(map: Option<&Path>, gamma: f64) -> Result<GridworldModel, HarnessError> {
    let text = match map {
        Some(path) => fs::read_to_string(path).map_err(|e| io_err(path, e))?,
        None => FIG2_MAP.to_string(),
    };
    GridworldModel::parse(&text, gamma).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Per-state policy and Q table.
pub fn render_policy(model: &GridworldModel, policy: &PolicyTable, q: &ndarray::Array2<f64>) -> String {
    let mut out = String::from("# qsm-lab gridworld-policy v1\nstate,x,y,");
    let names: Vec<&str> = qsm_core::gridworld::Action::ALL.iter().map(|a| a.name()).collect();
    let p: Vec<String> = names.iter().map(|n| format!("p_{n}")).collect();
    let qn: Vec<String> = names.iter().map(|n| format!("q_{n}")).collect();
    let _ = writeln!(out, "{},{},entropy", p.join(","), qn.join(","));
    for s in 0..model.num_states() {
        let (x, y) = model.coords(s);
        let _ = write!(out, "{s},{x},{y}");
        let probs = policy.probs().row(s);
        for v in probs.iter().chain(q.row(s).iter()) {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let h: f64 = -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let _ = writeln!(out, ",{}", fmt_f64(h));
    }
    out
}

/// One row per alpha: iterations to converge and mean policy entropy.
pub fn run_gridworld(cfg: &ExperimentConfig, map: Option<&Path>, dir: &Path) -> Result<String, HarnessError> {
    let g = &cfg.gridworld;
    let model = load_map(map, g.gamma)?;
    let mut table = String::from("# qsm-lab entropy v1\nalpha,iterations,mean_entropy\n");
    for &alpha in &g.alphas {
        let res = run_soft_policy_iteration(&model, alpha, g.max_iters, g.tol)
            .map_err(|e| HarnessError::Run(format!("alpha {alpha}: {e}")))?;
        let _ = writeln!(table, "{},{},{}", fmt_f64(alpha), res.iterations, fmt_f64(res.entropy));
        write_file(
            &dir.join(format!("policy_alpha_{alpha}.csv")),
            &render_policy(&model, &res.policy, &res.q),
        )?;
    }
    write_file(&dir.join("entropy.csv"), &table)?;
    Ok(table)
}
