//! Reproduction presets. Each preset is a set of committed experiment files
//! plus a summary table written next to the runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use qsm_core::diffusion::sample_trace;
use qsm_core::envs::make_env;
use qsm_core::trainer::{Algo, TrainRun};
use qsm_core::LabRng;
use rand::SeedableRng;

use crate::compare::{compare_runs, Reduction};
use crate::config::ExperimentConfig;
use crate::experiment::{run_experiment, write_file, ExperimentReport};
use crate::metrics::{fmt_f64, fmt_opt, mean_std};
use crate::HarnessError;

pub const PRESET_NAMES: [&str; 4] = ["fig2_entropy", "fig4_multimodal", "fig6_qsm_vs_dpg", "fig7_depth_sweep"];

const FIG2: &str = include_str!("../presets/fig2_entropy.cfg");
const FIG4: &str = include_str!("../presets/fig4_multimodal.cfg");
const FIG6_QSM: &str = include_str!("../presets/fig6_qsm.cfg");
const FIG6_DPG: &str = include_str!("../presets/fig6_dpg.cfg");
const FIG7_QSM_K5: &str = include_str!("../presets/fig7_qsm_k5.cfg");
const FIG7_QSM_K20: &str = include_str!("../presets/fig7_qsm_k20.cfg");
const FIG7_DQL_K5: &str = include_str!("../presets/fig7_dql_k5.cfg");
const FIG7_DQL_K20: &str = include_str!("../presets/fig7_dql_k20.cfg");

/// Committed 8x8 map; identical to the built-in one.
pub const FIG2_MAP_FILE: &str = include_str!("../maps/fig2_8x8.map");

/// Number of initial-state actions drawn per seed for the multimodality table.
pub const MODE_SAMPLES: usize = 1000;

/// Experiment files of a preset, in run order.
pub fn preset_configs(name: &str) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let texts: &[&str] = match name {
        "fig2_entropy" => &[FIG2],
        "fig4_multimodal" => &[FIG4],
        "fig6_qsm_vs_dpg" => &[FIG6_QSM, FIG6_DPG],
        "fig7_depth_sweep" => &[FIG7_QSM_K5, FIG7_QSM_K20, FIG7_DQL_K5, FIG7_DQL_K20],
        other => {
            return Err(HarnessError::Usage(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    texts.iter().map(|t| ExperimentConfig::from_text(t, None)).collect()
}

/// Command-line overrides applied to every experiment of a preset.
#[derive(Debug, Clone, Default)]
pub struct PresetOverrides {
    pub out_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub total_env_steps: Option<usize>,
}

impl PresetOverrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(out) = &self.out_dir {
            cfg.out_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(steps) = self.total_env_steps {
            cfg.trainer.total_env_steps = steps;
        }
    }
}

pub struct PresetReport {
    pub summary_path: PathBuf,
    pub summary: String,
    pub experiments: Vec<ExperimentReport>,
}

impl PresetReport {
    pub fn failures(&self) -> Vec<String> {
        self.experiments
            .iter()
            .flat_map(|r| r.failures().into_iter().map(|(_, e)| e.to_string()))
            .collect()
    }
}

/// Fractions of `actions` (first coordinate) below and above zero.
pub fn sign_fractions(actions: &[f64]) -> (f64, f64) {
    let n = actions.len().max(1) as f64;
    let neg = actions.iter().filter(|a| **a < 0.0).count() as f64;
    let pos = actions.iter().filter(|a| **a > 0.0).count() as f64;
    (neg / n, pos / n)
}

/// `count` policy actions at the environment's initial state.
pub fn initial_actions(env_name: &str, run: &TrainRun, count: usize, seed: u64) -> Result<Vec<f64>, HarnessError> {
    let env = make_env(env_name)?;
    let mut rng = LabRng::seed_from_u64(seed);
    let obs = env.observe(&env.reset(&mut rng));
    let states = Array2::from_shape_fn((count, obs.len()), |(_, j)| obs[j]);
    let trace = sample_trace(&run.score, states.view(), None, &run.diffusion, &mut rng)?;
    Ok(trace.actions.column(0).to_vec())
}

fn final_returns(report: &ExperimentReport) -> Vec<Option<f64>> {
    report
        .runs()
        .map(|(_, r)| r.log.last().map(|rec| rec.episode_return))
        .collect()
}

/// Median of the pooled unrolled-gradient norms over all seeds of a run.
pub fn median_unroll_norm(report: &ExperimentReport) -> Option<f64> {
    let mut all: Vec<f64> = report.runs().flat_map(|(_, r)| r.unroll_norms.iter().copied()).collect();
    if all.is_empty() {
        return None;
    }
    all.sort_by(|a, b| a.total_cmp(b));
    let m = all.len() / 2;
    Some(if all.len() % 2 == 1 { all[m] } else { 0.5 * (all[m - 1] + all[m]) })
}

fn preset_dir(name: &str, cfgs: &[ExperimentConfig]) -> Result<PathBuf, HarnessError> {
    let root = cfgs.first().map(|c| c.out_dir.clone()).unwrap_or_default();
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn run_preset(name: &str, overrides: &PresetOverrides) -> Result<PresetReport, HarnessError> {
    let mut cfgs = preset_configs(name)?;
    for cfg in &mut cfgs {
        overrides.apply(cfg);
    }
    let dir = preset_dir(name, &cfgs)?;
    for cfg in &mut cfgs {
        cfg.out_dir = dir.clone();
    }
    let experiments = cfgs.iter().map(run_experiment).collect::<Result<Vec<_>, _>>()?;
    let (file, summary) = match name {
        "fig2_entropy" => {
            let table = std::fs::read_to_string(experiments[0].run_dir.join("entropy.csv"))
                .map_err(|e| HarnessError::Io(e.to_string()))?;
            ("entropy.csv", table)
        }
        "fig4_multimodal" => ("modes.csv", modes_table(&cfgs[0], &experiments[0])?),
        "fig6_qsm_vs_dpg" => {
            let dirs: Vec<PathBuf> = experiments.iter().map(|e| e.run_dir.clone()).collect();
            ("comparison.csv", compare_runs(&dirs, "episode_return", Reduction::Final)?)
        }
        _ => ("depth_sweep.csv", depth_table(&cfgs, &experiments)),
    };
    let summary_path = dir.join(file);
    write_file(&summary_path, &summary)?;
    Ok(PresetReport {
        summary_path,
        summary,
        experiments,
    })
}

fn modes_table(cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<String, HarnessError> {
    let env_name = match &cfg.target {
        crate::config::Target::Env(e) => e.clone(),
        _ => return Err(HarnessError::Config("multimodality preset needs an env".into())),
    };
    let mut samples = String::from("# qsm-lab initial-actions v1\nseed,sample,action\n");
    let mut out = String::from("# qsm-lab modes v1\nseed,samples,frac_negative,frac_positive\n");
    for (seed, run) in report.runs() {
        let actions = initial_actions(&env_name, run, MODE_SAMPLES, seed)?;
        for (i, a) in actions.iter().enumerate() {
            let _ = writeln!(samples, "{seed},{i},{}", fmt_f64(*a));
        }
        let (neg, pos) = sign_fractions(&actions);
        let _ = writeln!(out, "{seed},{},{},{}", actions.len(), fmt_f64(neg), fmt_f64(pos));
    }
    write_file(&report.run_dir.join("initial_actions.csv"), &samples)?;
    Ok(out)
}

fn depth_table(cfgs: &[ExperimentConfig], reports: &[ExperimentReport]) -> String {
    let mut out = String::from(
        "# qsm-lab depth-sweep v1\nalgo,k_steps,final_return_mean,final_return_std,median_unroll_grad_norm\n",
    );
    for (cfg, report) in cfgs.iter().zip(reports) {
        let (mean, std) = mean_std(final_returns(report));
        let norm = match cfg.trainer.algo {
            Algo::Dql => median_unroll_norm(report),
            _ => None,
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            cfg.trainer.algo,
            cfg.trainer.k_steps,
            fmt_opt(mean),
            fmt_opt(std),
            fmt_opt(norm)
        );
    }
    out
}

/// Resolves `repro` output: explicit flag, then `QSM_LAB_OUT`, then the default.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(crate::config::default_out_dir)
}
