//! Flat `key = value` experiment files.
//!
//! ```text
//! # comments start with '#'
//! [experiment]
//! name = point_mass_qsm
//! env = point_mass
//! algo = qsm
//! seeds = 0, 1, 2
//! alpha = 3
//! ```
//!
//! Every key may appear once. Unknown keys and sections are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use qsm_core::critic::GradSource;
use qsm_core::envs::ENV_NAMES;
use qsm_core::nn::Activation;
use qsm_core::trainer::{Algo, TrainerConfig};

use crate::HarnessError;

/// Default output root when neither `--out` nor `QSM_LAB_OUT` is given.
pub const DEFAULT_OUT: &str = "runs";
pub const OUT_ENV_VAR: &str = "QSM_LAB_OUT";

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Env(String),
    /// Gridworld map file; `None` selects the built-in 8x8 map.
    Gridworld(Option<PathBuf>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridworldSettings {
    pub gamma: f64,
    pub alphas: Vec<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GridworldSettings {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alphas: vec![1.0, 10.0],
            max_iters: 200,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub target: Target,
    pub trainer: TrainerConfig,
    pub seeds: Vec<u64>,
    /// Output root; results go to `out_dir/name`.
    pub out_dir: PathBuf,
    pub gridworld: GridworldSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            target: Target::Env("point_mass".into()),
            trainer: TrainerConfig::default(),
            seeds: vec![0],
            out_dir: default_out_dir(),
            gridworld: GridworldSettings::default(),
        }
    }
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Parsed `key = value` pairs with their line numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub entries: BTreeMap<String, (String, usize)>,
}

pub fn parse_raw(text: &str) -> Result<RawConfig, HarnessError> {
    let mut raw = RawConfig::default();
    let mut in_section = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| HarnessError::Config(format!("line {lineno}: malformed section header")))?
                .trim();
            if name != "experiment" {
                return Err(HarnessError::Config(format!("line {lineno}: unknown section [{name}]")));
            }
            if in_section {
                return Err(HarnessError::Config(format!("line {lineno}: duplicate [experiment] section")));
            }
            in_section = true;
            continue;
        }
        if !in_section {
            return Err(HarnessError::Config(format!(
                "line {lineno}: keys must follow the [experiment] header"
            )));
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {lineno}: expected key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(HarnessError::Config(format!("line {lineno}: empty key")));
        }
        if let Some((_, first)) = raw.entries.get(key) {
            return Err(HarnessError::Config(format!(
                "line {lineno}: key '{key}' already set on line {first}"
            )));
        }
        raw.entries.insert(key.to_string(), (value.to_string(), lineno));
    }
    if !in_section {
        return Err(HarnessError::Config("missing [experiment] section".into()));
    }
    Ok(raw)
}

fn bad(key: &str, line: usize, value: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("line {line}: {key} = '{value}': {why}"))
}

fn num<T: std::str::FromStr>(key: &str, line: usize, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, line, value, e))
}

fn list<T: std::str::FromStr>(key: &str, line: usize, value: &str) -> Result<Vec<T>, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| num(key, line, s))
        .collect()
}

fn boolean(key: &str, line: usize, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, line, value, "expected true or false")),
    }
}

fn optional_f64(key: &str, line: usize, value: &str) -> Result<Option<f64>, HarnessError> {
    if value == "none" || value == "default" {
        Ok(None)
    } else {
        num(key, line, value).map(Some)
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str, base_dir: Option<&Path>) -> Result<Self, HarnessError> {
        let raw = parse_raw(text)?;
        let mut cfg = Self::default();
        for (key, (value, line)) in &raw.entries {
            cfg.apply(key, value, *line, base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, path.parent())
    }

    /// Sets one key; `line` is only used in messages.
    pub fn apply(&mut self, key: &str, value: &str, line: usize, base_dir: Option<&Path>) -> Result<(), HarnessError> {
        let t = &mut self.trainer;
        match key {
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(bad(key, line, value, "must be a plain non-empty name"));
                }
                self.name = value.to_string();
            }
            "env" => self.target = Target::Env(value.to_string()),
            "map" => {
                self.target = Target::Gridworld(match value {
                    "builtin" | "fig2" => None,
                    path => {
                        let p = PathBuf::from(path);
                        Some(match base_dir {
                            Some(dir) if p.is_relative() => dir.join(p),
                            _ => p,
                        })
                    }
                })
            }
            "out" => self.out_dir = PathBuf::from(value),
            "seeds" => self.seeds = list(key, line, value)?,
            "algo" => t.algo = Algo::parse(value).map_err(|e| bad(key, line, value, e))?,
            "alpha" => t.alpha = num(key, line, value)?,
            "gamma" => {
                t.gamma = num(key, line, value)?;
                self.gridworld.gamma = t.gamma;
            }
            "tau" => t.tau = num(key, line, value)?,
            "batch_size" => t.batch_size = num(key, line, value)?,
            "n_step" => t.n_step = num(key, line, value)?,
            "total_env_steps" => t.total_env_steps = num(key, line, value)?,
            "warmup_steps" => t.warmup_steps = num(key, line, value)?,
            "buffer_capacity" => t.buffer_capacity = num(key, line, value)?,
            "critic_lr" => t.critic_lr = num(key, line, value)?,
            "actor_lr" => t.actor_lr = num(key, line, value)?,
            "eval_every" => t.eval_every = num(key, line, value)?,
            "eval_episodes" => t.eval_episodes = num(key, line, value)?,
            "hidden" => t.hidden = list(key, line, value)?,
            "activation" => t.activation = Activation::parse(value).map_err(|e| bad(key, line, value, e))?,
            "grad_source" => t.grad_source = GradSource::parse(value).map_err(|e| bad(key, line, value, e))?,
            "grad_clip" => t.grad_clip = optional_f64(key, line, value)?,
            "k_steps" => t.k_steps = num(key, line, value)?,
            "step_size" => t.step_size = optional_f64(key, line, value)?,
            "per_step_noise" => t.per_step_noise = optional_f64(key, line, value)?,
            "exploration_sigma" => t.exploration_sigma = num(key, line, value)?,
            "warm_start" => t.warm_start = boolean(key, line, value)?,
            "cosine_rows" => t.cosine_rows = num(key, line, value)?,
            "alphas" => self.gridworld.alphas = list(key, line, value)?,
            "max_iters" => self.gridworld.max_iters = num(key, line, value)?,
            "tol" => self.gridworld.tol = num(key, line, value)?,
            other => return Err(HarnessError::Config(format!("line {line}: unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Config(format!("seeds must be distinct: {:?}", self.seeds)));
        }
        match &self.target {
            Target::Env(name) if !ENV_NAMES.contains(&name.as_str()) => {
                return Err(HarnessError::Config(format!(
                    "unknown env '{name}' (known: {})",
                    ENV_NAMES.join(", ")
                )))
            }
            Target::Gridworld(Some(path)) if !path.is_file() => {
                return Err(HarnessError::Config(format!("map file {} does not exist", path.display())))
            }
            _ => {}
        }
        if let Target::Gridworld(_) = self.target {
            let g = &self.gridworld;
            if g.alphas.is_empty() || g.alphas.iter().any(|a| !(*a > 0.0)) {
                return Err(HarnessError::Config("gridworld alphas must be positive".into()));
            }
            if !(g.gamma > 0.0 && g.gamma < 1.0) {
                return Err(HarnessError::Config(format!("gamma {} outside (0, 1)", g.gamma)));
            }
        } else {
            self.trainer.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}
