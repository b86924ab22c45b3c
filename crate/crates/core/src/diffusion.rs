//! Time-invariant diffusion sampler driven by a score network.
//!
//! Sampling starts from `a^0 ~ N(0, I)` (or from a supplied warm-start action)
//! and applies `K` updates
//!
//! ```text
//! a^i = a^{i-1} + step_size * psi(s, a^{i-1}) + per_step_noise * xi_i
//! ```
//!
//! before clipping to the action box. The score network takes no step index.
//!
//! Random draws are consumed in a fixed order so experiments replay exactly:
//! one `(batch, action_dim)` block of standard normals for `a^0` (drawn even
//! when warm-starting), then one block per denoising step. A single action
//! therefore costs `(K + 1) * action_dim` normal draws.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, ForwardCache, Mlp};

/// Score network `psi(s, a)`: an MLP over the concatenated `[state, action]`
/// input that returns an action-space vector.
#[derive(Debug)]
pub struct ScoreNetwork {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
    rows_evaluated: AtomicU64,
}

impl Clone for ScoreNetwork {
    fn clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            rows_evaluated: AtomicU64::new(self.rows_evaluated()),
        }
    }
}

impl PartialEq for ScoreNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.net == other.net
            && self.state_dim == other.state_dim
            && self.action_dim == other.action_dim
    }
}

pub(crate) fn join_rows(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_len("state/action batch rows", states.nrows(), actions.nrows())?;
    Ok(concatenate![Axis(1), states, actions])
}

impl ScoreNetwork {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        Self::from_mlp(Mlp::new(&dims, activation, rng)?, state_dim, action_dim)
    }

    pub fn from_mlp(net: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        check_len("score input", state_dim + action_dim, net.input_dim())?;
        check_len("score output", action_dim, net.output_dim())?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
            rows_evaluated: AtomicU64::new(0),
        })
    }

    /// `psi(s, a) = slope * a`, handy as an analytically known field.
    pub fn linear_in_action(state_dim: usize, action_dim: usize, slope: f64) -> Result<Self> {
        let mut net = Mlp::zeros(&[state_dim + action_dim, action_dim], Activation::Identity)?;
        for j in 0..action_dim {
            net.weights_mut(0)[[state_dim + j, j]] = slope;
        }
        Self::from_mlp(net, state_dim, action_dim)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Number of `(s, a)` rows pushed through the network since creation or
    /// the last [`ScoreNetwork::reset_eval_count`].
    pub fn rows_evaluated(&self) -> u64 {
        self.rows_evaluated.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.rows_evaluated.store(0, Ordering::Relaxed);
    }

    fn count(&self, rows: usize) {
        self.rows_evaluated.fetch_add(rows as u64, Ordering::Relaxed);
    }

    pub fn eval_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("score state input", self.state_dim, states.ncols())?;
        check_len("score action input", self.action_dim, actions.ncols())?;
        let x = join_rows(states, actions)?;
        self.count(x.nrows());
        self.net.forward_batch(x.view())
    }

    pub fn eval(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
        let a = ArrayView2::from_shape((1, action.len()), action).expect("row");
        Ok(self.eval_batch(s, a)?.into_raw_vec_and_offset().0)
    }

    pub fn eval_cached(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<ForwardCache> {
        check_len("score state input", self.state_dim, states.ncols())?;
        check_len("score action input", self.action_dim, actions.ncols())?;
        let x = join_rows(states, actions)?;
        self.count(x.nrows());
        self.net.forward_cached(x.view())
    }

    /// Parameter gradient and the action block of the input gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let (gp, gx) = self.net.backward(cache, upstream)?;
        let ga = gx.slice(ndarray::s![.., self.state_dim..]).to_owned();
        Ok((gp, ga))
    }
}

/// Sampler, forward-noising and exploration settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub k_steps: usize,
    pub step_size: f64,
    pub per_step_noise: f64,
    /// Forward variance-preserving schedule, one beta per step.
    pub vp_betas: Vec<f64>,
    pub exploration_sigma: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Start denoising from the previously executed action instead of fresh noise.
    pub warm_start: bool,
}

/// Linear schedule from `beta_min` to `beta_max` over `k` steps.
pub fn linear_betas(k: usize, beta_min: f64, beta_max: f64) -> Vec<f64> {
    if k == 1 {
        return vec![beta_min];
    }
    (0..k)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (k - 1) as f64)
        .collect()
}

impl DiffusionConfig {
    pub const DEFAULT_BETA_MIN: f64 = 1e-4;
    pub const DEFAULT_BETA_MAX: f64 = 0.02;

    /// Defaults: step size `1/K`, per-step noise `0.1 * sqrt(1/K)`, linear VP
    /// schedule on `[1e-4, 0.02]`, exploration sigma 0.1.
    pub fn new(k_steps: usize, action_low: Vec<f64>, action_high: Vec<f64>) -> Result<Self> {
        if k_steps == 0 {
            return Err(Error::Range("k_steps must be at least 1".into()));
        }
        let step_size = 1.0 / k_steps as f64;
        let cfg = Self {
            k_steps,
            step_size,
            per_step_noise: 0.1 * step_size.sqrt(),
            vp_betas: linear_betas(k_steps, Self::DEFAULT_BETA_MIN, Self::DEFAULT_BETA_MAX),
            exploration_sigma: 0.1,
            action_low,
            action_high,
            warm_start: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unbounded box, handy for distributional tests.
    pub fn unbounded(k_steps: usize, action_dim: usize) -> Result<Self> {
        Self::new(
            k_steps,
            vec![f64::NEG_INFINITY; action_dim],
            vec![f64::INFINITY; action_dim],
        )
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_steps == 0 {
            return Err(Error::Range("k_steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Range(format!("step_size {} must be positive", self.step_size)));
        }
        if !(self.per_step_noise >= 0.0 && self.per_step_noise.is_finite()) {
            return Err(Error::Range("per_step_noise must be non-negative".into()));
        }
        if !(self.exploration_sigma >= 0.0 && self.exploration_sigma.is_finite()) {
            return Err(Error::Range("exploration_sigma must be non-negative".into()));
        }
        check_len("vp schedule", self.k_steps, self.vp_betas.len())?;
        if let Some(b) = self.vp_betas.iter().find(|b| !(**b >= 0.0 && **b <= 1.0)) {
            return Err(Error::Range(format!("vp beta {b} outside [0, 1]")));
        }
        check_len("action bounds", self.action_low.len(), self.action_high.len())?;
        if self.action_low.is_empty() {
            return Err(Error::Contract("action space must be non-empty".into()));
        }
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::Range(format!("action bounds need low < high, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn clip_row(&self, row: &mut [f64]) {
        for ((x, lo), hi) in row.iter_mut().zip(&self.action_low).zip(&self.action_high) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn clip(&self, actions: &mut Array2<f64>) {
        for mut row in actions.rows_mut() {
            self.clip_row(row.as_slice_mut().expect("standard layout"));
        }
    }
}

/// Number of standard-normal draws one sampled action consumes.
pub fn draws_per_action(k_steps: usize, action_dim: usize) -> usize {
    (k_steps + 1) * action_dim
}

pub(crate) fn normal_block<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Full record of one batched sampler run.
#[derive(Debug, Clone)]
pub struct SamplerTrace {
    /// `a^0 .. a^K` before clipping; `K + 1` entries.
    pub chain: Vec<Array2<f64>>,
    /// Standard-normal innovations `xi_1 .. xi_K`.
    pub noise: Vec<Array2<f64>>,
    /// `a^K` clipped to the action box.
    pub actions: Array2<f64>,
}

impl SamplerTrace {
    /// Rows of the final action that were not clipped, per coordinate.
    pub fn inside_bounds(&self, cfg: &DiffusionConfig) -> Array2<f64> {
        let last = self.chain.last().expect("non-empty chain");
        let mut mask = Array2::zeros(last.raw_dim());
        for ((i, j), x) in last.indexed_iter() {
            if *x > cfg.action_low[j] && *x < cfg.action_high[j] {
                mask[[i, j]] = 1.0;
            }
        }
        mask
    }
}

/// Runs the sampler on a batch of states and keeps every intermediate action.
pub fn sample_trace<R: Rng + ?Sized>(
    score: &ScoreNetwork,
    states: ArrayView2<f64>,
    init: Option<ArrayView2<f64>>,
    cfg: &DiffusionConfig,
    rng: &mut R,
) -> Result<SamplerTrace> {
    cfg.validate()?;
    check_len("sampler state width", score.state_dim(), states.ncols())?;
    check_len("sampler action dim", score.action_dim(), cfg.action_dim())?;
    let (rows, dim) = (states.nrows(), score.action_dim());
    let fresh = normal_block(rng, rows, dim);
    let a0 = match (cfg.warm_start, init) {
        (true, Some(prev)) => {
            check_len("warm-start rows", rows, prev.nrows())?;
            check_len("warm-start width", dim, prev.ncols())?;
            prev.to_owned()
        }
        _ => fresh,
    };
    let mut chain = Vec::with_capacity(cfg.k_steps + 1);
    let mut noise = Vec::with_capacity(cfg.k_steps);
    chain.push(a0);
    for step in 1..=cfg.k_steps {
        let prev = chain.last().unwrap();
        let psi = score.eval_batch(states, prev.view())?;
        let xi = normal_block(rng, rows, dim);
        let next = prev + &(psi * cfg.step_size) + &(&xi * cfg.per_step_noise);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "sampler produced a non-finite action at denoising step {step} of {}",
                cfg.k_steps
            )));
        }
        chain.push(next);
        noise.push(xi);
    }
    let mut actions = chain.last().unwrap().clone();
    cfg.clip(&mut actions);
    Ok(SamplerTrace {
        chain,
        noise,
        actions,
    })
}

pub fn sample_actions<R: Rng + ?Sized>(
    score: &ScoreNetwork,
    states: ArrayView2<f64>,
    cfg: &DiffusionConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    Ok(sample_trace(score, states, None, cfg, rng)?.actions)
}

pub fn sample_action<R: Rng + ?Sized>(
    score: &ScoreNetwork,
    state: &[f64],
    cfg: &DiffusionConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let s = ArrayView2::from_shape((1, state.len()), state).expect("row");
    Ok(sample_actions(score, s, cfg, rng)?.into_raw_vec_and_offset().0)
}

/// Applies the first `tau` forward variance-preserving steps
/// `a <- sqrt(1 - beta) a + sqrt(beta) xi`.
pub fn vp_noise<R: Rng + ?Sized>(
    action: &[f64],
    tau: usize,
    cfg: &DiffusionConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if tau == 0 || tau > cfg.vp_betas.len() {
        return Err(Error::Range(format!(
            "tau {tau} outside [1, {}]",
            cfg.vp_betas.len()
        )));
    }
    let mut a = action.to_vec();
    for &beta in &cfg.vp_betas[..tau] {
        let (keep, add) = ((1.0 - beta).sqrt(), beta.sqrt());
        for x in a.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *x = keep * *x + add * xi;
        }
    }
    Ok(a)
}

/// Adds `N(0, sigma^2 I)` and clips into `[low, high]`.
pub fn exploration_noise<R: Rng + ?Sized>(
    action: &[f64],
    sigma: f64,
    low: &[f64],
    high: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Range(format!("exploration sigma {sigma} is negative")));
    }
    check_len("exploration bounds", action.len(), low.len())?;
    check_len("exploration bounds", action.len(), high.len())?;
    let out: Vec<f64> = action
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&a, (&lo, &hi))| {
            let xi: f64 = rng.sample(StandardNormal);
            (a + sigma * xi).clamp(lo, hi)
        })
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("exploration produced a non-finite action".into()));
    }
    Ok(out)
}
