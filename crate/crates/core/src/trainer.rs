//! Off-policy actor-critic loop with three interchangeable actor updates:
//! Q-score matching, a likelihood-ratio diffusion policy gradient, and
//! backpropagation through the sampler unroll.

use std::collections::VecDeque;
use std::fmt;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};

use crate::critic::{critic_update, td_target, CriticPair, GradSource, NStepBatch, QFunction};
use crate::diffusion::{
    exploration_noise, sample_trace, vp_noise, DiffusionConfig, SamplerTrace, ScoreNetwork,
};
use crate::envs::{Env, EnvSpec, Policy};
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, Adam};
use crate::LabRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    /// Sampler states `a^0 .. a^K` behind `action`, row-major; `None` when
    /// the action did not come from the sampler.
    pub chain: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Stored {
    tr: Transition,
    episode: u64,
}

/// FIFO replay memory that assembles n-step windows inside single episodes.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Stored>,
    episode: u64,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Range("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            episode: 0,
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total transitions ever pushed.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i).map(|s| &s.tr)
    }

    /// Appends a transition, evicting the oldest when full. A terminal
    /// transition closes the current episode.
    pub fn push(&mut self, tr: Transition) -> Result<()> {
        if !(0.0..=1.0).contains(&tr.reward) {
            return Err(Error::Range(format!("reward {} outside [0, 1]", tr.reward)));
        }
        check_len("transition next_state", tr.state.len(), tr.next_state.len())?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        let terminal = tr.terminal;
        self.items.push_back(Stored {
            tr,
            episode: self.episode,
        });
        self.pushed += 1;
        if terminal {
            self.episode += 1;
        }
        Ok(())
    }

    /// Marks a non-terminal episode boundary (time limit).
    pub fn end_episode(&mut self) {
        if self.items.back().is_some_and(|s| s.episode == self.episode) {
            self.episode += 1;
        }
    }

    /// Number of transitions used by the window starting at `start`, or `None`
    /// if the window is incomplete.
    fn window_len(&self, start: usize, n: usize) -> Option<usize> {
        let ep = self.items.get(start)?.episode;
        for j in 0..n {
            let s = self.items.get(start + j)?;
            if s.episode != ep {
                return None;
            }
            if s.tr.terminal {
                return Some(j + 1);
            }
        }
        Some(n)
    }

    /// Uniform draw of `count` valid window start indices.
    pub fn sample_starts(&mut self, count: usize, n: usize, rng: &mut LabRng) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::Contract("n-step horizon must be positive".into()));
        }
        if self.items.is_empty() {
            return Err(Error::NotReady("replay buffer is empty".into()));
        }
        let len = self.items.len();
        let mut out = Vec::with_capacity(count);
        let mut fallback: Option<Vec<usize>> = None;
        for _ in 0..count {
            let mut found = None;
            for _ in 0..64 {
                let i = rng.random_range(0..len);
                if self.window_len(i, n).is_some() {
                    found = Some(i);
                    break;
                }
            }
            let i = match found {
                Some(i) => i,
                None => {
                    let valid = fallback.get_or_insert_with(|| {
                        (0..len).filter(|&i| self.window_len(i, n).is_some()).collect()
                    });
                    if valid.is_empty() {
                        return Err(Error::NotReady(format!(
                            "no complete {n}-step window among {len} transitions"
                        )));
                    }
                    valid[rng.random_range(0..valid.len())]
                }
            };
            out.push(i);
        }
        Ok(out)
    }

    /// Assembles the n-step batch for the given window starts.
    pub fn assemble(&self, starts: &[usize], n: usize, gamma: f64) -> Result<NStepBatch> {
        let first = &self
            .items
            .front()
            .ok_or_else(|| Error::NotReady("replay buffer is empty".into()))?
            .tr;
        let (sd, ad, b) = (first.state.len(), first.action.len(), starts.len());
        let mut batch = NStepBatch {
            states: Array2::zeros((b, sd)),
            actions: Array2::zeros((b, ad)),
            reward_sums: Array1::zeros(b),
            bootstrap_states: Array2::zeros((b, sd)),
            discounts: Array1::zeros(b),
            n,
        };
        let gamma_n = gamma.powi(n as i32);
        for (row, &start) in starts.iter().enumerate() {
            let m = self.window_len(start, n).ok_or_else(|| {
                Error::Contract(format!("window at {start} is not a complete {n}-step window"))
            })?;
            let head = &self.items[start].tr;
            batch.states.row_mut(row).assign(&ndarray::aview1(&head.state));
            batch.actions.row_mut(row).assign(&ndarray::aview1(&head.action));
            let mut sum = 0.0;
            let mut disc = 1.0;
            for j in 0..m {
                sum += disc * self.items[start + j].tr.reward;
                disc *= gamma;
            }
            let last = &self.items[start + m - 1].tr;
            batch.reward_sums[row] = sum;
            batch
                .bootstrap_states
                .row_mut(row)
                .assign(&ndarray::aview1(&last.next_state));
            batch.discounts[row] = if last.terminal { 0.0 } else { gamma_n };
        }
        Ok(batch)
    }

    pub fn sample(&mut self, batch_size: usize, n: usize, gamma: f64, rng: &mut LabRng) -> Result<NStepBatch> {
        let starts = self.sample_starts(batch_size, n, rng)?;
        self.assemble(&starts, n, gamma)
    }

    /// States and recorded sampler chains for those starts that carry one.
    /// `None` if no start does.
    pub fn recorded_chains(&self, starts: &[usize], cfg: &DiffusionConfig) -> Result<Option<(Array2<f64>, SamplerTrace)>> {
        let ad = cfg.action_dim();
        let k = cfg.k_steps;
        let rows: Vec<&Transition> = starts
            .iter()
            .map(|&i| &self.items[i].tr)
            .filter(|tr| tr.chain.is_some())
            .collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let sd = rows[0].state.len();
        let mut states = Array2::zeros((rows.len(), sd));
        let mut chain = vec![Array2::zeros((rows.len(), ad)); k + 1];
        for (r, tr) in rows.iter().enumerate() {
            let flat = tr.chain.as_deref().expect("filtered");
            if flat.len() != (k + 1) * ad {
                return Err(Error::Contract(format!(
                    "recorded chain has {} values, expected {}",
                    flat.len(),
                    (k + 1) * ad
                )));
            }
            states.row_mut(r).assign(&ndarray::aview1(&tr.state));
            for (tau, a) in chain.iter_mut().enumerate() {
                a.row_mut(r).assign(&ndarray::aview1(&flat[tau * ad..(tau + 1) * ad]));
            }
        }
        let mut actions = chain[k].clone();
        cfg.clip(&mut actions);
        Ok(Some((states, SamplerTrace { chain, noise: Vec::new(), actions })))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Algo {
    #[default]
    Qsm,
    Dpg,
    Dql,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qsm" => Ok(Self::Qsm),
            "dpg" => Ok(Self::Dpg),
            "dql" => Ok(Self::Dql),
            other => Err(Error::Parse(format!("unknown algo '{other}' (qsm, dpg, dql)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Qsm => "qsm",
            Self::Dpg => "dpg",
            Self::Dql => "dql",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub algo: Algo,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub n_step: usize,
    pub total_env_steps: usize,
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub grad_source: GradSource,
    /// Optional cap on `|grad_a Q|` per row for the score-matching target.
    pub grad_clip: Option<f64>,
    pub k_steps: usize,
    /// Overrides the `1 / K` default.
    pub step_size: Option<f64>,
    /// Overrides the `0.1 * sqrt(step_size)` default.
    pub per_step_noise: Option<f64>,
    pub exploration_sigma: f64,
    pub warm_start: bool,
    /// Rows in the on-policy batch used for the alignment metric.
    pub cosine_rows: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Qsm,
            alpha: 10.0,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            n_step: 3,
            total_env_steps: 10_000,
            warmup_steps: 1000,
            buffer_capacity: 1_000_000,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            eval_every: 5000,
            eval_episodes: 10,
            seed: 0,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            grad_source: GradSource::Min,
            grad_clip: None,
            k_steps: 5,
            step_size: None,
            per_step_noise: None,
            exploration_sigma: 0.1,
            warm_start: false,
            cosine_rows: 1024,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("critic_lr", self.critic_lr),
            ("actor_lr", self.actor_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Range(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("tau", self.tau)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Range(format!("{name} = {v} outside (0, 1)")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("n_step", self.n_step),
            ("buffer_capacity", self.buffer_capacity),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
            ("k_steps", self.k_steps),
            ("cosine_rows", self.cosine_rows),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Range(format!("{name} must be positive")));
            }
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Range("hidden widths must be positive".into()));
        }
        if !(self.exploration_sigma >= 0.0) {
            return Err(Error::Range("exploration_sigma must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Range(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Sampler settings for an environment's action box.
    pub fn diffusion_config(&self, spec: &EnvSpec) -> Result<DiffusionConfig> {
        let mut d = DiffusionConfig::new(self.k_steps, spec.action_low.clone(), spec.action_high.clone())?;
        if let Some(h) = self.step_size {
            d.step_size = h;
            d.per_step_noise = 0.1 * h.sqrt();
        }
        if let Some(s) = self.per_step_noise {
            d.per_step_noise = s;
        }
        d.exploration_sigma = self.exploration_sigma;
        d.warm_start = self.warm_start;
        d.validate()?;
        Ok(d)
    }
}

fn optional(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Squared error `sum_j (psi - alpha grad Q)^2`, averaged over rows, and its
/// parameter gradient. The target is treated as a constant.
pub fn qsm_gradient(
    score: &ScoreNetwork,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    alpha: f64,
    grad_clip: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut target = q.grad_a(states, actions)?;
    for (i, mut row) in target.axis_iter_mut(Axis(0)).enumerate() {
        if row.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("critic action gradient is non-finite at batch row {i}")));
        }
        if let Some(c) = grad_clip {
            let norm = row.dot(&row).sqrt();
            if norm > c {
                row *= c / norm;
            }
        }
    }
    target *= alpha;
    let cache = score.eval_cached(states, actions)?;
    let resid = cache.output() - &target;
    let b = states.nrows() as f64;
    let loss = resid.mapv(|r| r * r).sum() / b;
    let upstream = resid * (2.0 / b);
    let (grads, _) = score.backward(&cache, upstream.view())?;
    Ok((loss, grads))
}

/// Score-matching actor step; returns the pre-step loss.
pub fn qsm_actor_update(
    score: &mut ScoreNetwork,
    opt: &mut Adam,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    noised_actions: ArrayView2<f64>,
    alpha: f64,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let (loss, grads) = qsm_gradient(score, q, states, noised_actions, alpha, grad_clip)?;
    opt.step(score.net_mut(), &grads)?;
    Ok(loss)
}

/// VP-noises each row of `actions` with its own `tau ~ U{1..K}`.
pub fn vp_noise_batch(actions: ArrayView2<f64>, cfg: &DiffusionConfig, rng: &mut LabRng) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(actions.raw_dim());
    for (i, row) in actions.rows().into_iter().enumerate() {
        let tau = rng.random_range(1..=cfg.k_steps);
        let noised = vp_noise(row.as_slice().expect("contiguous"), tau, cfg, rng)?;
        out.row_mut(i).assign(&ndarray::aview1(&noised));
    }
    Ok(out)
}

/// Gradient of the negated likelihood-ratio surrogate
/// `mean_b Q(s, a^K) sum_tau log N(a^tau; a^{tau-1} + h psi(s, a^{tau-1}), sigma^2)`
/// on recorded chains. Returns the surrogate value and the descent direction.
pub fn dpg_gradient(
    score: &ScoreNetwork,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    trace: &SamplerTrace,
    cfg: &DiffusionConfig,
) -> Result<(f64, Vec<f64>)> {
    if trace.chain.len() != cfg.k_steps + 1 {
        return Err(Error::Contract(format!(
            "policy gradient needs the full internal chain: {} of {} states recorded",
            trace.chain.len(),
            cfg.k_steps + 1
        )));
    }
    let sigma2 = cfg.per_step_noise * cfg.per_step_noise;
    if !(sigma2 > 0.0) {
        return Err(Error::Contract("policy gradient needs per_step_noise > 0".into()));
    }
    let h = cfg.step_size;
    let b = states.nrows() as f64;
    let weights = q.q(states, trace.actions.view())?;
    let mut grads = vec![0.0; score.net().num_params()];
    let mut log_prob = Array1::<f64>::zeros(states.nrows());
    for tau in 1..=cfg.k_steps {
        let (prev, next) = (&trace.chain[tau - 1], &trace.chain[tau]);
        let cache = score.eval_cached(states, prev.view())?;
        let resid = next - prev - &(cache.output() * h);
        log_prob -= &(resid.mapv(|r| r * r).sum_axis(Axis(1)) / (2.0 * sigma2));
        // d/dpsi log N = h * resid / sigma^2; ascent on Q * log pi.
        let mut upstream = resid * (h / sigma2);
        for (mut row, w) in upstream.axis_iter_mut(Axis(0)).zip(weights.iter()) {
            row *= -w / b;
        }
        let (g, _) = score.backward(&cache, upstream.view())?;
        for (acc, x) in grads.iter_mut().zip(g) {
            *acc += x;
        }
    }
    let surrogate = (&weights * &log_prob).sum() / b;
    Ok((surrogate, grads))
}

pub fn dpg_actor_update(
    score: &mut ScoreNetwork,
    opt: &mut Adam,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    trace: &SamplerTrace,
    cfg: &DiffusionConfig,
) -> Result<f64> {
    let (surrogate, grads) = dpg_gradient(score, q, states, trace, cfg)?;
    opt.step(score.net_mut(), &grads)?;
    Ok(surrogate)
}

/// Gradient of `-mean Q(s, clip(a^K))` through every sampler step, with the
/// innovations in `trace` held fixed.
pub fn dql_gradient(
    score: &ScoreNetwork,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    trace: &SamplerTrace,
    cfg: &DiffusionConfig,
) -> Result<(f64, Vec<f64>)> {
    unrolled_gradient(score, q, states, trace, cfg, true)
}

fn unrolled_gradient(
    score: &ScoreNetwork,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    trace: &SamplerTrace,
    cfg: &DiffusionConfig,
    mask_clipped: bool,
) -> Result<(f64, Vec<f64>)> {
    if trace.chain.len() != cfg.k_steps + 1 {
        return Err(Error::Contract("unrolled gradient needs the full internal chain".into()));
    }
    let b = states.nrows() as f64;
    let h = cfg.step_size;
    let loss = -q.q(states, trace.actions.view())?.sum() / b;
    let mut g = q.grad_a(states, trace.actions.view())? * (-1.0 / b);
    if mask_clipped {
        g *= &trace.inside_bounds(cfg);
    }
    let mut grads = vec![0.0; score.net().num_params()];
    for tau in (1..=cfg.k_steps).rev() {
        let cache = score.eval_cached(states, trace.chain[tau - 1].view())?;
        let upstream = &g * h;
        let (gp, ga) = score.backward(&cache, upstream.view())?;
        for (acc, x) in grads.iter_mut().zip(gp) {
            *acc += x;
        }
        g += &ga;
    }
    Ok((loss, grads))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Backprop-through-sampler step. Returns the loss and the unroll sensitivity
/// norm: the same backward pass with the output clip treated as the identity,
/// so saturated rows still report how strongly the chain responds to `phi`.
/// The optimizer step itself uses the clipped gradient.
pub fn dql_actor_update(
    score: &mut ScoreNetwork,
    opt: &mut Adam,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    cfg: &DiffusionConfig,
    rng: &mut LabRng,
) -> Result<(f64, f64)> {
    let trace = sample_trace(score, states, None, cfg, rng)?;
    let (loss, grads) = unrolled_gradient(score, q, states, &trace, cfg, true)?;
    let (_, through) = unrolled_gradient(score, q, states, &trace, cfg, false)?;
    let norm = l2(&through);
    if !norm.is_finite() || !l2(&grads).is_finite() {
        return Err(Error::Numeric(format!(
            "unrolled gradient norm is {norm} at K = {}",
            cfg.k_steps
        )));
    }
    opt.step(score.net_mut(), &grads)?;
    Ok((loss, norm))
}

/// Mean cosine similarity between `psi(s, a)` and `grad_a Q(s, a)` over rows
/// where `|grad_a Q| > 1e-3`. `None` if no row qualifies.
pub fn alignment(
    score: &ScoreNetwork,
    q: &dyn QFunction,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
) -> Result<Option<f64>> {
    let psi = score.eval_batch(states, actions)?;
    let grad = q.grad_a(states, actions)?;
    let mut total = 0.0;
    let mut rows = 0usize;
    for (p, g) in psi.rows().into_iter().zip(grad.rows()) {
        let gn = g.dot(&g).sqrt();
        if gn <= 1e-3 {
            continue;
        }
        let pn = p.dot(&p).sqrt();
        total += if pn > 0.0 { p.dot(&g) / (pn * gn) } else { 0.0 };
        rows += 1;
    }
    Ok((rows > 0).then(|| total / rows as f64))
}

/// The diffusion sampler viewed as a [`Policy`] (no exploration noise).
pub struct DiffusionPolicy<'a> {
    pub score: &'a ScoreNetwork,
    pub cfg: &'a DiffusionConfig,
}

impl Policy for DiffusionPolicy<'_> {
    fn act(&self, obs: ArrayView2<f64>, rng: &mut LabRng) -> Result<Array2<f64>> {
        Ok(sample_trace(self.score, obs, None, self.cfg, rng)?.actions)
    }
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub env_step: u64,
    /// Mean undiscounted evaluation return.
    pub episode_return: f64,
    /// Mean summed twin loss since the previous record.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub mean_cosine: Option<f64>,
    /// Median unrolled gradient norm since the previous record (`dql` only).
    pub dql_unroll_grad_norm: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// Everything except wall-clock time, for determinism checks.
    pub fn same_values(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                let mut b = b.clone();
                b.wall_time = a.wall_time;
                *a == b
            })
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub log: MetricsLog,
    pub score: ScoreNetwork,
    pub critics: CriticPair,
    pub diffusion: DiffusionConfig,
    /// Every unrolled gradient norm recorded by `dql` updates.
    pub unroll_norms: Vec<f64>,
    /// Observations visited by the last evaluation.
    pub eval_states: Vec<Vec<f64>>,
}

/// Called after every evaluation with the fresh record and current networks.
pub type EvalHook<'a> = dyn FnMut(&MetricRecord, &ScoreNetwork, &CriticPair) -> Result<()> + 'a;

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row")
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

/// Evaluation episodes without exploration noise. Returns the mean return and
/// the visited observations.
pub fn evaluate(
    env: &dyn Env,
    score: &ScoreNetwork,
    cfg: &DiffusionConfig,
    episodes: usize,
    rng: &mut LabRng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut visited = Vec::new();
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        let mut prev: Option<Vec<f64>> = None;
        loop {
            let obs = env.observe(&state);
            let trace = sample_trace(score, row(&obs), prev.as_deref().map(row), cfg, rng)?;
            let action = trace.actions.row(0).to_vec();
            let out = env.step(&state, &action)?;
            total += out.reward;
            visited.push(obs);
            prev = Some(action);
            state = out.state;
            if out.terminal || out.truncated {
                break;
            }
        }
    }
    Ok((total / episodes as f64, visited))
}

/// Alignment metric on `rows` states drawn from `visited`, with actions drawn
/// from the current policy.
pub fn on_policy_alignment(
    score: &ScoreNetwork,
    q: &dyn QFunction,
    visited: &[Vec<f64>],
    rows: usize,
    cfg: &DiffusionConfig,
    rng: &mut LabRng,
) -> Result<Option<f64>> {
    if visited.is_empty() {
        return Ok(None);
    }
    let picked: Vec<Vec<f64>> = (0..rows)
        .map(|_| visited[rng.random_range(0..visited.len())].clone())
        .collect();
    let states = stack(&picked);
    let actions = sample_trace(score, states.view(), None, cfg, rng)?.actions;
    alignment(score, q, states.view(), actions.view())
}

fn env_fault(step: usize, e: Error) -> Error {
    match e {
        Error::EnvFault { .. } => e,
        other => Error::EnvFault {
            step: step as u64,
            message: other.to_string(),
        },
    }
}

pub fn train(env: &dyn Env, cfg: &TrainerConfig) -> Result<TrainRun> {
    train_with(env, cfg, &mut |_, _, _| Ok(()))
}

/// Runs the full loop. The training stream is stream 0 of `cfg.seed`;
/// evaluation `i` uses stream `i + 1`, so evaluations never perturb training.
pub fn train_with(env: &dyn Env, cfg: &TrainerConfig, on_eval: &mut EvalHook<'_>) -> Result<TrainRun> {
    cfg.validate()?;
    let spec = env.spec().clone();
    let dcfg = cfg.diffusion_config(&spec)?;
    let mut rng = LabRng::seed_from_u64(cfg.seed);
    let (sd, ad) = (spec.state_dim, spec.action_dim);
    let mut score = ScoreNetwork::new(sd, ad, &cfg.hidden, cfg.activation, &mut rng)?;
    let mut critics = CriticPair::new(sd, ad, &cfg.hidden, cfg.activation, &mut rng)?;
    let mut actor_opt = Adam::for_net(score.net(), cfg.actor_lr);
    let mut opt1 = Adam::for_net(&critics.q1, cfg.critic_lr);
    let mut opt2 = Adam::for_net(&critics.q2, cfg.critic_lr);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let started = Instant::now();

    let mut log = MetricsLog::default();
    let mut unroll_norms = Vec::new();
    let mut eval_states = Vec::new();
    let (mut critic_losses, mut actor_losses, mut recent_norms) = (Vec::new(), Vec::new(), Vec::new());

    let mut state = env.reset(&mut rng);
    let mut prev_action: Option<Vec<f64>> = None;
    for t in 0..cfg.total_env_steps {
        let obs = env.observe(&state);
        let (action, chain) = if t < cfg.warmup_steps {
            let a = (0..ad)
                .map(|j| rng.random_range(spec.action_low[j]..=spec.action_high[j]))
                .collect();
            (a, None)
        } else {
            let trace = sample_trace(&score, row(&obs), prev_action.as_deref().map(row), &dcfg, &mut rng)?;
            let a = exploration_noise(
                trace.actions.row(0).as_slice().expect("contiguous"),
                dcfg.exploration_sigma,
                &dcfg.action_low,
                &dcfg.action_high,
                &mut rng,
            )?;
            let chain = (cfg.algo == Algo::Dpg).then(|| trace.chain.iter().flat_map(|c| c.iter().copied()).collect());
            (a, chain)
        };
        let out = env.step(&state, &action).map_err(|e| env_fault(t + 1, e))?;
        buffer.push(Transition {
            state: obs,
            action: action.clone(),
            reward: out.reward,
            next_state: env.observe(&out.state),
            terminal: out.terminal,
            chain,
        })?;
        if out.terminal || out.truncated {
            buffer.end_episode();
            state = env.reset(&mut rng);
            prev_action = None;
        } else {
            state = out.state;
            prev_action = Some(action);
        }

        if t >= cfg.warmup_steps {
            match buffer
                .sample_starts(cfg.batch_size, cfg.n_step, &mut rng)
                .and_then(|starts| Ok((buffer.assemble(&starts, cfg.n_step, cfg.gamma)?, starts)))
            {
                Ok((batch, starts)) => {
                    let y = td_target(&batch, &critics, &score, &dcfg, &mut rng)?;
                    let closs = critic_update(
                        &mut critics,
                        batch.states.view(),
                        batch.actions.view(),
                        &y,
                        &mut opt1,
                        &mut opt2,
                    )?;
                    critic_losses.push(closs);
                    let q = critics.reduced(cfg.grad_source);
                    let aloss = match cfg.algo {
                        Algo::Qsm => {
                            let noised = vp_noise_batch(batch.actions.view(), &dcfg, &mut rng)?;
                            qsm_actor_update(
                                &mut score,
                                &mut actor_opt,
                                &q,
                                batch.states.view(),
                                noised.view(),
                                cfg.alpha,
                                cfg.grad_clip,
                            )
                            .map(Some)?
                        }
                        Algo::Dpg => match buffer.recorded_chains(&starts, &dcfg)? {
                            Some((states, trace)) => {
                                Some(dpg_actor_update(&mut score, &mut actor_opt, &q, states.view(), &trace, &dcfg)?)
                            }
                            None => None,
                        },
                        Algo::Dql => {
                            let (loss, norm) = dql_actor_update(
                                &mut score,
                                &mut actor_opt,
                                &q,
                                batch.states.view(),
                                &dcfg,
                                &mut rng,
                            )?;
                            unroll_norms.push(norm);
                            recent_norms.push(norm);
                            Some(loss)
                        }
                    };
                    actor_losses.extend(aloss);
                    critics.polyak_update(cfg.tau)?;
                }
                Err(Error::NotReady(_)) => {}
                Err(e) => return Err(e),
            }
        }

        let done = t + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_env_steps {
            let mut eval_rng = LabRng::seed_from_u64(cfg.seed);
            eval_rng.set_stream(log.len() as u64 + 1);
            let (ret, visited) = evaluate(env, &score, &dcfg, cfg.eval_episodes, &mut eval_rng)
                .map_err(|e| env_fault(done, e))?;
            let q = critics.reduced(cfg.grad_source);
            let cosine = on_policy_alignment(&score, &q, &visited, cfg.cosine_rows, &dcfg, &mut eval_rng)?;
            let record = MetricRecord {
                env_step: done as u64,
                episode_return: ret,
                critic_loss: mean(&critic_losses).and_then(optional),
                actor_loss: mean(&actor_losses).and_then(optional),
                mean_cosine: cosine.and_then(optional),
                dql_unroll_grad_norm: median(&mut recent_norms),
                wall_time: started.elapsed().as_secs_f64(),
            };
            critic_losses.clear();
            actor_losses.clear();
            recent_norms.clear();
            on_eval(&record, &score, &critics)?;
            log.records.push(record);
            eval_states = visited;
        }
    }
    score.reset_eval_count();
    critics.reset_probe();
    Ok(TrainRun {
        log,
        score,
        critics,
        diffusion: dcfg,
        unroll_norms,
        eval_states,
    })
}
