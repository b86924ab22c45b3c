//! Twin Q networks with target copies.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::diffusion::{join_rows, sample_actions, DiffusionConfig, ScoreNetwork};
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, Adam, Mlp};

/// Which critic reduction supplies the action gradient and policy-side Q.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradSource {
    #[default]
    Min,
    Q1,
    Mean,
}

impl GradSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Self::Min),
            "q1" => Ok(Self::Q1),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Parse(format!("unknown critic reduction '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Min => "min",
            Self::Q1 => "q1",
            Self::Mean => "mean",
        }
    }
}

/// Online critics `q1`, `q2` and their Polyak-averaged targets. Every network
/// maps `[state, action]` to a scalar.
#[derive(Debug)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    state_dim: usize,
    action_dim: usize,
    grad_rows: AtomicU64,
}

impl Clone for CriticPair {
    fn clone(&self) -> Self {
        Self {
            q1: self.q1.clone(),
            q2: self.q2.clone(),
            target1: self.target1.clone(),
            target2: self.target2.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            grad_rows: AtomicU64::new(self.action_gradient_rows()),
        }
    }
}

impl PartialEq for CriticPair {
    fn eq(&self, other: &Self) -> bool {
        self.q1 == other.q1
            && self.q2 == other.q2
            && self.target1 == other.target1
            && self.target2 == other.target2
    }
}

/// Minibatch of n-step windows.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    /// `sum_{i<n} gamma^i r_{t+i+1}`.
    pub reward_sums: Array1<f64>,
    /// State after the last transition of the window.
    pub bootstrap_states: Array2<f64>,
    /// `gamma^n`, or zero when the window ends in a terminal.
    pub discounts: Array1<f64>,
    pub n: usize,
}

impl NStepBatch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.states.nrows();
        check_len("batch actions", b, self.actions.nrows())?;
        check_len("batch rewards", b, self.reward_sums.len())?;
        check_len("batch bootstrap states", b, self.bootstrap_states.nrows())?;
        check_len("batch discounts", b, self.discounts.len())?;
        check_len("bootstrap width", self.states.ncols(), self.bootstrap_states.ncols())?;
        if self.n == 0 {
            return Err(Error::Contract("n-step horizon must be positive".into()));
        }
        Ok(())
    }
}

impl CriticPair {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let q1 = Mlp::new(&dims, activation, rng)?;
        let q2 = Mlp::new(&dims, activation, rng)?;
        Self::from_online(q1, q2, state_dim, action_dim)
    }

    /// Targets start as exact copies of the online networks.
    pub fn from_online(q1: Mlp, q2: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        Self::from_networks(q1.clone(), q2.clone(), q1, q2, state_dim, action_dim)
    }

    pub fn from_networks(
        q1: Mlp,
        q2: Mlp,
        target1: Mlp,
        target2: Mlp,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        for net in [&q1, &q2, &target1, &target2] {
            if net.layer_dims() != q1.layer_dims() {
                return Err(Error::Contract("critic networks must share layer_dims".into()));
            }
        }
        check_len("critic input", state_dim + action_dim, q1.input_dim())?;
        check_len("critic output", 1, q1.output_dim())?;
        Ok(Self {
            q1,
            q2,
            target1,
            target2,
            state_dim,
            action_dim,
            grad_rows: AtomicU64::new(0),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Rows pushed through [`CriticPair::action_gradient`] so far.
    pub fn action_gradient_rows(&self) -> u64 {
        self.grad_rows.load(Ordering::Relaxed)
    }

    pub fn reset_probe(&self) {
        self.grad_rows.store(0, Ordering::Relaxed);
    }

    fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("critic state input", self.state_dim, states.ncols())?;
        check_len("critic action input", self.action_dim, actions.ncols())?;
        join_rows(states, actions)
    }

    /// Online values `(q1, q2)` per row.
    pub fn q_values(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let x = self.inputs(states, actions)?;
        let a = self.q1.forward_batch(x.view())?.column(0).to_owned();
        let b = self.q2.forward_batch(x.view())?.column(0).to_owned();
        Ok((a, b))
    }

    /// Online critic reduced per `source`.
    pub fn q_reduced(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        source: GradSource,
    ) -> Result<Array1<f64>> {
        let (a, b) = self.q_values(states, actions)?;
        Ok(match source {
            GradSource::Min => ndarray::Zip::from(&a).and(&b).map_collect(|x, y| x.min(*y)),
            GradSource::Q1 => a,
            GradSource::Mean => (a + b) * 0.5,
        })
    }

    pub fn target_min(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let x = self.inputs(states, actions)?;
        let a = self.target1.forward_batch(x.view())?;
        let b = self.target2.forward_batch(x.view())?;
        Ok(ndarray::Zip::from(a.column(0))
            .and(b.column(0))
            .map_collect(|x, y| x.min(*y)))
    }

    /// `dQ/da` per row for the chosen reduction. Under `Min` each row takes the
    /// gradient of whichever twin is smaller there (ties go to `q1`).
    pub fn action_gradient(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        source: GradSource,
    ) -> Result<Array2<f64>> {
        let x = self.inputs(states, actions)?;
        let rows = x.nrows();
        self.grad_rows.fetch_add(rows as u64, Ordering::Relaxed);
        let ones = Array2::ones((rows, 1));
        let c1 = self.q1.forward_cached(x.view())?;
        let (_, g1) = self.q1.backward(&c1, ones.view())?;
        let g1 = g1.slice(ndarray::s![.., self.state_dim..]).to_owned();
        if source == GradSource::Q1 {
            return Ok(g1);
        }
        let c2 = self.q2.forward_cached(x.view())?;
        let (_, g2) = self.q2.backward(&c2, ones.view())?;
        let g2 = g2.slice(ndarray::s![.., self.state_dim..]).to_owned();
        match source {
            GradSource::Mean => Ok((g1 + g2) * 0.5),
            _ => {
                let mut out = g1;
                for i in 0..rows {
                    if c2.output()[[i, 0]] < c1.output()[[i, 0]] {
                        out.row_mut(i).assign(&g2.row(i));
                    }
                }
                Ok(out)
            }
        }
    }

    /// `target <- tau * online + (1 - tau) * target` for both twins.
    pub fn polyak_update(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Range(format!("polyak tau {tau} outside (0, 1]")));
        }
        self.target1.lerp_towards(&self.q1, tau)?;
        self.target2.lerp_towards(&self.q2, tau)?;
        Ok(())
    }
}

/// Differentiable action-value used by the actor updates.
pub trait QFunction {
    fn q(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>>;
    fn grad_a(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Online twins viewed through one reduction.
#[derive(Debug, Clone, Copy)]
pub struct ReducedCritic<'a> {
    pub pair: &'a CriticPair,
    pub source: GradSource,
}

impl CriticPair {
    pub fn reduced(&self, source: GradSource) -> ReducedCritic<'_> {
        ReducedCritic { pair: self, source }
    }
}

impl QFunction for ReducedCritic<'_> {
    fn q(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.pair.q_reduced(states, actions, self.source)
    }

    fn grad_a(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.pair.action_gradient(states, actions, self.source)
    }
}

/// `Q(s, a) = -scale * |a - center|^2`, independent of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticQ {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl QuadraticQ {
    pub fn new(center: Vec<f64>, scale: f64) -> Self {
        Self { center, scale }
    }
}

impl QFunction for QuadraticQ {
    fn q(&self, _states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_len("quadratic head width", self.center.len(), actions.ncols())?;
        Ok(actions
            .rows()
            .into_iter()
            .map(|row| {
                -self.scale
                    * row
                        .iter()
                        .zip(&self.center)
                        .map(|(a, c)| (a - c) * (a - c))
                        .sum::<f64>()
            })
            .collect())
    }

    fn grad_a(&self, _states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("quadratic head width", self.center.len(), actions.ncols())?;
        Ok(Array2::from_shape_fn(actions.raw_dim(), |(i, j)| {
            -2.0 * self.scale * (actions[[i, j]] - self.center[j])
        }))
    }
}

/// `y = reward_sum + discount * q_next`, row by row.
pub fn td_targets_from_values(
    reward_sums: &Array1<f64>,
    discounts: &Array1<f64>,
    q_next: &Array1<f64>,
) -> Array1<f64> {
    ndarray::Zip::from(reward_sums)
        .and(discounts)
        .and(q_next)
        .map_collect(|r, d, q| if *d == 0.0 { *r } else { r + d * q })
}

/// n-step clipped double-Q target. Bootstrap actions are drawn from the
/// diffusion policy at every row's bootstrap state (including terminal rows, so
/// the random stream advances by a fixed amount per batch).
pub fn td_target<R: Rng + ?Sized>(
    batch: &NStepBatch,
    critics: &CriticPair,
    score: &ScoreNetwork,
    cfg: &DiffusionConfig,
    rng: &mut R,
) -> Result<Array1<f64>> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract("td_target needs a non-empty batch".into()));
    }
    let next_actions = sample_actions(score, batch.bootstrap_states.view(), cfg, rng)?;
    let q_next = critics.target_min(batch.bootstrap_states.view(), next_actions.view())?;
    let y = td_targets_from_values(&batch.reward_sums, &batch.discounts, &q_next);
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("td target row {i} is {}", y[i])));
    }
    Ok(y)
}

fn mse_step(
    net: &mut Mlp,
    opt: &mut Adam,
    x: ArrayView2<f64>,
    targets: &Array1<f64>,
) -> Result<f64> {
    let cache = net.forward_cached(x)?;
    let q = cache.output().column(0);
    let b = targets.len() as f64;
    let resid = targets - &q;
    let loss = resid.mapv(|r| r * r).sum() / b;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("critic loss is {loss}")));
    }
    let upstream = resid.mapv(|r| -2.0 * r / b).insert_axis(Axis(1));
    let (grads, _) = net.backward(&cache, upstream.view())?;
    opt.step(net, &grads)?;
    Ok(loss)
}

/// One Adam step per online critic on `mean (y - Q_i)^2` with fixed targets.
/// Returns the summed pre-step loss of both critics.
pub fn critic_update(
    critics: &mut CriticPair,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    targets: &Array1<f64>,
    opt1: &mut Adam,
    opt2: &mut Adam,
) -> Result<f64> {
    check_len("critic targets", states.nrows(), targets.len())?;
    let x = critics.inputs(states, actions)?;
    let l1 = mse_step(&mut critics.q1, opt1, x.view(), targets)?;
    let l2 = mse_step(&mut critics.q2, opt2, x.view(), targets)?;
    Ok(l1 + l2)
}
