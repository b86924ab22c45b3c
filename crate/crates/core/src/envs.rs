//! Closed-form continuous-control tasks with rewards in `[0, 1]`.
//!
//! | name         | obs                      | action         | reward                         |
//! |--------------|--------------------------|----------------|--------------------------------|
//! | `pendulum`   | `(cos th, sin th, th')`  | torque `[-2,2]`| `(1 + cos th) / 2`             |
//! | `point_mass` | `(px, py, vx, vy)`       | accel `[-1,1]^2`| `exp(-|p - goal|^2)`, goal = 0 |
//! | `two_goal`   | `(x)`                    | velocity `[-1,1]`| `exp(-(|x| - 1)^2 / 0.1)`    |
//!
//! All dynamics are deterministic. Actions outside the box are clipped before
//! they act. Episodes end by time limit only (`truncated`); none of the tasks
//! has terminal states.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};

use crate::error::{check_len, Error, Result};
use crate::LabRng;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    /// Observation dimension.
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub dt: f64,
    pub max_episode_steps: usize,
}

/// Internal simulator state plus the step counter of the current episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub x: Vec<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub terminal: bool,
    /// Time limit reached; not a terminal for bootstrapping purposes.
    pub truncated: bool,
}

pub trait Env: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Draws an initial state from the task's documented distribution.
    fn reset(&self, rng: &mut LabRng) -> EnvState;

    fn observe(&self, state: &EnvState) -> Vec<f64>;

    /// Advances the simulator by one control interval. Must be a pure function
    /// of `(state, action)`.
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome>;

    /// Rebuilds a simulator state from an observation (step counter 0).
    fn inject(&self, _obs: &[f64]) -> Result<EnvState> {
        Err(Error::Capability(format!(
            "environment '{}' does not support state injection",
            self.spec().name
        )))
    }

    fn reset_seeded(&self, seed: u64) -> EnvState {
        self.reset(&mut LabRng::seed_from_u64(seed))
    }
}

fn clip_action(spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>> {
    check_len("env action", spec.action_dim, action.len())?;
    Ok(action
        .iter()
        .zip(spec.action_low.iter().zip(&spec.action_high))
        .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
        .collect())
}

fn finish(spec: &EnvSpec, prev: &EnvState, x: Vec<f64>, reward: f64) -> Result<StepOutcome> {
    let step = prev.step + 1;
    if x.iter().any(|v| !v.is_finite()) || !reward.is_finite() {
        return Err(Error::EnvFault {
            step: step as u64,
            message: format!("{} produced a non-finite state {x:?}", spec.name),
        });
    }
    Ok(StepOutcome {
        state: EnvState { x, step },
        reward,
        terminal: false,
        truncated: step >= spec.max_episode_steps,
    })
}

/// Torque-limited rod pendulum; `theta = 0` is upright.
///
/// `theta'' = 3g/(2l) sin(theta) + 3u/(m l^2) - damping * theta'`, integrated
/// with semi-implicit Euler over `substeps` sub-intervals of each `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum {
    spec: EnvSpec,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub substeps: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                name: "pendulum",
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-2.0],
                action_high: vec![2.0],
                dt: 0.05,
                max_episode_steps: 200,
            },
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            damping: 0.0,
            max_speed: 8.0,
            substeps: 10,
        }
    }
}

impl Pendulum {
    pub fn state(theta: f64, theta_dot: f64) -> EnvState {
        EnvState {
            x: vec![theta, theta_dot],
            step: 0,
        }
    }

    /// Mechanical energy, zero at the hanging rest position.
    pub fn energy(&self, state: &EnvState) -> f64 {
        let (th, om) = (state.x[0], state.x[1]);
        let (m, l, g) = (self.mass, self.length, self.gravity);
        m * l * l / 6.0 * om * om + m * g * l / 2.0 * (1.0 + th.cos())
    }

    pub fn reward(theta: f64) -> f64 {
        (1.0 + theta.cos()) / 2.0
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// `theta ~ U(-pi, pi)`, `theta' ~ U(-1, 1)`.
    fn reset(&self, rng: &mut LabRng) -> EnvState {
        let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let om = rng.random_range(-1.0..1.0);
        Self::state(th, om)
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        vec![state.x[0].cos(), state.x[0].sin(), state.x[1]]
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        let u = clip_action(&self.spec, action)?[0];
        let (mut th, mut om) = (state.x[0], state.x[1]);
        let h = self.spec.dt / self.substeps as f64;
        let (g, l, m) = (self.gravity, self.length, self.mass);
        for _ in 0..self.substeps {
            let acc = 1.5 * g / l * th.sin() + 3.0 * u / (m * l * l) - self.damping * om;
            om = (om + h * acc).clamp(-self.max_speed, self.max_speed);
            th += h * om;
        }
        finish(&self.spec, state, vec![th, om], Self::reward(th))
    }

    fn inject(&self, obs: &[f64]) -> Result<EnvState> {
        check_len("pendulum observation", 3, obs.len())?;
        Ok(Self::state(obs[1].atan2(obs[0]), obs[2]))
    }
}

/// Planar double integrator reaching for the origin.
///
/// Exact zero-order-hold update: `p <- p + v dt + a dt^2 / 2`, `v <- v + a dt`.
/// Initial position `U([-1, 1]^2)`, initial velocity zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    spec: EnvSpec,
    pub goal: [f64; 2],
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                name: "point_mass",
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                dt: 0.1,
                max_episode_steps: 100,
            },
            goal: [0.0, 0.0],
        }
    }
}

impl PointMass {
    pub const INIT_BOX: f64 = 1.0;

    pub fn reward(&self, x: &[f64]) -> f64 {
        let dx = x[0] - self.goal[0];
        let dy = x[1] - self.goal[1];
        (-(dx * dx + dy * dy)).exp()
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut LabRng) -> EnvState {
        let b = Self::INIT_BOX;
        EnvState {
            x: vec![rng.random_range(-b..b), rng.random_range(-b..b), 0.0, 0.0],
            step: 0,
        }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        state.x.clone()
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        let a = clip_action(&self.spec, action)?;
        let dt = self.spec.dt;
        let s = &state.x;
        let x = vec![
            s[0] + s[2] * dt + 0.5 * a[0] * dt * dt,
            s[1] + s[3] * dt + 0.5 * a[1] * dt * dt,
            s[2] + a[0] * dt,
            s[3] + a[1] * dt,
        ];
        let r = self.reward(&x);
        finish(&self.spec, state, x, r)
    }

    fn inject(&self, obs: &[f64]) -> Result<EnvState> {
        check_len("point-mass observation", 4, obs.len())?;
        Ok(EnvState {
            x: obs.to_vec(),
            step: 0,
        })
    }
}

/// One-dimensional position control with equal reward peaks at `x = -1` and
/// `x = +1`. Every episode starts at `x = 0`, so moving either way first is
/// optimal.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoGoalLine {
    spec: EnvSpec,
    pub speed: f64,
    pub width: f64,
    pub limit: f64,
}

impl Default for TwoGoalLine {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                name: "two_goal",
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                dt: 1.0,
                max_episode_steps: 20,
            },
            speed: 0.2,
            width: 0.1,
            limit: 2.0,
        }
    }
}

impl TwoGoalLine {
    pub fn reward(&self, x: f64) -> f64 {
        let d = x.abs() - 1.0;
        (-d * d / self.width).exp()
    }
}

impl Env for TwoGoalLine {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, _rng: &mut LabRng) -> EnvState {
        EnvState {
            x: vec![0.0],
            step: 0,
        }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        state.x.clone()
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        let a = clip_action(&self.spec, action)?[0];
        let x = (state.x[0] + self.speed * a).clamp(-self.limit, self.limit);
        finish(&self.spec, state, vec![x], self.reward(x))
    }

    fn inject(&self, obs: &[f64]) -> Result<EnvState> {
        check_len("two-goal observation", 1, obs.len())?;
        Ok(EnvState {
            x: obs.to_vec(),
            step: 0,
        })
    }
}

pub const ENV_NAMES: [&str; 3] = ["pendulum", "point_mass", "two_goal"];

/// Environment registry.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "pendulum" => Ok(Box::new(Pendulum::default())),
        "point_mass" => Ok(Box::new(PointMass::default())),
        "two_goal" => Ok(Box::new(TwoGoalLine::default())),
        other => Err(Error::Contract(format!(
            "unknown environment '{other}' (known: {})",
            ENV_NAMES.join(", ")
        ))),
    }
}

/// Batched action selection.
pub trait Policy {
    fn act(&self, obs: ArrayView2<f64>, rng: &mut LabRng) -> Result<Array2<f64>>;
}

impl<F> Policy for F
where
    F: Fn(ArrayView2<f64>, &mut LabRng) -> Result<Array2<f64>>,
{
    fn act(&self, obs: ArrayView2<f64>, rng: &mut LabRng) -> Result<Array2<f64>> {
        self(obs, rng)
    }
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

/// Settings for [`mc_q_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub gamma: f64,
    /// Last summed index `T`; the estimate sums `t = 0..=T`.
    pub horizon: usize,
    pub n_rollouts: usize,
    /// Largest admissible neglected tail `gamma^(T+1) / (1 - gamma)`.
    pub tail_bound: f64,
}

impl McConfig {
    /// Shortest horizon whose neglected tail is below `tail_bound`.
    pub fn horizon_for(gamma: f64, tail_bound: f64) -> usize {
        if gamma <= 0.0 {
            return 0;
        }
        let mut t = 0usize;
        while gamma.powi(t as i32 + 1) / (1.0 - gamma) >= tail_bound {
            t += 1;
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `Q(s, a) = E sum_{t=0}^{T} gamma^t r_{t+1}`: take
/// action `a` in state `s`, then follow `policy`. Time limits are ignored;
/// terminals stop accumulation.
pub fn mc_q_estimate(
    env: &dyn Env,
    policy: &dyn Policy,
    obs: &[f64],
    action: &[f64],
    cfg: &McConfig,
    rng: &mut LabRng,
) -> Result<McEstimate> {
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(Error::Range(format!("gamma {} outside [0, 1)", cfg.gamma)));
    }
    let tail = cfg.gamma.powi(cfg.horizon as i32 + 1) / (1.0 - cfg.gamma);
    if tail > cfg.tail_bound {
        return Err(Error::Range(format!(
            "horizon {} leaves tail {tail:e} above bound {:e}",
            cfg.horizon, cfg.tail_bound
        )));
    }
    if cfg.n_rollouts == 0 {
        return Err(Error::Contract("n_rollouts must be positive".into()));
    }
    let start = env.inject(obs)?;
    let n = cfg.n_rollouts;
    let mut states = vec![start; n];
    let mut alive = vec![true; n];
    let mut returns = vec![0.0; n];
    let mut actions: Vec<Vec<f64>> = vec![action.to_vec(); n];
    let mut discount = 1.0;
    for t in 0..=cfg.horizon {
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            let out = env.step(&states[i], &actions[i])?;
            returns[i] += discount * out.reward;
            alive[i] = !out.terminal;
            states[i] = out.state;
        }
        discount *= cfg.gamma;
        if t == cfg.horizon || discount == 0.0 {
            break;
        }
        let obs: Vec<Vec<f64>> = states.iter().map(|s| env.observe(s)).collect();
        let next = policy.act(stack(&obs).view(), rng)?;
        actions = next.rows().into_iter().map(|r| r.to_vec()).collect();
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, stderr })
}

/// Recorded episode, one row per transition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let obs_dim = self.observations.first().map_or(0, |o| o.len());
        let act_dim = self.actions.first().map_or(0, |a| a.len());
        let mut header = vec!["step".to_string()];
        header.extend((0..obs_dim).map(|i| format!("obs{i}")));
        header.extend((0..act_dim).map(|i| format!("act{i}")));
        header.push("reward".into());
        writeln!(out, "{}", header.join(","))?;
        for (t, ((o, a), r)) in self
            .observations
            .iter()
            .zip(&self.actions)
            .zip(&self.rewards)
            .enumerate()
        {
            let mut fields = vec![t.to_string()];
            fields.extend(o.iter().chain(a).map(|v| format!("{v:.16e}")));
            fields.push(format!("{r:.16e}"));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Runs one episode from `reset` to the time limit or a terminal.
pub fn rollout(env: &dyn Env, policy: &dyn Policy, rng: &mut LabRng) -> Result<Trajectory> {
    let mut state = env.reset(rng);
    let mut traj = Trajectory::default();
    loop {
        let obs = env.observe(&state);
        let row = ArrayView2::from_shape((1, obs.len()), &obs).expect("row");
        let action = policy.act(row, rng)?.row(0).to_vec();
        let out = env.step(&state, &action)?;
        traj.observations.push(obs);
        traj.actions.push(action);
        traj.rewards.push(out.reward);
        state = out.state;
        if out.terminal || out.truncated {
            return Ok(traj);
        }
    }
}

/// Energy-pumping swing-up with a linear catch near the top.
pub fn pendulum_oracle_action(env: &Pendulum, obs: &[f64]) -> f64 {
    let (c, s, om) = (obs[0], obs[1], obs[2]);
    let th = s.atan2(c);
    let u_max = env.spec().action_high[0];
    if c > 0.9 {
        // Near upright: PD stabilization.
        (-(10.0 * th + 2.0 * om)).clamp(-u_max, u_max)
    } else {
        let state = Pendulum::state(th, om);
        let target = env.mass * env.gravity * env.length;
        let e = env.energy(&state);
        let push = if e < target { 1.0 } else { -1.0 };
        let dir = if om.abs() < 1e-6 { 1.0 } else { om.signum() };
        u_max * push * dir
    }
}

/// Per-axis saturated bang-bang controller towards the goal, switching on the
/// minimum-time curve `p + v|v| / 2`.
pub fn point_mass_oracle_action(env: &PointMass, obs: &[f64]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let p = obs[k] - env.goal[k];
        let v = obs[2 + k];
        let switch = p + v * v.abs() / 2.0;
        *o = (-20.0 * switch - 2.0 * v).clamp(-1.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn pendulum_reset_is_deterministic() {
        let env = Pendulum::default();
        assert_eq!(env.reset_seeded(42), env.reset_seeded(42));
        assert_ne!(env.reset_seeded(42), env.reset_seeded(43));
    }

    #[test]
    fn point_mass_reset_within_box() {
        let env = PointMass::default();
        let mut rng = LabRng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = env.reset(&mut rng);
            assert!(s.x[0].abs() <= 1.0 && s.x[1].abs() <= 1.0);
            assert_eq!(&s.x[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn two_goal_starts_at_origin() {
        let env = TwoGoalLine::default();
        assert_eq!(env.reset_seeded(9).x, vec![0.0]);
    }

    #[test]
    fn pendulum_hanging_rest_is_equilibrium() {
        let env = Pendulum::default();
        let out = env.step(&Pendulum::state(PI, 0.0), &[0.0]).unwrap();
        assert_eq!(out.state.x[0], PI);
        assert!(out.state.x[1].abs() < 1e-12);
        assert!(out.reward.abs() < 1e-15);
    }

    #[test]
    fn pendulum_upright_reward_is_one() {
        assert_eq!(Pendulum::reward(0.0), 1.0);
    }

    #[test]
    fn pendulum_conserves_energy() {
        let env = Pendulum::default();
        let mut s = Pendulum::state(PI / 2.0, 0.0);
        let e0 = env.energy(&s);
        for _ in 0..1000 {
            s = env.step(&s, &[0.0]).unwrap().state;
        }
        let e1 = env.energy(&s);
        assert!(((e1 - e0) / e0).abs() < 0.01, "{e0} -> {e1}");
    }

    #[test]
    fn step_is_pure_and_clips_actions() {
        let env = PointMass::default();
        let s = EnvState {
            x: vec![0.3, -0.2, 0.1, 0.0],
            step: 4,
        };
        let a = env.step(&s, &[5.0, -0.5]).unwrap();
        let b = env.step(&s, &[1.0, -0.5]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.state.step, 5);
        assert!((a.state.x[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rewards_stay_in_unit_interval() {
        let mut rng = LabRng::seed_from_u64(3);
        for name in ENV_NAMES {
            let env = make_env(name).unwrap();
            let spec = env.spec().clone();
            let mut s = env.reset(&mut rng);
            for _ in 0..500 {
                let a: Vec<f64> = (0..spec.action_dim)
                    .map(|j| rng.random_range(spec.action_low[j] * 1.5..spec.action_high[j] * 1.5))
                    .collect();
                let out = env.step(&s, &a).unwrap();
                assert!((0.0..=1.0).contains(&out.reward), "{name}: {}", out.reward);
                s = if out.truncated { env.reset(&mut rng) } else { out.state };
            }
        }
    }

    #[test]
    fn wrong_action_dim_is_shape_error() {
        let env = PointMass::default();
        assert!(matches!(
            env.step(&env.reset_seeded(0), &[0.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn non_finite_state_is_env_fault() {
        let env = TwoGoalLine::default();
        let s = EnvState {
            x: vec![f64::NAN],
            step: 2,
        };
        match env.step(&s, &[0.0]) {
            Err(Error::EnvFault { step, .. }) => assert_eq!(step, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_env_name() {
        assert!(make_env("cartpole").is_err());
    }

    fn zero_policy(dim: usize) -> impl Fn(ArrayView2<f64>, &mut LabRng) -> Result<Array2<f64>> {
        move |obs: ArrayView2<f64>, _rng: &mut LabRng| Ok(Array2::zeros((obs.nrows(), dim)))
    }

    /// Constant reward one, used to check the geometric-series sum.
    struct Flat(EnvSpec);

    impl Env for Flat {
        fn spec(&self) -> &EnvSpec {
            &self.0
        }
        fn reset(&self, _rng: &mut LabRng) -> EnvState {
            EnvState { x: vec![0.0], step: 0 }
        }
        fn observe(&self, s: &EnvState) -> Vec<f64> {
            s.x.clone()
        }
        fn step(&self, s: &EnvState, _a: &[f64]) -> Result<StepOutcome> {
            finish(&self.0, s, s.x.clone(), 1.0)
        }
        fn inject(&self, obs: &[f64]) -> Result<EnvState> {
            Ok(EnvState { x: obs.to_vec(), step: 0 })
        }
    }

    fn flat_spec() -> EnvSpec {
        EnvSpec {
            name: "flat",
            state_dim: 1,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            dt: 1.0,
            max_episode_steps: 10,
        }
    }

    #[test]
    fn mc_constant_reward_is_geometric_sum() {
        let env = Flat(flat_spec());
        let cfg = McConfig {
            gamma: 0.99,
            horizon: 1000,
            n_rollouts: 2,
            tail_bound: 1.0,
        };
        let mut rng = LabRng::seed_from_u64(0);
        let est = mc_q_estimate(&env, &zero_policy(1), &[0.0], &[0.0], &cfg, &mut rng).unwrap();
        let exact = (1.0 - 0.99f64.powi(1001)) / 0.01;
        assert!((est.mean - exact).abs() < 1e-9);
        assert!((est.mean - 99.996).abs() < 1e-3);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn mc_gamma_zero_is_immediate_reward() {
        let env = TwoGoalLine::default();
        let cfg = McConfig {
            gamma: 0.0,
            horizon: 0,
            n_rollouts: 3,
            tail_bound: 1e-3,
        };
        let mut rng = LabRng::seed_from_u64(0);
        let est = mc_q_estimate(&env, &zero_policy(1), &[0.9], &[0.5], &cfg, &mut rng).unwrap();
        assert_eq!(est.mean, env.reward(1.0));
    }

    #[test]
    fn mc_two_state_chain_matches_hand_sum() {
        // From x = 0.6 the action +1 lands on x = 0.8, where the zero
        // policy parks the agent: Q = sum_{t<=T} gamma^t r(0.8).
        let env = TwoGoalLine::default();
        let gamma: f64 = 0.5;
        let horizon = 40;
        let cfg = McConfig {
            gamma,
            horizon,
            n_rollouts: 1,
            tail_bound: 1e-9,
        };
        let mut rng = LabRng::seed_from_u64(0);
        let est = mc_q_estimate(&env, &zero_policy(1), &[0.6], &[1.0], &cfg, &mut rng).unwrap();
        let r = env.reward(0.8);
        let mut hand = 0.0;
        for t in 0..=horizon {
            hand += gamma.powi(t as i32) * r;
        }
        assert!((est.mean - hand).abs() < 1e-12);
    }

    #[test]
    fn mc_tail_bound_enforced() {
        let env = TwoGoalLine::default();
        let cfg = McConfig {
            gamma: 0.99,
            horizon: 10,
            n_rollouts: 1,
            tail_bound: 1e-3,
        };
        let mut rng = LabRng::seed_from_u64(0);
        assert!(matches!(
            mc_q_estimate(&env, &zero_policy(1), &[0.0], &[0.0], &cfg, &mut rng),
            Err(Error::Range(_))
        ));
        assert_eq!(McConfig::horizon_for(0.99, 1e-3), 1145);
    }

    #[test]
    fn mc_without_injection_is_capability_error() {
        struct Opaque(EnvSpec);
        impl Env for Opaque {
            fn spec(&self) -> &EnvSpec {
                &self.0
            }
            fn reset(&self, _rng: &mut LabRng) -> EnvState {
                EnvState { x: vec![0.0], step: 0 }
            }
            fn observe(&self, s: &EnvState) -> Vec<f64> {
                s.x.clone()
            }
            fn step(&self, s: &EnvState, _a: &[f64]) -> Result<StepOutcome> {
                finish(&self.0, s, s.x.clone(), 0.0)
            }
        }
        let cfg = McConfig {
            gamma: 0.5,
            horizon: 20,
            n_rollouts: 1,
            tail_bound: 1e-3,
        };
        let mut rng = LabRng::seed_from_u64(0);
        let err = mc_q_estimate(&Opaque(flat_spec()), &zero_policy(1), &[0.0], &[0.0], &cfg, &mut rng);
        assert!(matches!(err, Err(Error::Capability(_))));
    }

    #[test]
    fn mc_stderr_shrinks_with_rollouts() {
        let env = TwoGoalLine::default();
        let noisy = |obs: ArrayView2<f64>, rng: &mut LabRng| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_simple_fn((obs.nrows(), 1), || rng.random_range(-1.0..1.0)))
        };
        let cfg = |n| McConfig {
            gamma: 0.9,
            horizon: McConfig::horizon_for(0.9, 1e-3),
            n_rollouts: n,
            tail_bound: 1e-3,
        };
        let mut rng = LabRng::seed_from_u64(5);
        let small = mc_q_estimate(&env, &noisy, &[0.5], &[0.0], &cfg(400), &mut rng).unwrap();
        let large = mc_q_estimate(&env, &noisy, &[0.5], &[0.0], &cfg(6400), &mut rng).unwrap();
        let ratio = small.stderr / large.stderr;
        assert!((ratio - 4.0).abs() < 0.6, "ratio {ratio}");
    }

    #[test]
    fn injection_round_trips_observation() {
        let env = Pendulum::default();
        let s = Pendulum::state(0.7, -1.3);
        let back = env.inject(&env.observe(&s)).unwrap();
        assert!((back.x[0] - 0.7).abs() < 1e-15 && back.x[1] == -1.3);
    }

    #[test]
    fn oracle_policies_solve_their_tasks() {
        let pend = Pendulum::default();
        let pol = |obs: ArrayView2<f64>, _: &mut LabRng| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn((obs.nrows(), 1), |(i, _)| {
                pendulum_oracle_action(&pend, &obs.row(i).to_vec())
            }))
        };
        let mut rng = LabRng::seed_from_u64(2);
        let traj = rollout(&pend, &pol, &mut rng).unwrap();
        let tail: f64 = traj.rewards[150..].iter().sum::<f64>() / 50.0;
        assert!(tail > 0.95, "pendulum oracle tail reward {tail}");

        let pm = PointMass::default();
        let pol = |obs: ArrayView2<f64>, _: &mut LabRng| -> Result<Array2<f64>> {
            let mut out = Array2::zeros((obs.nrows(), 2));
            for i in 0..obs.nrows() {
                let a = point_mass_oracle_action(&pm, &obs.row(i).to_vec());
                out[[i, 0]] = a[0];
                out[[i, 1]] = a[1];
            }
            Ok(out)
        };
        let traj = rollout(&pm, &pol, &mut rng).unwrap();
        assert!(traj.rewards.last().unwrap() > &0.99);
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let env = TwoGoalLine::default();
        let mut rng = LabRng::seed_from_u64(0);
        let traj = rollout(&env, &zero_policy(1), &mut rng).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("step,obs0,act0,reward"));
        assert_eq!(text.lines().count(), 21);
    }
}
