//! Tabular gridworld with Boltzmann (softmax-of-Q) policy iteration.
//!
//! Moving into a wall or off the grid leaves the agent in place. The reward of
//! a transition is the reward of the cell occupied afterwards. Q here is the
//! standard action-value, without any entropy bonus.

use std::fmt;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Up, Action::Down];

    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "LEFT",
            Action::Right => "RIGHT",
            Action::Up => "UP",
            Action::Down => "DOWN",
        }
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
        }
    }
}

pub const NUM_ACTIONS: usize = 4;

/// An `M x N` grid. Row 0 is the top row of the text map.
#[derive(Debug, Clone, PartialEq)]
pub struct GridworldModel {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    reward: Vec<f64>,
    gamma: f64,
    /// Cell index of each state.
    cells: Vec<usize>,
    /// State index of each cell, `None` for walls.
    state_of: Vec<Option<usize>>,
    successor: Vec<[usize; NUM_ACTIONS]>,
}

/// Single-goal 8x8 world used for the entropy-versus-alpha comparison.
pub const FIG2_MAP: &str = "\
........
........
..###...
....#...
....#..G
........
..#.....
........
";

impl GridworldModel {
    pub fn new(width: usize, height: usize, walls: Vec<bool>, reward: Vec<f64>, gamma: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract("grid must have positive width and height".into()));
        }
        let n = width * height;
        if walls.len() != n || reward.len() != n {
            return Err(Error::Shape {
                context: "grid layout",
                expected: n,
                actual: walls.len().min(reward.len()),
            });
        }
        if !(gamma > 0.0 && gamma < 1.0) && gamma != 0.0 {
            return Err(Error::Range(format!("gamma {gamma} outside [0, 1)")));
        }
        if let Some(r) = reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Range(format!("reward {r} outside [0, 1]")));
        }
        let cells: Vec<usize> = (0..n).filter(|&c| !walls[c]).collect();
        if cells.is_empty() {
            return Err(Error::Contract("grid needs at least one open cell".into()));
        }
        let mut state_of = vec![None; n];
        for (s, &c) in cells.iter().enumerate() {
            state_of[c] = Some(s);
        }
        let successor = cells
            .iter()
            .map(|&c| {
                let (x, y) = ((c % width) as i64, (c / width) as i64);
                Action::ALL.map(|a| {
                    let (dx, dy) = a.delta();
                    let (nx, ny) = (x + dx, y + dy);
                    let inside = nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height;
                    let target = if inside { ny as usize * width + nx as usize } else { c };
                    state_of[target].unwrap_or_else(|| state_of[c].unwrap())
                })
            })
            .collect();
        Ok(Self {
            width,
            height,
            walls,
            reward,
            gamma,
            cells,
            state_of,
            successor,
        })
    }

    /// Parses the text map format: `.` open cell (reward 0), `#` wall,
    /// `G` goal (reward 1). Blank lines are ignored; rows must share a width.
    pub fn parse(text: &str, gamma: f64) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut walls = Vec::new();
        let mut reward = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Parse(format!("map row {y} has a different width")));
            }
            for ch in row.chars() {
                match ch {
                    '.' => {
                        walls.push(false);
                        reward.push(0.0);
                    }
                    '#' => {
                        walls.push(true);
                        reward.push(0.0);
                    }
                    'G' => {
                        walls.push(false);
                        reward.push(1.0);
                    }
                    other => return Err(Error::Parse(format!("unknown map character '{other}'"))),
                }
            }
        }
        Self::new(width, rows.len(), walls, reward, gamma)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_states(&self) -> usize {
        self.cells.len()
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.walls[y * self.width + x]
    }

    /// `(x, y)` of a state.
    pub fn coords(&self, state: usize) -> (usize, usize) {
        let c = self.cells[state];
        (c % self.width, c / self.width)
    }

    pub fn state_at(&self, x: usize, y: usize) -> Option<usize> {
        self.state_of.get(y * self.width + x).copied().flatten()
    }

    pub fn successor(&self, state: usize, action: Action) -> usize {
        self.successor[state][action as usize]
    }

    /// Reward collected on entering `state`.
    pub fn reward_of(&self, state: usize) -> f64 {
        self.reward[self.cells[state]]
    }

    /// States reachable from `start` under some action sequence.
    pub fn reachable_from(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.num_states()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(s) = stack.pop() {
            for next in self.successor[s] {
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen
    }

    pub fn uniform_policy(&self) -> PolicyTable {
        PolicyTable(Array2::from_elem((self.num_states(), NUM_ACTIONS), 0.25))
    }
}

/// Row-stochastic `|S| x |A|` matrix `pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable(Array2<f64>);

impl PolicyTable {
    pub const ROW_TOL: f64 = 1e-12;

    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let table = Self(probs);
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.ncols() != NUM_ACTIONS {
            return Err(Error::Shape {
                context: "policy columns",
                expected: NUM_ACTIONS,
                actual: self.0.ncols(),
            });
        }
        for (s, row) in self.0.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > Self::ROW_TOL {
                return Err(Error::Contract(format!(
                    "policy row {s} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn greedy_action(&self, state: usize) -> usize {
        argmax(self.0.row(state).iter().copied())
    }

    /// Mean over states of `-sum_a pi log pi` (nats).
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = self
            .0
            .rows()
            .into_iter()
            .map(|row| -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum();
        total / self.0.nrows() as f64
    }

    pub fn max_abs_diff(&self, other: &PolicyTable) -> f64 {
        (&self.0 - &other.0).iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

impl fmt::Display for PolicyTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.0.rows() {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.4}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Solves `Q(s,a) = r(s') + gamma * sum_a' pi(a'|s') Q(s',a')` by repeated
/// sweeps until the largest update falls below `tol`.
pub fn policy_eval(model: &GridworldModel, policy: &PolicyTable, tol: f64) -> Result<Array2<f64>> {
    policy.validate()?;
    if policy.probs().nrows() != model.num_states() {
        return Err(Error::Shape {
            context: "policy rows",
            expected: model.num_states(),
            actual: policy.probs().nrows(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::Range(format!("tolerance {tol} must be positive")));
    }
    let n = model.num_states();
    let pi = policy.probs();
    let mut q = Array2::<f64>::zeros((n, NUM_ACTIONS));
    // Contraction factor gamma bounds the sweeps needed.
    let max_sweeps = 1_000_000;
    for _ in 0..max_sweeps {
        let v: Array1<f64> = (&q * pi).sum_axis(Axis(1));
        let mut delta: f64 = 0.0;
        for s in 0..n {
            for a in 0..NUM_ACTIONS {
                let next = model.successor[s][a];
                let updated = model.reward_of(next) + model.gamma * v[next];
                delta = delta.max((updated - q[[s, a]]).abs());
                q[[s, a]] = updated;
            }
        }
        if delta < tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_sweeps,
        last_delta: f64::NAN,
    })
}

/// `pi'(a|s) = exp(alpha Q(s,a)) / sum_a' exp(alpha Q(s,a'))`, row by row with
/// the row maximum subtracted first.
pub fn soft_policy_iter_step(q: &Array2<f64>, alpha: f64) -> Result<PolicyTable> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Range(format!("alpha {alpha} must be a finite non-negative number")));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Q table contains non-finite entries".into()));
    }
    let mut out = q.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (alpha * (v - m)).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    Ok(PolicyTable(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftPiResult {
    pub policy: PolicyTable,
    pub q: Array2<f64>,
    pub iterations: usize,
    pub entropy: f64,
}

/// Alternates evaluation and the Boltzmann update from the uniform policy
/// until the max-norm policy change drops below `tol`.
pub fn run_soft_policy_iteration(
    model: &GridworldModel,
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SoftPiResult> {
    if !(alpha > 0.0) {
        return Err(Error::Range(format!("alpha {alpha} must be positive")));
    }
    let eval_tol = (tol * 1e-3).max(1e-13);
    let mut policy = model.uniform_policy();
    let mut last_delta = f64::INFINITY;
    for it in 1..=max_iters {
        let q = policy_eval(model, &policy, eval_tol)?;
        let next = soft_policy_iter_step(&q, alpha)?;
        last_delta = next.max_abs_diff(&policy);
        policy = next;
        if last_delta < tol {
            let q = policy_eval(model, &policy, eval_tol)?;
            let entropy = policy.mean_entropy();
            return Ok(SoftPiResult {
                policy,
                q,
                iterations: it,
                entropy,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        last_delta,
    })
}

/// Greedy action per state from a Q table.
pub fn greedy_actions(q: &Array2<f64>) -> Vec<usize> {
    q.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
}
