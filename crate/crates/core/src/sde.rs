//! Euler-Maruyama integration of the joint state/action SDE
//!
//! ```text
//! ds = F(s, a) dt + dW_s,   Cov(dW_s) = C_s(s, a) dt
//! da = psi(s, a) dt + dW_a, Cov(dW_a) = C_a(s, a) dt
//! ```
//!
//! and an empirical check that score-driven Langevin action dynamics settle on
//! the Boltzmann law `exp(alpha Q(a)) / Z`.
//!
//! Covariances are given as symmetric PSD matrices; their square roots come
//! from a symmetric eigendecomposition.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::LabRng;

pub type DriftFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type CovFn = Box<dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Norm beyond which a trajectory is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

pub struct JointSde {
    pub state_drift: DriftFn,
    pub action_drift: DriftFn,
    pub state_cov: CovFn,
    pub action_cov: CovFn,
    pub s0: Vec<f64>,
    pub a0: Vec<f64>,
}

impl JointSde {
    /// Action-only dynamics with constant covariance (empty state).
    pub fn action_only(
        action_drift: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        action_cov: DMatrix<f64>,
        a0: Vec<f64>,
    ) -> Self {
        Self {
            state_drift: Box::new(|_, _| Vec::new()),
            action_drift: Box::new(move |_, a| action_drift(a)),
            state_cov: Box::new(|_, _| DMatrix::zeros(0, 0)),
            action_cov: Box::new(move |_, _| action_cov.clone()),
            s0: Vec::new(),
            a0,
        }
    }
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape {
            context: "covariance must be square",
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Contract("covariance matrix is not symmetric".into()));
    }
    let eig = m.clone().symmetric_eigen();
    if let Some(l) = eig.eigenvalues.iter().find(|l| **l < -1e-12 * scale) {
        return Err(Error::Contract(format!("covariance has negative eigenvalue {l}")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// How the action row is discretized relative to the state row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSubsteps {
    /// Same step for state and action.
    Single,
    /// `K` action substeps of length `dt / K` per state step, with the state
    /// frozen during the substeps.
    TwoTimescale(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl SdePath {
    pub fn final_action(&self) -> &[f64] {
        self.actions.last().expect("path has at least the initial point")
    }
}

fn noise_term(cov: &DMatrix<f64>, dim: usize, scale: f64, rng: &mut LabRng) -> Result<Vec<f64>> {
    if dim == 0 {
        return Ok(Vec::new());
    }
    check_len("covariance size", dim, cov.nrows())?;
    let xi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    if cov.iter().all(|c| *c == 0.0) {
        return Ok(vec![0.0; dim]);
    }
    let root = psd_sqrt(cov)?;
    Ok((root * xi * scale).iter().copied().collect())
}

fn check_finite(v: &[f64], what: &str, time: f64) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        Err(Error::Numeric(format!("{what} became non-finite at t = {time}")))
    } else {
        Ok(())
    }
}

/// Integrates the joint SDE on `[0, t_end]` with `round(t_end / dt)` steps.
/// Each step draws the state noise before the action noise.
pub fn euler_maruyama(
    sde: &JointSde,
    dt: f64,
    t_end: f64,
    mode: ActionSubsteps,
    rng: &mut LabRng,
) -> Result<SdePath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Range(format!("dt {dt} must be positive")));
    }
    if !(t_end >= dt) {
        return Err(Error::Range(format!("horizon {t_end} shorter than dt {dt}")));
    }
    let substeps = match mode {
        ActionSubsteps::Single => 1,
        ActionSubsteps::TwoTimescale(0) => {
            return Err(Error::Range("two-timescale mode needs K >= 1".into()))
        }
        ActionSubsteps::TwoTimescale(k) => k,
    };
    let steps = (t_end / dt).round() as usize;
    let (ds, da) = (sde.s0.len(), sde.a0.len());
    let mut path = SdePath {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        actions: Vec::with_capacity(steps + 1),
    };
    let (mut s, mut a) = (sde.s0.clone(), sde.a0.clone());
    path.times.push(0.0);
    path.states.push(s.clone());
    path.actions.push(a.clone());
    let h = dt / substeps as f64;
    for n in 1..=steps {
        let t = n as f64 * dt;
        let f = (sde.state_drift)(&s, &a);
        check_len("state drift", ds, f.len())?;
        let zs = noise_term(&(sde.state_cov)(&s, &a), ds, dt.sqrt(), rng)?;
        let next_s: Vec<f64> = (0..ds).map(|i| s[i] + dt * f[i] + zs[i]).collect();
        for _ in 0..substeps {
            let psi = (sde.action_drift)(&s, &a);
            check_len("action drift", da, psi.len())?;
            let za = noise_term(&(sde.action_cov)(&s, &a), da, h.sqrt(), rng)?;
            for i in 0..da {
                a[i] += h * psi[i] + za[i];
            }
        }
        s = next_s;
        check_finite(&s, "state", t)?;
        check_finite(&a, "action", t)?;
        path.times.push(t);
        path.states.push(s.clone());
        path.actions.push(a.clone());
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinConfig {
    pub alpha: f64,
    pub dt: f64,
    pub burn_in: usize,
    /// Post-burn-in steps recorded per chain.
    pub n_samples: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub init: Vec<f64>,
    pub hist_bins: usize,
    pub hist_range: (f64, f64),
}

/// Normalized histogram of one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Total variation distance to a reference density, integrated over the
    /// histogram support by the midpoint rule.
    pub fn total_variation(&self, density: impl Fn(f64) -> f64) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.density)
            .map(|(w, d)| (d - density(0.5 * (w[0] + w[1]))).abs() * (w[1] - w[0]))
            .sum::<f64>()
            / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinSummary {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` covariance.
    pub covariance: Vec<Vec<f64>>,
    /// Marginal of coordinate 0.
    pub histogram: Histogram,
    pub samples: usize,
}

impl LangevinSummary {
    pub fn variances(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.covariance[i][i]).collect()
    }
}

/// Runs `da = alpha grad_q(a) dt + sqrt(2 dt) xi` on independent chains and
/// summarizes the pooled post-burn-in samples. Chain `c` uses random stream
/// `c` of the seed, so chains can run in any order or in parallel.
pub fn langevin_stationary_check(
    grad_q: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    cfg: &LangevinConfig,
) -> Result<LangevinSummary> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::Range(format!("alpha {} must be positive", cfg.alpha)));
    }
    if !(cfg.dt > 0.0) || cfg.n_samples == 0 || cfg.n_chains == 0 || cfg.hist_bins == 0 {
        return Err(Error::Range("dt, n_samples, n_chains and hist_bins must be positive".into()));
    }
    let (lo, hi) = cfg.hist_range;
    if !(lo < hi) {
        return Err(Error::Range("histogram range needs lo < hi".into()));
    }
    let dim = cfg.init.len();
    if dim == 0 {
        return Err(Error::Contract("action dimension must be positive".into()));
    }
    let noise = (2.0 * cfg.dt).sqrt();
    let mut sum = vec![0.0; dim];
    let mut outer = vec![vec![0.0; dim]; dim];
    let mut counts = vec![0u64; cfg.hist_bins];
    let width = (hi - lo) / cfg.hist_bins as f64;
    for chain in 0..cfg.n_chains {
        let mut rng = LabRng::seed_from_u64(cfg.seed);
        rng.set_stream(chain as u64);
        let mut a = cfg.init.clone();
        for step in 0..cfg.burn_in + cfg.n_samples {
            let g = grad_q(&a);
            check_len("grad_q output", dim, g.len())?;
            for i in 0..dim {
                let xi: f64 = rng.sample(StandardNormal);
                a[i] += cfg.alpha * g[i] * cfg.dt + noise * xi;
            }
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm <= DIVERGENCE_BOUND) {
                return Err(Error::Numeric(format!(
                    "Langevin chain {chain} diverged at step {step} (|a| = {norm:e})"
                )));
            }
            if step >= cfg.burn_in {
                for i in 0..dim {
                    sum[i] += a[i];
                    for j in 0..dim {
                        outer[i][j] += a[i] * a[j];
                    }
                }
                let bin = ((a[0] - lo) / width).floor();
                if bin >= 0.0 && (bin as usize) < cfg.hist_bins {
                    counts[bin as usize] += 1;
                }
            }
        }
    }
    let n = (cfg.n_samples * cfg.n_chains) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let covariance = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| (outer[i][j] - n * mean[i] * mean[j]) / (n - 1.0))
                .collect()
        })
        .collect();
    let edges = (0..=cfg.hist_bins).map(|b| lo + b as f64 * width).collect();
    let density = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    Ok(LangevinSummary {
        mean,
        covariance,
        histogram: Histogram { edges, density },
        samples: n as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(dim: usize, var: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(dim, dim, var)
    }

    #[test]
    fn zero_drift_zero_noise_is_constant() {
        let sde = JointSde {
            state_drift: Box::new(|_, _| vec![0.0, 0.0]),
            action_drift: Box::new(|_, _| vec![0.0]),
            state_cov: Box::new(|_, _| iso(2, 0.0)),
            action_cov: Box::new(|_, _| iso(1, 0.0)),
            s0: vec![1.0, -2.0],
            a0: vec![0.5],
        };
        let mut rng = LabRng::seed_from_u64(0);
        let path = euler_maruyama(&sde, 0.1, 1.0, ActionSubsteps::Single, &mut rng).unwrap();
        assert_eq!(path.times.len(), 11);
        assert!(path.states.iter().all(|s| s == &vec![1.0, -2.0]));
        assert!(path.actions.iter().all(|a| a == &vec![0.5]));
    }

    fn decay_error(dt: f64) -> f64 {
        let sde = JointSde::action_only(|a| vec![-a[0]], iso(1, 0.0), vec![1.0]);
        let mut rng = LabRng::seed_from_u64(0);
        let path = euler_maruyama(&sde, dt, 1.0, ActionSubsteps::Single, &mut rng).unwrap();
        (path.final_action()[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn exponential_decay_and_first_order_convergence() {
        assert!(decay_error(1e-3) < 2e-3);
        let ratio = decay_error(2e-3) / decay_error(1e-3);
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn two_timescale_mode_matches_fine_single_steps() {
        // With the state frozen and no noise, K substeps of dt/K are exactly
        // single steps of dt/K on the action row.
        let coarse = JointSde::action_only(|a| vec![-a[0]], iso(1, 0.0), vec![1.0]);
        let mut rng = LabRng::seed_from_u64(0);
        let two = euler_maruyama(&coarse, 0.1, 1.0, ActionSubsteps::TwoTimescale(4), &mut rng).unwrap();
        let fine = euler_maruyama(&coarse, 0.025, 1.0, ActionSubsteps::Single, &mut rng).unwrap();
        assert!((two.final_action()[0] - fine.final_action()[0]).abs() < 1e-14);
        assert_eq!(two.times.len(), 11);
    }

    #[test]
    fn ou_stationary_variance() {
        // da = -a dt + sqrt(2) dB has stationary variance 1; four independent
        // coordinates pool the statistics.
        let sde = JointSde::action_only(|a| a.iter().map(|x| -x).collect(), iso(4, 2.0), vec![0.0; 4]);
        let mut rng = LabRng::seed_from_u64(31);
        let path = euler_maruyama(&sde, 0.01, 1e4, ActionSubsteps::Single, &mut rng).unwrap();
        assert_eq!(path.times.len(), 1_000_001);
        let burn = 1000;
        let xs: Vec<f64> = path.actions[burn..].iter().flatten().copied().collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn paths_are_seed_deterministic() {
        let make = || JointSde::action_only(|a| vec![-a[0]], iso(1, 1.0), vec![0.3]);
        let run = |seed| {
            let mut rng = LabRng::seed_from_u64(seed);
            euler_maruyama(&make(), 0.01, 1.0, ActionSubsteps::Single, &mut rng).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn nonfinite_path_reports_time() {
        let sde = JointSde::action_only(|a| vec![a[0] * 1e200], iso(1, 0.0), vec![1.0]);
        let mut rng = LabRng::seed_from_u64(0);
        let err = euler_maruyama(&sde, 0.5, 5.0, ActionSubsteps::Single, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("t =")), "{err:?}");
    }

    #[test]
    fn invalid_steps_rejected() {
        let sde = JointSde::action_only(|_| vec![0.0], iso(1, 0.0), vec![0.0]);
        let mut rng = LabRng::seed_from_u64(0);
        assert!(euler_maruyama(&sde, 0.0, 1.0, ActionSubsteps::Single, &mut rng).is_err());
        assert!(euler_maruyama(&sde, 0.5, 0.1, ActionSubsteps::Single, &mut rng).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&m).unwrap();
        assert!((&r * &r - &m).amax() < 1e-12);
        let d = psd_sqrt(&iso(3, 4.0)).unwrap();
        assert!((d - iso(3, 2.0)).amax() < 1e-15);
        assert!(psd_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(psd_sqrt(&DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0])).is_err());
    }

    #[test]
    fn brownian_variance_grows_with_slope_two() {
        let sde = || JointSde::action_only(|_| vec![0.0, 0.0], iso(2, 2.0), vec![0.0, 0.0]);
        let runs = 4000;
        let mut rng = LabRng::seed_from_u64(77);
        let mut at1 = Vec::new();
        let mut at2 = Vec::new();
        for _ in 0..runs {
            let path = euler_maruyama(&sde(), 0.05, 2.0, ActionSubsteps::Single, &mut rng).unwrap();
            at1.extend_from_slice(&path.actions[20]);
            at2.extend_from_slice(&path.actions[40]);
        }
        let var = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let slope = (var(&at2) - var(&at1)) / 1.0;
        let through_origin = var(&at2) / 2.0;
        assert!((through_origin / 2.0 - 1.0).abs() < 0.05, "{through_origin}");
        assert!((slope / 2.0 - 1.0).abs() < 0.1, "{slope}");
    }

    fn quadratic_cfg(alpha: f64, init: Vec<f64>) -> LangevinConfig {
        LangevinConfig {
            alpha,
            dt: 2e-3,
            burn_in: 5_000,
            n_samples: 100_000,
            n_chains: 32,
            seed: 3,
            init,
            hist_bins: 40,
            hist_range: (-2.0, 2.0),
        }
    }

    #[test]
    fn quadratic_q_gives_gaussian_with_variance_inverse_alpha() {
        let grad = |a: &[f64]| a.iter().map(|x| -x).collect::<Vec<_>>();
        let s = langevin_stationary_check(&grad, &quadratic_cfg(4.0, vec![0.0, 0.0])).unwrap();
        for v in s.variances() {
            assert!((v / 0.25 - 1.0).abs() < 0.05, "var {v}");
        }
        let sd = 0.5f64;
        let tv = s.histogram.total_variation(|x| {
            (-x * x / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        });
        assert!(tv < 0.05, "tv {tv}");
    }

    #[test]
    fn doubling_alpha_halves_variance() {
        let grad = |a: &[f64]| vec![-a[0]];
        let v2 = langevin_stationary_check(&grad, &quadratic_cfg(2.0, vec![0.0])).unwrap().variances()[0];
        let v4 = langevin_stationary_check(&grad, &quadratic_cfg(4.0, vec![0.0])).unwrap().variances()[0];
        assert!((v2 / 0.5 - 1.0).abs() < 0.05, "{v2}");
        assert!((v2 / v4 / 2.0 - 1.0).abs() < 0.1, "{}", v2 / v4);
    }

    #[test]
    fn chains_are_seed_deterministic() {
        let grad = |a: &[f64]| vec![-a[0]];
        let mut cfg = quadratic_cfg(4.0, vec![0.0]);
        cfg.n_chains = 2;
        cfg.n_samples = 1000;
        let a = langevin_stationary_check(&grad, &cfg).unwrap();
        assert_eq!(a, langevin_stationary_check(&grad, &cfg).unwrap());
    }

    #[test]
    fn shifted_quadratic_recovers_center() {
        let mu = [1.0, -1.0];
        let grad = move |a: &[f64]| vec![mu[0] - a[0], mu[1] - a[1]];
        let s = langevin_stationary_check(&grad, &quadratic_cfg(4.0, vec![0.0, 0.0])).unwrap();
        assert!((s.mean[0] - 1.0).abs() < 0.05 && (s.mean[1] + 1.0).abs() < 0.05, "{:?}", s.mean);
    }

    #[test]
    fn divergence_is_reported() {
        let grad = |a: &[f64]| vec![a[0] * 1e3];
        let mut cfg = quadratic_cfg(4.0, vec![1.0]);
        cfg.n_chains = 1;
        assert!(matches!(langevin_stationary_check(&grad, &cfg), Err(Error::Numeric(_))));
    }
}
