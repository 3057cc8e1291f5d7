//! Classical baseline attacks over an ε-ball intersected with the input box.
//!
//! All attacks share the same conventions: the feasible set is always
//! `{x' : |x'−x|_∞ ≤ ε} ∩ box`, starting points are drawn uniformly from it,
//! `sgn(0) = 0`, deadlines are checked once per iteration, and a reported
//! success always means the adversarial loss is ≥ 0 at the returned point.

use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, sgn};
use crate::netcore::Network;

/// The ℓ∞ ball `{x' : |x'−center|_∞ ≤ epsilon}` intersected with a
/// per-coordinate box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationBall {
    pub center: Vec<f64>,
    pub epsilon: f64,
    pub box_bounds: Vec<(f64, f64)>,
}

impl PerturbationBall {
    /// Build a ball, validating that the feasible set is nonempty (which
    /// holds exactly when the center clamped to the box stays within ε).
    pub fn new(center: Vec<f64>, epsilon: f64, box_bounds: Vec<(f64, f64)>) -> Result<Self> {
        if epsilon < 0.0 || !epsilon.is_finite() {
            return Err(Error::config(format!("epsilon {epsilon} must be finite and ≥ 0")));
        }
        if center.len() != box_bounds.len() {
            return Err(Error::shape(format!(
                "ball center has {} coordinates, box has {}",
                center.len(),
                box_bounds.len()
            )));
        }
        let ball = PerturbationBall {
            center,
            epsilon,
            box_bounds,
        };
        for i in 0..ball.center.len() {
            let (lo, hi) = ball.feasible_interval(i);
            if lo > hi {
                return Err(Error::EmptyFeasible(format!(
                    "coordinate {i}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(ball)
    }

    /// Ball around a point using the network's input box.
    pub fn around(net: &Network, center: Vec<f64>, epsilon: f64) -> Result<Self> {
        PerturbationBall::new(center, epsilon, net.input_box().to_vec())
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Feasible interval of coordinate `i`:
    /// `[max(center−ε, lo), min(center+ε, hi)]`.
    #[inline]
    pub fn feasible_interval(&self, i: usize) -> (f64, f64) {
        let (lo, hi) = self.box_bounds[i];
        (
            (self.center[i] - self.epsilon).max(lo),
            (self.center[i] + self.epsilon).min(hi),
        )
    }

    /// All feasible intervals.
    pub fn feasible_box(&self) -> Vec<(f64, f64)> {
        (0..self.dim()).map(|i| self.feasible_interval(i)).collect()
    }

    /// Exact membership test.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(i, &v)| {
                let (lo, hi) = self.feasible_interval(i);
                lo <= v && v <= hi
            })
    }

    /// Uniform sample from the feasible set.
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let (lo, hi) = self.feasible_interval(i);
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            })
            .collect()
    }

    /// Center clamped to the box (always feasible).
    pub fn clamped_center(&self) -> Vec<f64> {
        project(&self.center, self)
    }
}

/// One attack instance: a ball around an input plus the class pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackProperty {
    pub ball: PerturbationBall,
    pub y: usize,
    pub y_tar: usize,
    #[serde(default)]
    pub net_ref: Option<String>,
}

impl AttackProperty {
    pub fn new(ball: PerturbationBall, y: usize, y_tar: usize) -> Result<Self> {
        if y == y_tar {
            return Err(Error::InvalidProperty(format!(
                "true class and target class are both {y}"
            )));
        }
        Ok(AttackProperty {
            ball,
            y,
            y_tar,
            net_ref: None,
        })
    }
}

/// Result of one attack run.
///
/// `final_loss` is the best adversarial loss seen over all iterates and
/// restarts; on success `adversarial_point` is a feasible point achieving a
/// loss ≥ 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub success: bool,
    pub adversarial_point: Option<Vec<f64>>,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub restarts_used: usize,
    pub wall_time: f64,
    /// Every iterate visited, in order, when `record_iterates` was requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<Vec<f64>>,
}

/// Exact ℓ∞ projection onto `ball ∩ box`: per-coordinate clamp to the
/// feasible interval. Idempotent.
pub fn project(x: &[f64], ball: &PerturbationBall) -> Vec<f64> {
    debug_assert_eq!(x.len(), ball.dim());
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) = ball.feasible_interval(i);
            v.clamp(lo, hi)
        })
        .collect()
}

/// One FGSM step: `x + step · sgn(∇L)` with `sgn(0) = 0`. No projection.
pub fn fgsm_step(net: &Network, x: &[f64], y: usize, y_tar: usize, step: f64) -> Result<Vec<f64>> {
    if step < 0.0 {
        return Err(Error::config(format!("fgsm step {step} must be ≥ 0")));
    }
    let grad = net.input_gradient(x, y, y_tar)?;
    Ok(x.iter()
        .zip(&grad)
        .map(|(&xi, &gi)| xi + step * sgn(gi))
        .collect())
}

/// Shared knobs of the iterative attacks.
#[derive(Debug, Clone)]
pub struct PgdConfig {
    /// Gradient steps per restart.
    pub steps: usize,
    /// Step size.
    pub alpha: f64,
    pub seed: u64,
    /// Maximum number of starts; `None` keeps restarting until the
    /// deadline. With neither a restart cap nor a time budget the attack
    /// runs until it succeeds.
    pub max_restarts: Option<usize>,
    /// Wall-clock budget; `None` means no deadline.
    pub time_budget: Option<Duration>,
    /// First restart starts here instead of a uniform sample (projected to
    /// the feasible set).
    pub warm_start: Option<Vec<f64>>,
    /// Keep the full iterate trace in the outcome.
    pub record_iterates: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        // T=100 with α=0.01; α=0.1 is available as `methods_preset`.
        PgdConfig {
            steps: 100,
            alpha: 0.01,
            seed: 0,
            max_restarts: None,
            time_budget: None,
            warm_start: None,
            record_iterates: false,
        }
    }
}

impl PgdConfig {
    /// The larger-step variant (α = 0.1) quoted alongside the default.
    pub fn methods_preset() -> Self {
        PgdConfig {
            alpha: 0.1,
            ..PgdConfig::default()
        }
    }
}

/// Momentum attack configuration.
#[derive(Debug, Clone)]
pub struct MiFgsmConfig {
    pub steps: usize,
    pub alpha: f64,
    /// Momentum decay μ.
    pub mu: f64,
    pub seed: u64,
    pub max_restarts: Option<usize>,
    pub time_budget: Option<Duration>,
    pub warm_start: Option<Vec<f64>>,
    pub record_iterates: bool,
}

impl Default for MiFgsmConfig {
    fn default() -> Self {
        MiFgsmConfig {
            steps: 100,
            alpha: 0.1,
            mu: 0.5,
            seed: 0,
            max_restarts: None,
            time_budget: None,
            warm_start: None,
            record_iterates: false,
        }
    }
}

/// C&W ℓ∞ schedule configuration.
#[derive(Debug, Clone)]
pub struct CwConfig {
    /// Inner gradient steps per (c, τ) setting.
    pub steps: usize,
    pub c_init: f64,
    pub c_fin: f64,
    /// τ decay once the attack is succeeding, in (0, 1).
    pub gamma_tau: f64,
    /// c growth while the attack is failing, > 1.
    pub gamma_c: f64,
    /// Inner gradient step size.
    pub alpha: f64,
    pub time_budget: Option<Duration>,
    /// Outer-iteration cap used when no time budget is given, so the
    /// schedule always terminates.
    pub max_outer: usize,
    pub record_iterates: bool,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            steps: 100,
            c_init: 1e-5,
            c_fin: 1000.0,
            gamma_tau: 0.99,
            gamma_c: 1.5,
            alpha: 1e-4,
            time_budget: None,
            max_outer: 10_000,
            record_iterates: false,
        }
    }
}

/// Book-keeping shared by the restart-based attacks (including the learned
/// one).
pub(crate) struct RunState {
    start: Instant,
    deadline: Option<Instant>,
    best_loss: f64,
    best_point: Option<Vec<f64>>,
    pub(crate) iterations: usize,
    pub(crate) restarts: usize,
    pub(crate) iterates: Vec<Vec<f64>>,
    pub(crate) record: bool,
}

impl RunState {
    pub(crate) fn new(budget: Option<Duration>, record: bool) -> Self {
        let start = Instant::now();
        RunState {
            start,
            deadline: budget.map(|b| start + b),
            best_loss: f64::NEG_INFINITY,
            best_point: None,
            iterations: 0,
            restarts: 0,
            iterates: Vec::new(),
            record,
        }
    }

    pub(crate) fn out_of_time(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }

    pub(crate) fn observe(&mut self, x: &[f64], loss: f64) {
        if self.record {
            self.iterates.push(x.to_vec());
        }
        if loss > self.best_loss {
            self.best_loss = loss;
            self.best_point = Some(x.to_vec());
        }
    }

    pub(crate) fn finish(self) -> AttackOutcome {
        let success = self.best_loss >= 0.0;
        AttackOutcome {
            success,
            adversarial_point: if success { self.best_point } else { None },
            final_loss: self.best_loss,
            iterations_used: self.iterations,
            restarts_used: self.restarts,
            wall_time: self.start.elapsed().as_secs_f64(),
            iterates: self.iterates,
        }
    }
}

fn validate_property(net: &Network, prop: &AttackProperty) -> Result<()> {
    if prop.ball.dim() != net.input_dim() {
        return Err(Error::shape(format!(
            "property has {} coordinates, network expects {}",
            prop.ball.dim(),
            net.input_dim()
        )));
    }
    if prop.y == prop.y_tar {
        return Err(Error::InvalidProperty("y == y_tar".into()));
    }
    let m = net.output_dim();
    for index in [prop.y, prop.y_tar] {
        if index >= m {
            return Err(Error::ClassIndex { index, outputs: m });
        }
    }
    Ok(())
}

/// Projected gradient descent on the negative adversarial loss with uniform
/// random restarts. Stops as soon as an iterate reaches loss ≥ 0.
pub fn pgd_attack(net: &Network, prop: &AttackProperty, cfg: &PgdConfig) -> Result<AttackOutcome> {
    if cfg.steps == 0 {
        return Err(Error::config("pgd needs at least one step"));
    }
    if cfg.alpha <= 0.0 {
        return Err(Error::config(format!("pgd step size {} must be > 0", cfg.alpha)));
    }
    validate_property(net, prop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = RunState::new(cfg.time_budget, cfg.record_iterates);

    'restarts: loop {
        if state.out_of_time() || cfg.max_restarts.is_some_and(|m| state.restarts >= m) {
            break;
        }
        let mut x = match (&cfg.warm_start, state.restarts) {
            (Some(w), 0) => project(w, &prop.ball),
            _ => prop.ball.sample_uniform(&mut rng),
        };
        state.restarts += 1;
        let mut loss = net.adversarial_loss(&x, prop.y, prop.y_tar)?;
        state.observe(&x, loss);
        if loss >= 0.0 {
            break;
        }
        for _ in 0..cfg.steps {
            if state.out_of_time() {
                break 'restarts;
            }
            let grad = net.input_gradient(&x, prop.y, prop.y_tar)?;
            let stepped: Vec<f64> = x
                .iter()
                .zip(&grad)
                .map(|(&xi, &gi)| xi + cfg.alpha * sgn(gi))
                .collect();
            x = project(&stepped, &prop.ball);
            state.iterations += 1;
            loss = net.adversarial_loss(&x, prop.y, prop.y_tar)?;
            state.observe(&x, loss);
            if loss >= 0.0 {
                break 'restarts;
            }
        }
    }
    Ok(state.finish())
}

/// Momentum iterative attack with uniform random initialization. The
/// momentum accumulates ℓ1-normalized gradients; a zero gradient only decays
/// the accumulator.
pub fn mi_fgsm_plus(
    net: &Network,
    prop: &AttackProperty,
    cfg: &MiFgsmConfig,
) -> Result<AttackOutcome> {
    if cfg.steps == 0 {
        return Err(Error::config("mi-fgsm needs at least one step"));
    }
    if cfg.alpha <= 0.0 || cfg.mu < 0.0 {
        return Err(Error::config(format!(
            "mi-fgsm needs alpha > 0 and mu ≥ 0 (got {}, {})",
            cfg.alpha, cfg.mu
        )));
    }
    validate_property(net, prop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = RunState::new(cfg.time_budget, cfg.record_iterates);

    'restarts: loop {
        if state.out_of_time() || cfg.max_restarts.is_some_and(|m| state.restarts >= m) {
            break;
        }
        let mut x = match (&cfg.warm_start, state.restarts) {
            (Some(w), 0) => project(w, &prop.ball),
            _ => prop.ball.sample_uniform(&mut rng),
        };
        state.restarts += 1;
        let mut momentum = vec![0.0; x.len()];
        let mut loss = net.adversarial_loss(&x, prop.y, prop.y_tar)?;
        state.observe(&x, loss);
        if loss >= 0.0 {
            break;
        }
        for _ in 0..cfg.steps {
            if state.out_of_time() {
                break 'restarts;
            }
            let grad = net.input_gradient(&x, prop.y, prop.y_tar)?;
            let norm = l1_norm(&grad);
            for (g, &raw) in momentum.iter_mut().zip(&grad) {
                *g *= cfg.mu;
                if norm > 0.0 {
                    *g += raw / norm;
                }
            }
            let stepped: Vec<f64> = x
                .iter()
                .zip(&momentum)
                .map(|(&xi, &gi)| xi + cfg.alpha * sgn(gi))
                .collect();
            x = project(&stepped, &prop.ball);
            state.iterations += 1;
            loss = net.adversarial_loss(&x, prop.y, prop.y_tar)?;
            state.observe(&x, loss);
            if loss >= 0.0 {
                break 'restarts;
            }
        }
    }
    Ok(state.finish())
}

/// Hinge penalty `Σ_i (|δ_i| − τ)₊` of the C&W objective.
pub fn cw_hinge(delta: &[f64], tau: f64) -> f64 {
    delta.iter().map(|d| (d.abs() - tau).max(0.0)).sum()
}

/// C&W-style ℓ∞ attack: minimizes `c·h(x+δ) + Σ(|δ_i|−τ)₊` over δ with
/// `x+δ` in the input box, where `h(z) = max(f(z)_y − f(z)_{y_tar}, 0)`.
/// While the attack is failing, `c` grows by `gamma_c` (capped at `c_fin`);
/// once it succeeds, `τ` shrinks by `gamma_tau`. Success is declared as soon
/// as an iterate is feasible for the property's ball with loss ≥ 0.
pub fn cw_attack(net: &Network, prop: &AttackProperty, cfg: &CwConfig) -> Result<AttackOutcome> {
    if !(0.0 < cfg.gamma_tau && cfg.gamma_tau < 1.0 && cfg.gamma_c > 1.0) {
        return Err(Error::config(format!(
            "cw needs 0 < gamma_tau < 1 < gamma_c (got {}, {})",
            cfg.gamma_tau, cfg.gamma_c
        )));
    }
    if cfg.c_init > cfg.c_fin {
        return Err(Error::config(format!(
            "cw needs c_init ≤ c_fin (got {} > {})",
            cfg.c_init, cfg.c_fin
        )));
    }
    validate_property(net, prop)?;
    let mut state = RunState::new(cfg.time_budget, cfg.record_iterates);
    state.restarts = 1;
    let x = &prop.ball.center;
    let box_bounds = &prop.ball.box_bounds;
    let mut delta = vec![0.0; x.len()];
    let mut tau = prop.ball.epsilon;
    let mut c = cfg.c_init;

    let feasible_loss = |state: &mut RunState, delta: &[f64]| -> Result<Option<f64>> {
        let z: Vec<f64> = x.iter().zip(delta).map(|(a, d)| a + d).collect();
        let loss = net.adversarial_loss(&z, prop.y, prop.y_tar)?;
        if prop.ball.contains(&z) {
            state.observe(&z, loss);
            if loss >= 0.0 {
                return Ok(Some(loss));
            }
        } else if state.record {
            state.iterates.push(z);
        }
        Ok(None)
    };

    if feasible_loss(&mut state, &delta)?.is_some() {
        return Ok(state.finish());
    }

    let mut outer = 0;
    loop {
        if state.out_of_time() || (cfg.time_budget.is_none() && outer >= cfg.max_outer) {
            break;
        }
        outer += 1;
        let mut found_feasible = false;
        for _ in 0..cfg.steps {
            if state.out_of_time() {
                break;
            }
            // Gradient of c·h(x+δ) + Σ(|δ_i|−τ)₊ in δ, where
            // h(z) = max(f(z)_y − f(z)_{y_tar}, 0) vanishes once the target
            // class catches up.
            let z: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let gap = net.adversarial_loss(&z, prop.y, prop.y_tar)?; // f_tar − f_y
            let mut grad = if gap < 0.0 {
                let g = net.input_gradient(&z, prop.y, prop.y_tar)?;
                g.iter().map(|v| -c * v).collect()
            } else {
                vec![0.0; delta.len()]
            };
            for (g, d) in grad.iter_mut().zip(&delta) {
                if d.abs() > tau {
                    *g += sgn(*d);
                }
            }
            for i in 0..delta.len() {
                delta[i] -= cfg.alpha * grad[i];
                let (lo, hi) = box_bounds[i];
                delta[i] = delta[i].clamp(lo - x[i], hi - x[i]);
            }
            state.iterations += 1;
            if feasible_loss(&mut state, &delta)?.is_some() {
                found_feasible = true;
                break;
            }
        }
        if found_feasible {
            break;
        }
        // Outer schedule: while the surrogate has not produced any
        // box-adversarial point, harden it; once it has, shrink the hinge
        // radius to pull the perturbation into the ε-ball.
        let z: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let box_adversarial = net.adversarial_loss(&z, prop.y, prop.y_tar)? >= 0.0;
        if box_adversarial {
            tau *= cfg.gamma_tau;
        } else {
            c = (c * cfg.gamma_c).min(cfg.c_fin);
        }
    }
    Ok(state.finish())
}
