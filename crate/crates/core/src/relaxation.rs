//! Triangle (Planet) relaxation of the attack objective and its
//! Lagrangian-decomposition dual.
//!
//! The relaxed problem minimizes the logit gap `f(x)_y − f(x)_{y_tar}` over
//! the feasible set, with every unstable ReLU replaced by its convex hull.
//! Duplicating each coupled pre-activation and dualizing the equality gives
//! a dual function `q(ρ)` whose inner minimization decomposes into one
//! closed-form subproblem per block; any `ρ` yields a valid lower bound on
//! the relaxation and hence on the true minimum. `q` is maximized by
//! supergradient ascent with Adam, and the input-block minimizer at the best
//! iterate is kept as the recovered primal point.

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackProperty, PerturbationBall};
use crate::bounds::LayerBounds;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::netcore::Network;

/// Guard for the `u/(u−l)` slope denominator.
const SLOPE_DENOM_FLOOR: f64 = 1e-12;

/// State of one ReLU unit under its pre-activation bounds `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanetNeuron {
    /// `hi ≤ 0`: output pinned to 0.
    Blocked { lo: f64, hi: f64 },
    /// `lo ≥ 0`: output equals the pre-activation.
    Passing { lo: f64, hi: f64 },
    /// `lo < 0 < hi`: output lives in the triangle with upper line
    /// `z ≤ slope·ẑ + intercept`.
    Ambiguous {
        lo: f64,
        hi: f64,
        slope: f64,
        intercept: f64,
    },
}

impl PlanetNeuron {
    /// Classify from pre-activation bounds.
    pub fn from_bounds(lo: f64, hi: f64) -> Self {
        if hi <= 0.0 {
            PlanetNeuron::Blocked { lo, hi }
        } else if lo >= 0.0 {
            PlanetNeuron::Passing { lo, hi }
        } else {
            let denom = (hi - lo).max(SLOPE_DENOM_FLOOR);
            PlanetNeuron::Ambiguous {
                lo,
                hi,
                slope: hi / denom,
                intercept: -hi * lo / denom,
            }
        }
    }

    /// Vertices `(ẑ, z)` of the feasible cross-section. Linear objectives
    /// attain their minimum at one of these.
    pub fn vertices(&self) -> Vec<(f64, f64)> {
        match *self {
            PlanetNeuron::Blocked { lo, hi } => vec![(lo, 0.0), (hi, 0.0)],
            PlanetNeuron::Passing { lo, hi } => vec![(lo, lo), (hi, hi)],
            PlanetNeuron::Ambiguous { lo, hi, .. } => vec![(lo, 0.0), (0.0, 0.0), (hi, hi)],
        }
    }

    /// True when `(ẑ, z)` satisfies the box and hull constraints up to `tol`.
    pub fn feasible(&self, zhat: f64, z: f64, tol: f64) -> bool {
        match *self {
            PlanetNeuron::Blocked { lo, hi } => lo - tol <= zhat && zhat <= hi + tol && z.abs() <= tol,
            PlanetNeuron::Passing { lo, hi } => {
                lo - tol <= zhat && zhat <= hi + tol && (z - zhat).abs() <= tol
            }
            PlanetNeuron::Ambiguous {
                lo,
                hi,
                slope,
                intercept,
            } => {
                lo - tol <= zhat
                    && zhat <= hi + tol
                    && z >= -tol
                    && z >= zhat - tol
                    && z <= slope * zhat + intercept + tol
            }
        }
    }
}

/// The relaxed problem after folding the class pair into a scalar objective
/// layer. Blocks are indexed `0..=n−1`: block 0 owns the input, block `k`
/// owns the duplicated pre-activation of coupled layer `k`.
#[derive(Debug, Clone)]
pub struct Relaxation {
    /// Feasible input intervals (ball ∩ box).
    feasible: Vec<(f64, f64)>,
    /// Deterministic choice for zero-coefficient input coordinates.
    tie_point: Vec<f64>,
    /// Affine maps `1..=n`; the last produces the scalar objective
    /// `f(x)_y − f(x)_{y_tar}`.
    affines: Vec<(Matrix, Vec<f64>)>,
    /// Hull description of every coupled layer `1..=n−1`.
    hidden: Vec<Vec<PlanetNeuron>>,
}

impl Relaxation {
    pub fn input_dim(&self) -> usize {
        self.feasible.len()
    }

    /// Number of coupled layers (dual vector count).
    pub fn coupled_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn feasible_box(&self) -> &[(f64, f64)] {
        &self.feasible
    }

    pub fn hull_layer(&self, k: usize) -> &[PlanetNeuron] {
        &self.hidden[k]
    }

    /// Affine map of block `k` (weights feeding pre-activation `k+1`).
    pub fn affine(&self, k: usize) -> (&Matrix, &[f64]) {
        let (w, b) = &self.affines[k];
        (w, b)
    }

    /// Zero dual variables with the right shapes.
    pub fn zero_duals(&self) -> Vec<Vec<f64>> {
        self.hidden.iter().map(|h| vec![0.0; h.len()]).collect()
    }
}

/// Dual variables, the dual value, and the recovered primal input point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualState {
    /// Multipliers for coupled layers `1..=n−1`.
    pub rho: Vec<Vec<f64>>,
    /// `q(ρ)` at the best iterate: a lower bound on the relaxed (and exact)
    /// minimum of the logit gap.
    pub dual_value: f64,
    /// Input-block minimizer at the best iterate.
    pub x_lp: Vec<f64>,
}

/// Everything the inner minimization chose, block by block.
#[derive(Debug, Clone)]
pub struct InnerAssignment {
    /// Input-block minimizer.
    pub z0: Vec<f64>,
    /// Duplicated pre-activations chosen by each coupled block `k`.
    pub zhat_b: Vec<Vec<f64>>,
    /// Post-activation values chosen by each coupled block `k`.
    pub z_post: Vec<Vec<f64>>,
    /// Pre-activations produced by the previous block's affine map.
    pub zhat_a: Vec<Vec<f64>>,
}

/// Build the relaxation for a property from sound pre-activation bounds.
pub fn build_relaxation(
    net: &Network,
    prop: &AttackProperty,
    bounds: &LayerBounds,
) -> Result<Relaxation> {
    let n = net.layer_count();
    if bounds.layer_count() != n {
        return Err(Error::shape(format!(
            "bounds cover {} layers, network has {n}",
            bounds.layer_count()
        )));
    }
    bounds.validate()?;
    let m = net.output_dim();
    for index in [prop.y, prop.y_tar] {
        if index >= m {
            return Err(Error::ClassIndex { index, outputs: m });
        }
    }
    let feasible = prop.ball.feasible_box();
    let tie_point = prop.ball.clamped_center();

    let mut affines = Vec::with_capacity(n);
    for layer in &net.layers()[..n - 1] {
        affines.push((layer.weight.clone(), layer.bias.clone()));
    }
    // Fold the class pair into a single objective row: gap = f_y − f_{y_tar}.
    let last = &net.layers()[n - 1];
    let row: Vec<f64> = last
        .weight
        .row(prop.y)
        .iter()
        .zip(last.weight.row(prop.y_tar))
        .map(|(a, b)| a - b)
        .collect();
    let bias = last.bias[prop.y] - last.bias[prop.y_tar];
    affines.push((
        Matrix::from_rows(&[row]).expect("single objective row"),
        vec![bias],
    ));

    let mut hidden = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let (lb, ub) = bounds.layer(k);
        hidden.push(
            lb.iter()
                .zip(ub)
                .map(|(&l, &u)| PlanetNeuron::from_bounds(l, u))
                .collect(),
        );
    }
    Ok(Relaxation {
        feasible,
        tie_point,
        affines,
        hidden,
    })
}

/// Exact minimizer of the decomposed objective for fixed duals. The input
/// block solves a linear objective over the feasible box at a vertex; each
/// coupled block solves one ≤3-vertex hull problem per neuron.
pub fn dual_inner_min(rho: &[Vec<f64>], relax: &Relaxation) -> Result<(f64, InnerAssignment)> {
    let n_coupled = relax.coupled_layers();
    if rho.len() != n_coupled
        || rho
            .iter()
            .zip(&relax.hidden)
            .any(|(r, h)| r.len() != h.len())
    {
        return Err(Error::shape("dual variables do not match the relaxation"));
    }

    // Block 0: linear objective ν₁ᵀ(W₁ z₀ + b₁) over the feasible box,
    // where ν₁ is −ρ₁ (or the objective row itself when there is no
    // coupled layer).
    let (w1, b1) = relax.affine(0);
    let nu1: Vec<f64> = if n_coupled == 0 {
        vec![1.0]
    } else {
        rho[0].iter().map(|r| -r).collect()
    };
    let coef0 = w1.matvec_transposed(&nu1);
    let mut z0 = vec![0.0; relax.input_dim()];
    for i in 0..z0.len() {
        let (lo, hi) = relax.feasible[i];
        z0[i] = if coef0[i] > 0.0 {
            lo
        } else if coef0[i] < 0.0 {
            hi
        } else {
            relax.tie_point[i]
        };
    }
    let mut zhat_a = Vec::with_capacity(n_coupled.max(1));
    let first_pre = {
        let mut v = w1.matvec(&z0);
        for (o, b) in v.iter_mut().zip(b1) {
            *o += b;
        }
        v
    };
    let mut q = dot(&nu1, &first_pre);
    if n_coupled == 0 {
        return Ok((
            q,
            InnerAssignment {
                z0,
                zhat_b: vec![],
                z_post: vec![],
                zhat_a: vec![],
            },
        ));
    }
    zhat_a.push(first_pre);

    let mut zhat_b = Vec::with_capacity(n_coupled);
    let mut z_post = Vec::with_capacity(n_coupled);
    for k in 0..n_coupled {
        // Block k+0-based: objective ρₖᵀ ẑ_B + ν_{k+1}ᵀ(W_{k+1} z + b_{k+1}).
        let (w_next, b_next) = relax.affine(k + 1);
        let nu_next: Vec<f64> = if k + 1 < n_coupled {
            rho[k + 1].iter().map(|r| -r).collect()
        } else {
            vec![1.0]
        };
        let z_coef = w_next.matvec_transposed(&nu_next);
        let mut zb = vec![0.0; relax.hidden[k].len()];
        let mut zp = vec![0.0; relax.hidden[k].len()];
        for (j, neuron) in relax.hidden[k].iter().enumerate() {
            let a = rho[k][j];
            let w = z_coef[j];
            let mut best = f64::INFINITY;
            for (zhat, z) in neuron.vertices() {
                let val = a * zhat + w * z;
                if val < best {
                    best = val;
                    zb[j] = zhat;
                    zp[j] = z;
                }
            }
            q += best;
        }
        // Next block's incoming pre-activation and the constant bias term.
        let mut next_pre = w_next.matvec(&zp);
        for (o, b) in next_pre.iter_mut().zip(b_next) {
            *o += b;
        }
        q += dot(&nu_next, b_next);
        if k + 1 < n_coupled {
            zhat_a.push(next_pre);
        }
        zhat_b.push(zb);
        z_post.push(zp);
    }
    Ok((
        q,
        InnerAssignment {
            z0,
            zhat_b,
            z_post,
            zhat_a,
        },
    ))
}

/// Supergradient ascent settings. The learning rate default is uncritical
/// for soundness because the best iterate is returned.
#[derive(Debug, Clone)]
pub struct AscentConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            steps: 100,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Maximize `q(ρ)` with Adam on the supergradient `ẑ_B − ẑ_A`, starting
/// from ρ = 0. Returns the duals, value, and input minimizer of the best
/// iterate seen (never blindly the last).
pub fn supergradient_ascent(
    net: &Network,
    prop: &AttackProperty,
    bounds: &LayerBounds,
    cfg: &AscentConfig,
) -> Result<DualState> {
    if cfg.steps == 0 {
        return Err(Error::config("supergradient ascent needs at least one step"));
    }
    let relax = build_relaxation(net, prop, bounds)?;
    let mut rho = relax.zero_duals();
    let mut best: Option<DualState> = None;
    let mut m = relax.zero_duals();
    let mut v = relax.zero_duals();
    for step in 1..=cfg.steps {
        let (q, assign) = dual_inner_min(&rho, &relax)?;
        if best.as_ref().is_none_or(|b| q > b.dual_value) {
            best = Some(DualState {
                rho: rho.clone(),
                dual_value: q,
                x_lp: assign.z0.clone(),
            });
        }
        if step == cfg.steps {
            break;
        }
        // Supergradient of q at the inner argmin, per coupled layer.
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        for k in 0..rho.len() {
            for j in 0..rho[k].len() {
                let g = assign.zhat_b[k][j] - assign.zhat_a[k][j];
                m[k][j] = cfg.beta1 * m[k][j] + (1.0 - cfg.beta1) * g;
                v[k][j] = cfg.beta2 * v[k][j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[k][j] / bc1;
                let v_hat = v[k][j] / bc2;
                rho[k][j] += cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(best.expect("at least one iterate was evaluated"))
}

/// Convenience wrapper: compute the tightest bounds for the property's ball
/// and run supergradient ascent on them.
pub fn merged_dual(net: &Network, prop: &AttackProperty, cfg: &AscentConfig) -> Result<DualState> {
    let bounds = crate::bounds::merged_bounds(net, &prop.ball)?;
    supergradient_ascent(net, prop, &bounds, cfg)
}

/// Dual state used by the feature assembly when supergradient ascent is
/// skipped: zero duals and the clamped ball center as primal candidate.
pub fn zero_dual_state(net: &Network, ball: &PerturbationBall) -> DualState {
    let widths: Vec<usize> = net.layers()[..net.layer_count() - 1]
        .iter()
        .map(|l| l.out_dim())
        .collect();
    DualState {
        rho: widths.iter().map(|&w| vec![0.0; w]).collect(),
        dual_value: f64::NEG_INFINITY,
        x_lp: ball.clamped_center(),
    }
}
