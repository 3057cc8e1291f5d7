//! Sound per-neuron pre-activation bounds over a perturbation ball.
//!
//! Two methods are provided: plain interval propagation ([`ibp`]) and a
//! backward linear bound that relaxes each unstable ReLU with the triangle
//! upper line of slope `u/(u−l)` ([`wk_bounds`]). [`tightest`] merges two
//! sound bound sets elementwise.

use serde::{Deserialize, Serialize};

use crate::attacks::PerturbationBall;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::netcore::{ForwardTrace, Layer, Network};

/// Crossings larger than this are reported as soundness violations; smaller
/// ones are floating-point rounding of two equal-value routes.
const CROSSING_TOL: f64 = 1e-9;

/// Guard for the `u/(u−l)` slope denominator.
const SLOPE_DENOM_FLOOR: f64 = 1e-12;

/// Per-layer pre-activation bounds, layers `1..=L` (index 0 is the first
/// layer's pre-activation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub lb: Vec<Vec<f64>>,
    pub ub: Vec<Vec<f64>>,
}

impl LayerBounds {
    pub fn layer_count(&self) -> usize {
        self.lb.len()
    }

    /// `(lower, upper)` bounds of layer `k` (0-based pre-activation index).
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        (&self.lb[k], &self.ub[k])
    }

    /// Check `lb ≤ ub` everywhere.
    pub fn validate(&self) -> Result<()> {
        for (k, (lbs, ubs)) in self.lb.iter().zip(&self.ub).enumerate() {
            for (j, (&l, &u)) in lbs.iter().zip(ubs).enumerate() {
                if l > u {
                    return Err(Error::CrossingBounds {
                        layer: k,
                        neuron: j,
                        lower: l,
                        upper: u,
                    });
                }
            }
        }
        Ok(())
    }

    /// True when every pre-activation of the trace lies in
    /// `[lb − tol, ub + tol]`.
    pub fn contains_trace(&self, trace: &ForwardTrace, tol: f64) -> bool {
        trace.pre.iter().enumerate().all(|(k, z)| {
            z.iter()
                .enumerate()
                .all(|(j, &v)| self.lb[k][j] - tol <= v && v <= self.ub[k][j] + tol)
        })
    }
}

/// Interval of `W x + b` for per-coordinate input intervals. The
/// accumulation order matches [`Layer::affine`], so a degenerate interval
/// reproduces the forward evaluation bitwise.
fn interval_affine(layer: &Layer, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = layer.out_dim();
    let mut zl = vec![0.0; n];
    let mut zh = vec![0.0; n];
    for i in 0..n {
        let row = layer.weight.row(i);
        let (mut accl, mut acch) = (0.0, 0.0);
        for j in 0..row.len() {
            let w = row[j];
            if w >= 0.0 {
                accl += w * lo[j];
                acch += w * hi[j];
            } else {
                accl += w * hi[j];
                acch += w * lo[j];
            }
        }
        zl[i] = accl + layer.bias[i];
        zh[i] = acch + layer.bias[i];
    }
    (zl, zh)
}

/// Interval bound propagation: interval arithmetic through every affine
/// layer, clamping at 0 through each ReLU. Sound by construction.
pub fn ibp(net: &Network, ball: &PerturbationBall) -> Result<LayerBounds> {
    check_ball(net, ball)?;
    let feasible = ball.feasible_box();
    let mut lo: Vec<f64> = feasible.iter().map(|&(l, _)| l).collect();
    let mut hi: Vec<f64> = feasible.iter().map(|&(_, h)| h).collect();
    let n = net.layer_count();
    let mut lb = Vec::with_capacity(n);
    let mut ub = Vec::with_capacity(n);
    for (t, layer) in net.layers().iter().enumerate() {
        let (zl, zh) = interval_affine(layer, &lo, &hi);
        lb.push(zl.clone());
        ub.push(zh.clone());
        if t + 1 < n {
            lo = zl.iter().map(|&v| v.max(0.0)).collect();
            hi = zh.iter().map(|&v| v.max(0.0)).collect();
        }
    }
    Ok(LayerBounds { lb, ub })
}

/// Lower bound on `min cᵀ z_t` over the feasible set, by backward
/// propagation of the linear objective through the ReLU relaxation. `bounds`
/// supplies (l, u) for every layer before `t`.
fn backward_lower(
    net: &Network,
    feasible: &[(f64, f64)],
    bounds: &[(Vec<f64>, Vec<f64>)],
    t: usize,
    c: &[f64],
) -> f64 {
    let mut constant = 0.0;
    let mut coef = c.to_vec();
    let mut layer_idx = t;
    loop {
        let layer = &net.layers()[layer_idx];
        constant += dot(&coef, &layer.bias);
        let mut down = layer.weight.matvec_transposed(&coef);
        if layer_idx == 0 {
            for (i, &a) in down.iter().enumerate() {
                let (lo, hi) = feasible[i];
                constant += if a > 0.0 { a * lo } else { a * hi };
            }
            return constant;
        }
        let (lbs, ubs) = &bounds[layer_idx - 1];
        for h in 0..down.len() {
            let (l, u) = (lbs[h], ubs[h]);
            if u <= 0.0 {
                down[h] = 0.0;
            } else if l >= 0.0 {
                // identity through a provably active unit
            } else {
                let slope = u / (u - l).max(SLOPE_DENOM_FLOOR);
                let a = down[h];
                if a < 0.0 {
                    // uses the upper line z ≤ slope·(ẑ − l)
                    constant += a * slope * (-l);
                }
                down[h] = slope * a;
            }
        }
        coef = down;
        layer_idx -= 1;
    }
}

/// Backward linear bounds. For each layer and neuron, the lower bound comes
/// from propagating the objective row backward through the ReLU relaxation;
/// the upper bound from doing the same with the sign of the row flipped.
/// Layer-1 bounds are the exact interval bounds. ReLU states inside the
/// recursion use the tightest of the interval and backward bounds computed
/// so far.
pub fn wk_bounds(net: &Network, ball: &PerturbationBall) -> Result<LayerBounds> {
    check_ball(net, ball)?;
    let ibp_bounds = ibp(net, ball)?;
    let feasible = ball.feasible_box();
    let n = net.layer_count();
    let mut wk = LayerBounds {
        lb: Vec::with_capacity(n),
        ub: Vec::with_capacity(n),
    };
    // Running elementwise merge feeding the recursion.
    let mut merged: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);
    for t in 0..n {
        let width = net.layers()[t].out_dim();
        let (lb_t, ub_t) = if t == 0 {
            interval_affine(&net.layers()[0], &lo_of(&feasible), &hi_of(&feasible))
        } else {
            let mut lb_t = vec![0.0; width];
            let mut ub_t = vec![0.0; width];
            let mut c = vec![0.0; width];
            for j in 0..width {
                c[j] = 1.0;
                lb_t[j] = backward_lower(net, &feasible, &merged, t, &c);
                c[j] = -1.0;
                ub_t[j] = -backward_lower(net, &feasible, &merged, t, &c);
                c[j] = 0.0;
            }
            (lb_t, ub_t)
        };
        let merged_t = merge_layer(&ibp_bounds.lb[t], &ibp_bounds.ub[t], &lb_t, &ub_t, t)?;
        merged.push(merged_t);
        wk.lb.push(lb_t);
        wk.ub.push(ub_t);
    }
    Ok(wk)
}

fn lo_of(feasible: &[(f64, f64)]) -> Vec<f64> {
    feasible.iter().map(|&(l, _)| l).collect()
}

fn hi_of(feasible: &[(f64, f64)]) -> Vec<f64> {
    feasible.iter().map(|&(_, h)| h).collect()
}

fn merge_layer(
    lb_a: &[f64],
    ub_a: &[f64],
    lb_b: &[f64],
    ub_b: &[f64],
    layer: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lb = vec![0.0; lb_a.len()];
    let mut ub = vec![0.0; ub_a.len()];
    for j in 0..lb_a.len() {
        let l = lb_a[j].max(lb_b[j]);
        let u = ub_a[j].min(ub_b[j]);
        if l > u {
            if l - u > CROSSING_TOL {
                return Err(Error::CrossingBounds {
                    layer,
                    neuron: j,
                    lower: l,
                    upper: u,
                });
            }
            // Two equal-value routes rounded past each other; keep the
            // enclosing sliver.
            lb[j] = u;
            ub[j] = l;
        } else {
            lb[j] = l;
            ub[j] = u;
        }
    }
    Ok((lb, ub))
}

/// Elementwise tightest merge of two sound bound sets: `lb = max`,
/// `ub = min`. A crossing beyond tolerance means one input was unsound and
/// is reported as an error.
pub fn tightest(a: &LayerBounds, b: &LayerBounds) -> Result<LayerBounds> {
    if a.lb.len() != b.lb.len()
        || a.lb.iter().zip(&b.lb).any(|(x, y)| x.len() != y.len())
    {
        return Err(Error::shape("bound sets have different shapes"));
    }
    let mut out = LayerBounds {
        lb: Vec::with_capacity(a.lb.len()),
        ub: Vec::with_capacity(a.ub.len()),
    };
    for k in 0..a.lb.len() {
        let (lb, ub) = merge_layer(&a.lb[k], &a.ub[k], &b.lb[k], &b.ub[k], k)?;
        out.lb.push(lb);
        out.ub.push(ub);
    }
    Ok(out)
}

/// The tightest-of-both bounds used by the relaxation and the graph attack.
pub fn merged_bounds(net: &Network, ball: &PerturbationBall) -> Result<LayerBounds> {
    let a = ibp(net, ball)?;
    let b = wk_bounds(net, ball)?;
    tightest(&a, &b)
}

fn check_ball(net: &Network, ball: &PerturbationBall) -> Result<()> {
    if ball.dim() != net.input_dim() {
        return Err(Error::shape(format!(
            "ball has {} coordinates, network expects {}",
            ball.dim(),
            net.input_dim()
        )));
    }
    Ok(())
}
