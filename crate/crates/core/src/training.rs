//! Parameter estimation for the learned attack by backpropagation through
//! unrolled attack iterations.
//!
//! A rollout runs `K` attack iterations from a start point with no early
//! stopping and scores them with a decayed sum of adversarial losses; the
//! training objective sums rollouts over samples and starts. Gradients are
//! exact reverse-mode derivatives through the unrolled computation with
//! three pinned conventions: the gradient-sign feature entries are constants
//! per iteration, the projection clamp passes derivative 1 inside the
//! feasible interval and 0 on clamped coordinates, and ReLU has derivative 0
//! at 0.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackProperty, PerturbationBall};
use crate::error::{Error, Result};
use crate::gnn::{FeatureMode, GnnParams, PropertyContext, HIDDEN_FEATURES, INPUT_FEATURES};
use crate::linalg::sgn_vec;
use crate::netcore::Network;
use crate::relaxation::AscentConfig;
use crate::tape::{Tape, Var};

/// One training instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub y_tar: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub net_ref: Option<String>,
}

impl TrainingSample {
    pub fn property(&self, net: &Network) -> Result<AttackProperty> {
        let ball = PerturbationBall::around(net, self.x.clone(), self.epsilon)?;
        AttackProperty::new(ball, self.y, self.y_tar)
    }

    /// Assert the sample is valid for the network: positive ε and the
    /// network classifies `x` as `y`.
    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidProperty(format!(
                "training sample has epsilon {}",
                self.epsilon
            )));
        }
        let predicted = net.classify(&self.x)?;
        if predicted != self.y {
            return Err(Error::InvalidProperty(format!(
                "network classifies the sample as {predicted}, label says {}",
                self.y
            )));
        }
        Ok(())
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Unrolled horizon K.
    pub horizon: usize,
    /// Decay γ ∈ (0,1) weighting step `t` by `γ^t`.
    pub gamma: f64,
    /// Random starts per sample.
    pub starts: usize,
    pub epochs: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Decoupled weight decay (applied as `θ ← θ·(1 − lr·wd)`).
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_schedule: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    /// Attack step size used inside rollouts (and at inference).
    pub alpha: f64,
    /// Embedding size / MLP depth / sweep count for fresh parameters.
    pub p: usize,
    pub t1: usize,
    pub t2: usize,
    pub feature_mode: FeatureMode,
    /// Dual precomputation settings.
    pub ascent: AscentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 40,
            gamma: 0.9,
            starts: 5,
            epochs: 40,
            lr: 0.01,
            weight_decay: 0.001,
            lr_schedule: vec![20, 30, 35],
            lr_decay: 0.1,
            seed: 0,
            alpha: 1e-2,
            p: 32,
            t1: 1,
            t2: 1,
            feature_mode: FeatureMode::Dual,
            ascent: AscentConfig::default(),
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if self.horizon == 0 || self.starts == 0 {
            return Err(Error::config("horizon and starts must be at least 1"));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::config(format!("gamma {} must be in (0,1)", self.gamma)));
        }
        Ok(())
    }

    /// Learning rate in force at `epoch` under the step schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_schedule.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    pub lr: f64,
}

/// Deterministic seed for the start point of (sample, start, epoch).
/// SplitMix-style mixing keeps distinct triples decorrelated.
pub fn start_seed(seed: u64, sample: usize, start: usize, epoch: u64) -> u64 {
    let mut z = seed
        ^ (sample as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ (start as u64).wrapping_mul(0xbf58476d1ce4e5b9)
        ^ epoch.wrapping_mul(0x94d049bb133111eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Content key of a training sample (FNV-1a over its fields), so identical
/// samples draw identical start points and the loss is exactly additive
/// under dataset duplication.
pub fn sample_key(sample: &TrainingSample) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for v in &sample.x {
        eat(&v.to_bits().to_le_bytes());
    }
    eat(&(sample.y as u64).to_le_bytes());
    eat(&(sample.y_tar as u64).to_le_bytes());
    eat(&sample.epsilon.to_bits().to_le_bytes());
    h
}

/// Start seed for a sample keyed by content rather than position.
pub fn sample_start_seed(seed: u64, sample: &TrainingSample, start: usize, epoch: u64) -> u64 {
    start_seed(seed ^ sample_key(sample), 0, start, epoch)
}

/// Epoch tag used for validation-start derivation so validation loss is
/// comparable across epochs.
pub const VALIDATION_EPOCH: u64 = u64::MAX;

fn uniform_start(ball: &PerturbationBall, seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ball.sample_uniform(&mut rng)
}

// ---------------------------------------------------------------------------
// Differentiable parameter handles
// ---------------------------------------------------------------------------

/// Tape variables mirroring every entry of [`GnnParams`], in the flattening
/// order used by [`flatten_params`].
struct ParamVars {
    input_mlp: Vec<Vec<Var>>,
    hidden_mlp: Vec<Vec<Var>>,
    forward_pass: Vec<Vec<Var>>,
    backward_pass: Vec<Vec<Var>>,
    readout: Vec<Var>,
}

/// Flatten parameters into one deterministic vector (row-major matrices in
/// declaration order, then the readout).
pub fn flatten_params(params: &GnnParams) -> Vec<f64> {
    let mut flat = Vec::new();
    for m in params
        .input_mlp
        .iter()
        .chain(&params.hidden_mlp)
        .chain(&params.forward_pass)
        .chain(&params.backward_pass)
    {
        flat.extend_from_slice(m.as_slice());
    }
    flat.extend_from_slice(&params.readout);
    flat
}

/// Rebuild parameters from a flat vector with the same shapes as `template`.
pub fn unflatten_params(template: &GnnParams, flat: &[f64]) -> GnnParams {
    let mut out = template.clone();
    let mut idx = 0;
    for m in out
        .input_mlp
        .iter_mut()
        .chain(out.hidden_mlp.iter_mut())
        .chain(out.forward_pass.iter_mut())
        .chain(out.backward_pass.iter_mut())
    {
        let len = m.as_slice().len();
        m.as_mut_slice().copy_from_slice(&flat[idx..idx + len]);
        idx += len;
    }
    let rlen = out.readout.len();
    out.readout.copy_from_slice(&flat[idx..idx + rlen]);
    idx += rlen;
    debug_assert_eq!(idx, flat.len());
    out
}

impl ParamVars {
    fn create(tape: &mut Tape, params: &GnnParams) -> Self {
        let mat = |tape: &mut Tape, m: &crate::linalg::Matrix| -> Vec<Var> {
            m.as_slice().iter().map(|&v| tape.var(v)).collect()
        };
        ParamVars {
            input_mlp: params.input_mlp.iter().map(|m| mat(tape, m)).collect(),
            hidden_mlp: params.hidden_mlp.iter().map(|m| mat(tape, m)).collect(),
            forward_pass: params.forward_pass.iter().map(|m| mat(tape, m)).collect(),
            backward_pass: params.backward_pass.iter().map(|m| mat(tape, m)).collect(),
            readout: params.readout.iter().map(|&v| tape.var(v)).collect(),
        }
    }

    /// Adjoints in flattening order.
    fn gradient(&self, grads: &crate::tape::Gradients) -> Vec<f64> {
        let mut flat = Vec::new();
        for m in self
            .input_mlp
            .iter()
            .chain(&self.hidden_mlp)
            .chain(&self.forward_pass)
            .chain(&self.backward_pass)
        {
            flat.extend(m.iter().map(|&v| grads.get(v)));
        }
        flat.extend(self.readout.iter().map(|&v| grads.get(v)));
        flat
    }
}

/// Constant-vector matvec followed by ReLU, noting kink margins.
fn matvec_const_relu(
    tape: &mut Tape,
    m: &[Var],
    rows: usize,
    cols: usize,
    x: &[f64],
    margin: &mut KinkMargin,
) -> Vec<Var> {
    (0..rows)
        .map(|r| {
            let row = &m[r * cols..(r + 1) * cols];
            let s = tape.dot_const(row, x);
            margin.note(tape.value(s).abs());
            tape.relu(s)
        })
        .collect()
}

/// ReLU over a vector of variables, noting kink margins.
fn relu_all(tape: &mut Tape, vars: Vec<Var>, margin: &mut KinkMargin) -> Vec<Var> {
    vars.into_iter()
        .map(|v| {
            margin.note(tape.value(v).abs());
            tape.relu(v)
        })
        .collect()
}

/// Sum of three variable vectors followed by ReLU, mirroring the f64 path's
/// `(t1 + t2) + t3` association.
fn sum3_relu(tape: &mut Tape, a: &[Var], b: &[Var], c: &[Var], margin: &mut KinkMargin) -> Vec<Var> {
    (0..a.len())
        .map(|i| {
            let ab = tape.add(a[i], b[i]);
            let abc = tape.add(ab, c[i]);
            margin.note(tape.value(abc).abs());
            tape.relu(abc)
        })
        .collect()
}

/// `p×p` variable matrix times a variable p-vector (no activation).
fn matvec_plain(tape: &mut Tape, m: &[Var], rows: usize, cols: usize, x: &[Var]) -> Vec<Var> {
    (0..rows)
        .map(|r| tape.dot(&m[r * cols..(r + 1) * cols], x))
        .collect()
}

/// Smallest distance to a branch point observed while building a rollout:
/// ReLU inputs, pre-clamp distances to the feasible interval ends, and the
/// gradient entries feeding the sign feature. Useful for sampling instances
/// away from nondifferentiable kinks when checking gradients against finite
/// differences.
#[derive(Debug, Clone, Copy)]
pub struct KinkMargin(pub f64);

impl KinkMargin {
    fn fresh() -> Self {
        KinkMargin(f64::INFINITY)
    }

    fn note(&mut self, distance: f64) {
        if distance < self.0 {
            self.0 = distance;
        }
    }
}

/// The differentiable rollout: K unrolled attack iterations from `x0`,
/// scored by `−Σ_t γ^t · L(x^t)`. Returns the loss variable.
///
/// Layout of per-layer embeddings on the tape: a vector of nodes, each a
/// p-vector of tape variables.
#[allow(clippy::too_many_arguments)]
fn rollout_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &GnnParams,
    net: &Network,
    prop: &AttackProperty,
    ctx: &PropertyContext,
    x0: &[f64],
    horizon: usize,
    gamma: f64,
    alpha: f64,
    margin: &mut KinkMargin,
) -> Result<Var> {
    let p = params.p;
    let n = net.layer_count();
    let feasible = &ctx.feasible;
    let x_lp: Vec<f64> = match ctx.mode {
        FeatureMode::Dual => ctx.dual.x_lp.clone(),
        FeatureMode::Wk => prop.ball.clamped_center(),
    };

    // Hidden-layer features never change across iterations, so their
    // embeddings are built once and reused.
    let mut hidden_emb: Vec<Vec<Vec<Var>>> = Vec::with_capacity(n);
    for k in 0..n {
        let (lb, ub) = ctx.bounds.layer(k);
        let mut layer_emb = Vec::with_capacity(lb.len());
        for j in 0..lb.len() {
            let rho = match ctx.mode {
                FeatureMode::Dual if k < n - 1 => ctx.dual.rho[k][j],
                _ => 0.0,
            };
            let feat = [lb[j], ub[j], rho];
            let mut mu = matvec_const_relu(
                tape,
                &pv.hidden_mlp[0],
                p,
                HIDDEN_FEATURES,
                &feat,
                margin,
            );
            for l in 1..=params.t1 {
                let lin = matvec_plain(tape, &pv.hidden_mlp[l], p, p, &mu);
                mu = relu_all(tape, lin, margin);
            }
            layer_emb.push(mu);
        }
        hidden_emb.push(layer_emb);
    }

    let mut x_vars: Vec<Var> = x0.iter().map(|&v| tape.constant(v)).collect();
    let mut loss_acc = tape.constant(0.0);

    for t in 1..=horizon {
        // Gradient sign at the current tape values, held constant this step.
        let x_vals: Vec<f64> = x_vars.iter().map(|&v| tape.value(v)).collect();
        let raw_grad = net.input_gradient(&x_vals, prop.y, prop.y_tar)?;
        for g in &raw_grad {
            margin.note(g.abs());
        }
        let signs = sgn_vec(&raw_grad);

        // Input-layer embeddings: 5 features, one of them the live x-var.
        let mut emb: Vec<Vec<Vec<Var>>> = Vec::with_capacity(n + 1);
        let mut input_layer = Vec::with_capacity(x_vars.len());
        for i in 0..x_vars.len() {
            let (lo, hi) = feasible[i];
            // feature order: x, sign, lo, hi, x_lp
            let consts = [signs[i], lo, hi, x_lp[i]];
            let mut mu = Vec::with_capacity(p);
            for r in 0..p {
                let row = &pv.input_mlp[0][r * INPUT_FEATURES..(r + 1) * INPUT_FEATURES];
                let x_term = tape.mul(row[0], x_vars[i]);
                let zero = tape.constant(0.0);
                let mut acc = tape.add(zero, x_term);
                for (c, &val) in consts.iter().enumerate() {
                    let term = tape.scale(row[c + 1], val);
                    acc = tape.add(acc, term);
                }
                margin.note(tape.value(acc).abs());
                mu.push(tape.relu(acc));
            }
            for l in 1..=params.t1 {
                let lin = matvec_plain(tape, &pv.input_mlp[l], p, p, &mu);
                mu = relu_all(tape, lin, margin);
            }
            input_layer.push(mu);
        }
        emb.push(input_layer);
        for layer in &hidden_emb {
            emb.push(layer.clone());
        }

        // Message passes, sequential in-place sweeps.
        for _ in 0..params.t2 {
            for k in 1..=n {
                let layer = &net.layers()[k - 1];
                let w = &layer.weight;
                let new_layer: Vec<Vec<Var>> = (0..w.rows())
                    .map(|i| {
                        // lifted = (W μ_{k-1} + b)[i] as p-vector
                        let row = w.row(i);
                        let lifted: Vec<Var> = (0..p)
                            .map(|c| {
                                let mut acc = tape.constant(0.0);
                                for (j, &wij) in row.iter().enumerate() {
                                    if wij == 0.0 {
                                        continue;
                                    }
                                    let term = tape.scale(emb[k - 1][j][c], wij);
                                    acc = tape.add(acc, term);
                                }
                                tape.add_const(acc, layer.bias[i])
                            })
                            .collect();
                        let nm: Vec<Var> = (0..p)
                            .map(|c| {
                                let mut acc = tape.constant(0.0);
                                for (j, &wij) in row.iter().enumerate() {
                                    if wij == 0.0 {
                                        continue;
                                    }
                                    acc = tape.add(acc, emb[k - 1][j][c]);
                                }
                                tape.scale(acc, 1.0 / ctx.norms.into[k - 1][i])
                            })
                            .collect();
                        let t1v = matvec_plain(tape, &pv.forward_pass[0], p, p, &emb[k][i]);
                        let t2v = matvec_plain(tape, &pv.forward_pass[1], p, p, &lifted);
                        let t3v = matvec_plain(tape, &pv.forward_pass[2], p, p, &nm);
                        sum3_relu(tape, &t1v, &t2v, &t3v, margin)
                    })
                    .collect();
                emb[k] = new_layer;
            }
            for k in (0..n).rev() {
                let layer = &net.layers()[k];
                let w = &layer.weight;
                let new_layer: Vec<Vec<Var>> = (0..w.cols())
                    .map(|i| {
                        // lowered = (Wᵀ (μ_{k+1} − b))[i]
                        let lowered: Vec<Var> = (0..p)
                            .map(|c| {
                                let mut acc = tape.constant(0.0);
                                for j in 0..w.rows() {
                                    let wji = w.get(j, i);
                                    if wji == 0.0 {
                                        continue;
                                    }
                                    let shifted = tape.add_const(emb[k + 1][j][c], -layer.bias[j]);
                                    let term = tape.scale(shifted, wji);
                                    acc = tape.add(acc, term);
                                }
                                acc
                            })
                            .collect();
                        let nm: Vec<Var> = (0..p)
                            .map(|c| {
                                let mut acc = tape.constant(0.0);
                                for j in 0..w.rows() {
                                    if w.get(j, i) == 0.0 {
                                        continue;
                                    }
                                    acc = tape.add(acc, emb[k + 1][j][c]);
                                }
                                tape.scale(acc, 1.0 / ctx.norms.out_of[k][i])
                            })
                            .collect();
                        let t1v = matvec_plain(tape, &pv.backward_pass[0], p, p, &emb[k][i]);
                        let t2v = matvec_plain(tape, &pv.backward_pass[1], p, p, &lowered);
                        let t3v = matvec_plain(tape, &pv.backward_pass[2], p, p, &nm);
                        sum3_relu(tape, &t1v, &t2v, &t3v, margin)
                    })
                    .collect();
                emb[k] = new_layer;
            }
        }

        // Readout and projected update.
        let mut new_x = Vec::with_capacity(x_vars.len());
        for i in 0..x_vars.len() {
            let dir = tape.dot(&pv.readout, &emb[0][i]);
            let step = tape.scale(dir, alpha);
            let moved = tape.add(x_vars[i], step);
            let (lo, hi) = feasible[i];
            let v = tape.value(moved);
            margin.note((v - lo).abs());
            margin.note((v - hi).abs());
            new_x.push(tape.clamp(moved, lo, hi));
        }
        x_vars = new_x;

        // Adversarial loss of the new iterate through the (constant) net.
        let mut cur: Vec<Var> = x_vars.clone();
        for (li, layer) in net.layers().iter().enumerate() {
            let mut next = Vec::with_capacity(layer.out_dim());
            for r in 0..layer.out_dim() {
                let s = tape.dot_const(&cur, layer.weight.row(r));
                let s = tape.add_const(s, layer.bias[r]);
                if li + 1 < n {
                    margin.note(tape.value(s).abs());
                    next.push(tape.relu(s));
                } else {
                    next.push(s);
                }
            }
            cur = next;
        }
        let step_loss = tape.sub(cur[prop.y_tar], cur[prop.y]);
        if !tape.value(step_loss).is_finite() {
            return Err(Error::NonFinite(format!("rollout loss at iteration {t}")));
        }
        let weighted = tape.scale(step_loss, gamma.powi(t as i32));
        loss_acc = tape.sub(loss_acc, weighted);
    }
    Ok(loss_acc)
}

/// Unrolled decayed loss of one rollout: `−Σ_{t=1..K} γ^t · L(x^t)` with no
/// early stopping. `x0` must be feasible.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_loss(
    net: &Network,
    params: &GnnParams,
    prop: &AttackProperty,
    ctx: &PropertyContext,
    x0: &[f64],
    horizon: usize,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    Ok(unrolled_loss_with_margin(net, params, prop, ctx, x0, horizon, gamma, alpha)?.0)
}

/// [`unrolled_loss`] plus the smallest branch-point distance seen along the
/// rollout.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_loss_with_margin(
    net: &Network,
    params: &GnnParams,
    prop: &AttackProperty,
    ctx: &PropertyContext,
    x0: &[f64],
    horizon: usize,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, KinkMargin)> {
    let mut tape = Tape::new();
    let pv = ParamVars::create(&mut tape, params);
    let mut margin = KinkMargin::fresh();
    let loss = rollout_on_tape(
        &mut tape, &pv, params, net, prop, ctx, x0, horizon, gamma, alpha, &mut margin,
    )?;
    Ok((tape.value(loss), margin))
}

/// Sum of rollout losses over every sample and `starts` random starts, with
/// the per-(sample, start, epoch) seed derivation.
pub fn total_loss(
    net: &Network,
    params: &GnnParams,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<f64> {
    cfg.check()?;
    let mut total = 0.0;
    for sample in dataset {
        let prop = sample.property(net)?;
        let ctx = PropertyContext::prepare(net, &prop, cfg.feature_mode, &cfg.ascent)?;
        for j in 0..cfg.starts {
            let x0 = uniform_start(&prop.ball, sample_start_seed(cfg.seed, sample, j, epoch));
            total += unrolled_loss(
                net,
                params,
                &prop,
                &ctx,
                &x0,
                cfg.horizon,
                cfg.gamma,
                cfg.alpha,
            )?;
        }
    }
    Ok(total)
}

/// One batch for gradient computation: a property, its precomputed context,
/// and the start points to roll out from.
pub struct Batch<'a> {
    pub prop: &'a AttackProperty,
    pub ctx: &'a PropertyContext,
    pub starts: &'a [Vec<f64>],
}

/// Exact reverse-mode gradient of the summed rollout losses with respect to
/// every parameter, flattened in [`flatten_params`] order, together with the
/// summed loss value. Accumulation order is fixed (samples then starts), so
/// results are reproducible.
pub fn param_gradients(
    net: &Network,
    params: &GnnParams,
    batches: &[Batch<'_>],
    horizon: usize,
    gamma: f64,
    alpha: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut grad_sum: Option<Vec<f64>> = None;
    let mut loss_sum = 0.0;
    for batch in batches {
        for x0 in batch.starts {
            let mut tape = Tape::new();
            let pv = ParamVars::create(&mut tape, params);
            let mut margin = KinkMargin::fresh();
            let loss = rollout_on_tape(
                &mut tape, &pv, params, net, batch.prop, batch.ctx, x0, horizon, gamma, alpha,
                &mut margin,
            )?;
            loss_sum += tape.value(loss);
            let grads = tape.backward(loss);
            let flat = pv.gradient(&grads);
            match grad_sum.as_mut() {
                None => grad_sum = Some(flat),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&flat) {
                        *a += g;
                    }
                }
            }
        }
    }
    let grad = grad_sum.unwrap_or_else(|| vec![0.0; flatten_params(params).len()]);
    Ok((grad, loss_sum))
}

/// Adam with decoupled weight decay over a flat parameter vector.
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(len: usize) -> Self {
        AdamW {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] = theta[i] * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Precompute the per-sample attack context once; it does not depend on the
/// parameters being trained.
fn prepare_contexts(
    net: &Network,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<Vec<(AttackProperty, PropertyContext)>> {
    dataset
        .iter()
        .map(|s| {
            let prop = s.property(net)?;
            let ctx = PropertyContext::prepare(net, &prop, cfg.feature_mode, &cfg.ascent)?;
            Ok((prop, ctx))
        })
        .collect()
}

fn run_epochs(
    net: &Network,
    mut params: GnnParams,
    dataset: &[TrainingSample],
    validation: Option<&[TrainingSample]>,
    cfg: &TrainConfig,
    deadline: Option<Instant>,
) -> Result<(GnnParams, Vec<EpochLog>)> {
    cfg.check()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    params.validate()?;
    let contexts = prepare_contexts(net, dataset, cfg)?;
    let mut flat = flatten_params(&params);
    let mut adam = AdamW::new(flat.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, GnnParams)> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for (sample, (prop, ctx)) in dataset.iter().zip(&contexts) {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                break 'epochs;
            }
            let starts: Vec<Vec<f64>> = (0..cfg.starts)
                .map(|j| {
                    uniform_start(&prop.ball, sample_start_seed(cfg.seed, sample, j, epoch as u64))
                })
                .collect();
            let batch = Batch {
                prop,
                ctx,
                starts: &starts,
            };
            let (grad, loss) = param_gradients(
                net,
                &params,
                std::slice::from_ref(&batch),
                cfg.horizon,
                cfg.gamma,
                cfg.alpha,
            )?;
            epoch_loss += loss;
            adam.step(&mut flat, &grad, lr, cfg.weight_decay);
            params = unflatten_params(&params, &flat);
        }
        log.push(EpochLog {
            epoch,
            total_loss: epoch_loss,
            lr,
        });
        if let Some(val) = validation {
            let val_loss = total_loss(net, &params, val, cfg, VALIDATION_EPOCH)?;
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, params.clone()));
            }
        }
    }
    let final_params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok((final_params, log))
}

/// Train fresh parameters on a dataset. Returns the best-validation
/// parameters when a validation split is given, the final parameters
/// otherwise, plus the per-epoch loss log.
pub fn train(
    net: &Network,
    dataset: &[TrainingSample],
    validation: Option<&[TrainingSample]>,
    cfg: &TrainConfig,
) -> Result<(GnnParams, Vec<EpochLog>)> {
    let params = GnnParams::random(cfg.p, cfg.t1, cfg.t2, cfg.seed);
    run_epochs(net, params, dataset, validation, cfg, None)
}

/// Continue training existing parameters on a new dataset under a wall-clock
/// budget. A zero budget returns the parameters unchanged.
pub fn fine_tune(
    net: &Network,
    params: &GnnParams,
    dataset: &[TrainingSample],
    budget: Duration,
    cfg: &TrainConfig,
) -> Result<(GnnParams, Vec<EpochLog>)> {
    if budget.is_zero() {
        return Ok((params.clone(), Vec::new()));
    }
    let deadline = Instant::now() + budget;
    run_epochs(net, params.clone(), dataset, None, cfg, Some(deadline))
}

/// Write the loss log as CSV (`epoch,total_loss,lr`).
pub fn write_loss_log(path: impl AsRef<std::path::Path>, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,total_loss,lr\n");
    for entry in log {
        text.push_str(&format!("{},{},{}\n", entry.epoch, entry.total_loss, entry.lr));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{classified_interior_property, random_network};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_setup(seed: u64) -> (Network, AttackProperty, PropertyContext) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network(&mut rng, &[3, 5, 4, 2]);
        let prop = classified_interior_property(&mut rng, &net, 0.15);
        let ctx = PropertyContext::prepare(
            &net,
            &prop,
            FeatureMode::Wk,
            &AscentConfig::default(),
        )
        .unwrap();
        (net, prop, ctx)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            horizon: 3,
            gamma: 0.9,
            starts: 2,
            epochs: 2,
            p: 4,
            t1: 1,
            t2: 1,
            feature_mode: FeatureMode::Wk,
            ascent: AscentConfig { steps: 5, ..Default::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn decayed_sum_by_hand() {
        // K=2, γ=0.9, per-step losses 1 and 2 → −(0.9·1 + 0.81·2) = −2.52.
        let direct: f64 = -(0.9 * 1.0 + 0.81 * 2.0);
        assert!((direct - (-2.52)).abs() < 1e-12);
    }

    #[test]
    fn zero_readout_loss_is_geometric_sum_of_start_loss() {
        let (net, prop, ctx) = small_setup(3);
        let params = GnnParams::zeros(4, 1, 1);
        let x0 = prop.ball.clamped_center();
        let k = 4;
        let gamma: f64 = 0.8;
        let loss = unrolled_loss(&net, &params, &prop, &ctx, &x0, k, gamma, 1e-2).unwrap();
        let base = net.adversarial_loss(&x0, prop.y, prop.y_tar).unwrap();
        let geo: f64 = (1..=k).map(|t| gamma.powi(t as i32)).sum();
        assert!((loss - (-base * geo)).abs() < 1e-9, "{loss} vs {}", -base * geo);
    }

    #[test]
    fn rollout_matches_inference_iterates() {
        // The tape rollout and the inference path implement the same map:
        // replay the logged iterates and recompute the decayed sum.
        let (net, prop, ctx) = small_setup(7);
        let params = GnnParams::random(4, 1, 1, 11);
        let x0 = prop.ball.clamped_center();
        let k = 4;
        let gamma = 0.9;
        let alpha = 1e-2;
        let loss = unrolled_loss(&net, &params, &prop, &ctx, &x0, k, gamma, alpha).unwrap();

        let mut x = x0.clone();
        let mut expected = 0.0;
        for t in 1..=k {
            let dir = crate::gnn::direction(&net, &prop, &ctx, &params, &x).unwrap();
            let stepped: Vec<f64> = x.iter().zip(&dir).map(|(&xi, &di)| xi + alpha * di).collect();
            x = crate::attacks::project(&stepped, &prop.ball);
            let l = net.adversarial_loss(&x, prop.y, prop.y_tar).unwrap();
            expected -= gamma.powi(t as i32) * l;
        }
        assert!(
            (loss - expected).abs() <= 1e-9,
            "tape {loss} vs replay {expected}"
        );
    }

    #[test]
    fn total_loss_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = random_network(&mut rng, &[3, 5, 2]);
        let prop = classified_interior_property(&mut rng, &net, 0.15);
        let sample = TrainingSample {
            x: prop.ball.center.clone(),
            y: prop.y,
            y_tar: prop.y_tar,
            epsilon: prop.ball.epsilon,
            net_ref: None,
        };
        let cfg = quick_cfg();
        let params = GnnParams::random(4, 1, 1, 2);
        let one = total_loss(&net, &params, std::slice::from_ref(&sample), &cfg, 0).unwrap();
        let two = total_loss(&net, &params, &[sample.clone(), sample], &cfg, 0).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-9);
    }

    #[test]
    fn single_start_total_equals_unrolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let net = random_network(&mut rng, &[3, 4, 2]);
        let prop = classified_interior_property(&mut rng, &net, 0.1);
        let sample = TrainingSample {
            x: prop.ball.center.clone(),
            y: prop.y,
            y_tar: prop.y_tar,
            epsilon: prop.ball.epsilon,
            net_ref: None,
        };
        let cfg = TrainConfig {
            starts: 1,
            ..quick_cfg()
        };
        let params = GnnParams::random(4, 1, 1, 2);
        let sample2 = sample.clone();
        let total = total_loss(&net, &params, std::slice::from_ref(&sample), &cfg, 5).unwrap();
        let ctx = PropertyContext::prepare(&net, &prop, cfg.feature_mode, &cfg.ascent).unwrap();
        let x0 = uniform_start(&prop.ball, sample_start_seed(cfg.seed, &sample2, 0, 5));
        let single = unrolled_loss(
            &net, &params, &prop, &ctx, &x0, cfg.horizon, cfg.gamma, cfg.alpha,
        )
        .unwrap();
        assert_eq!(total, single);
    }

    #[test]
    fn per_start_sum_matches_batch() {
        let (net, prop, ctx) = small_setup(12);
        let params = GnnParams::random(4, 1, 1, 6);
        let starts: Vec<Vec<f64>> = (0..3)
            .map(|j| uniform_start(&prop.ball, start_seed(1, 0, j, 0)))
            .collect();
        let batch = Batch { prop: &prop, ctx: &ctx, starts: &starts };
        let (_, batch_loss) =
            param_gradients(&net, &params, std::slice::from_ref(&batch), 3, 0.9, 1e-2).unwrap();
        let mut sum = 0.0;
        for s in &starts {
            sum += unrolled_loss(&net, &params, &prop, &ctx, s, 3, 0.9, 1e-2).unwrap();
        }
        assert!((batch_loss - sum).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_doubles_gradients() {
        let (net, prop, ctx) = small_setup(15);
        let params = GnnParams::random(4, 1, 1, 8);
        let starts = vec![prop.ball.clamped_center()];
        let batch = Batch { prop: &prop, ctx: &ctx, starts: &starts };
        let (g1, _) =
            param_gradients(&net, &params, std::slice::from_ref(&batch), 3, 0.9, 1e-2).unwrap();
        let batches = [
            Batch { prop: &prop, ctx: &ctx, starts: &starts },
            Batch { prop: &prop, ctx: &ctx, starts: &starts },
        ];
        let (g2, _) = param_gradients(&net, &params, &batches, 3, 0.9, 1e-2).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_ratio_monotone_in_gamma() {
        // γ^K / γ^1 = γ^(K−1) is strictly increasing in γ for K > 1.
        let k = 5;
        let ratios: Vec<f64> = [0.5, 0.7, 0.9, 0.99]
            .iter()
            .map(|g: &f64| g.powi(k) / g)
            .collect();
        for w in ratios.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let params = GnnParams::random(4, 2, 1, 3);
        let flat = flatten_params(&params);
        let back = unflatten_params(&params, &flat);
        assert_eq!(params, back);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let net = random_network(&mut rng, &[3, 4, 2]);
        let prop = classified_interior_property(&mut rng, &net, 0.1);
        let sample = TrainingSample {
            x: prop.ball.center.clone(),
            y: prop.y,
            y_tar: prop.y_tar,
            epsilon: prop.ball.epsilon,
            net_ref: None,
        };
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..quick_cfg()
        };
        let (params, log) = train(&net, &[sample], None, &cfg).unwrap();
        assert_eq!(params, GnnParams::random(cfg.p, cfg.t1, cfg.t2, cfg.seed));
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let net = random_network(&mut rng, &[3, 4, 2]);
        let prop = classified_interior_property(&mut rng, &net, 0.12);
        let sample = TrainingSample {
            x: prop.ball.center.clone(),
            y: prop.y,
            y_tar: prop.y_tar,
            epsilon: prop.ball.epsilon,
            net_ref: None,
        };
        let cfg = TrainConfig { epochs: 1, ..quick_cfg() };
        let (p1, l1) = train(&net, std::slice::from_ref(&sample), None, &cfg).unwrap();
        let (p2, l2) = train(&net, &[sample], None, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1[0].total_loss, l2[0].total_loss);
    }

    #[test]
    fn fine_tune_zero_budget_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let net = random_network(&mut rng, &[3, 4, 2]);
        let prop = classified_interior_property(&mut rng, &net, 0.1);
        let sample = TrainingSample {
            x: prop.ball.center.clone(),
            y: prop.y,
            y_tar: prop.y_tar,
            epsilon: prop.ball.epsilon,
            net_ref: None,
        };
        let params = GnnParams::random(4, 1, 1, 4);
        let (tuned, log) =
            fine_tune(&net, &params, &[sample], Duration::ZERO, &quick_cfg()).unwrap();
        assert_eq!(tuned, params);
        assert!(log.is_empty());
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(19) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(20) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(30) - 0.0001).abs() < 1e-15);
        assert!((cfg.lr_at(35) - 0.00001).abs() < 1e-15);
    }

    #[test]
    fn sample_validation_checks_classification() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let net = random_network(&mut rng, &[3, 5, 2]);
        let x = vec![0.5, 0.5, 0.5];
        let y = net.classify(&x).unwrap();
        let good = TrainingSample {
            x: x.clone(),
            y,
            y_tar: 1 - y,
            epsilon: 0.1,
            net_ref: None,
        };
        assert!(good.validate(&net).is_ok());
        let bad = TrainingSample {
            x,
            y: 1 - y,
            y_tar: y,
            epsilon: 0.1,
            net_ref: None,
        };
        assert!(bad.validate(&net).is_err());
    }
}
