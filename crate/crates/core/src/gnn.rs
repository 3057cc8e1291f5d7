//! The learned attack: a graph network isomorphic to the target network
//! that turns per-node features into an update direction each iteration.
//!
//! Nodes mirror the target's neurons. Input-layer nodes carry a 5-feature
//! vector (current point, gradient sign, feasible-interval ends, recovered
//! primal); all other nodes carry a 3-feature vector (pre-activation bounds
//! and the dual variable, zero for the output layer). Two MLPs embed the
//! features, forward/backward sweeps exchange information along the target's
//! weights, and a linear readout of the input layer yields the direction.
//! The same parameter set runs on any architecture.

use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{project, AttackOutcome, AttackProperty};
use crate::bounds::{merged_bounds, LayerBounds};
use crate::error::{Error, Result};
use crate::linalg::{dot, sgn_vec, Matrix};
use crate::netcore::Network;
use crate::relaxation::{supergradient_ascent, zero_dual_state, AscentConfig, DualState};

/// Number of features on input-layer nodes.
pub const INPUT_FEATURES: usize = 5;
/// Number of features on hidden/output-layer nodes.
pub const HIDDEN_FEATURES: usize = 3;

/// Which information feeds the node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Duals and recovered primal from supergradient ascent.
    Dual,
    /// Bounds only: dual entries are zeroed and the primal candidate is the
    /// clamped ball center.
    Wk,
}

/// Learnable parameters. Shapes depend only on the embedding size and MLP
/// depth, never on the attacked architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub p: usize,
    #[serde(rename = "T1")]
    pub t1: usize,
    #[serde(rename = "T2")]
    pub t2: usize,
    /// Input-layer MLP: first matrix `p×5`, then `t1` matrices `p×p`.
    pub input_mlp: Vec<Matrix>,
    /// Hidden/output-layer MLP: first matrix `p×3`, then `t1` matrices `p×p`.
    pub hidden_mlp: Vec<Matrix>,
    /// Forward-sweep mixing matrices, each `p×p`.
    pub forward_pass: Vec<Matrix>,
    /// Backward-sweep mixing matrices, each `p×p`.
    pub backward_pass: Vec<Matrix>,
    /// Readout vector of length `p`.
    pub readout: Vec<f64>,
}

impl GnnParams {
    /// All-zero parameters (useful as a baseline: the readout is zero, so
    /// the attack never moves).
    pub fn zeros(p: usize, t1: usize, t2: usize) -> Self {
        let mk = |rows, cols| Matrix::zeros(rows, cols);
        let mut input_mlp = vec![mk(p, INPUT_FEATURES)];
        let mut hidden_mlp = vec![mk(p, HIDDEN_FEATURES)];
        for _ in 0..t1 {
            input_mlp.push(mk(p, p));
            hidden_mlp.push(mk(p, p));
        }
        GnnParams {
            p,
            t1,
            t2,
            input_mlp,
            hidden_mlp,
            forward_pass: vec![mk(p, p), mk(p, p), mk(p, p)],
            backward_pass: vec![mk(p, p), mk(p, p), mk(p, p)],
            readout: vec![0.0; p],
        }
    }

    /// Seeded uniform initialization scaled by `1/√fan_in` per matrix.
    pub fn random(p: usize, t1: usize, t2: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = GnnParams::zeros(p, t1, t2);
        for m in params
            .input_mlp
            .iter_mut()
            .chain(params.hidden_mlp.iter_mut())
            .chain(params.forward_pass.iter_mut())
            .chain(params.backward_pass.iter_mut())
        {
            let scale = 1.0 / (m.cols() as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.random_range(-scale..scale);
            }
        }
        let scale = 1.0 / (p as f64).sqrt();
        for v in params.readout.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
        params
    }

    /// Validate every shape invariant.
    pub fn validate(&self) -> Result<()> {
        let p = self.p;
        let check = |m: &Matrix, rows: usize, cols: usize, what: &str| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::shape(format!(
                    "{what} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        if self.input_mlp.len() != self.t1 + 1 || self.hidden_mlp.len() != self.t1 + 1 {
            return Err(Error::shape(format!(
                "embedding MLPs need {} matrices each (got {} and {})",
                self.t1 + 1,
                self.input_mlp.len(),
                self.hidden_mlp.len()
            )));
        }
        check(&self.input_mlp[0], p, INPUT_FEATURES, "input_mlp[0]")?;
        check(&self.hidden_mlp[0], p, HIDDEN_FEATURES, "hidden_mlp[0]")?;
        for l in 1..=self.t1 {
            check(&self.input_mlp[l], p, p, "input_mlp[l]")?;
            check(&self.hidden_mlp[l], p, p, "hidden_mlp[l]")?;
        }
        if self.forward_pass.len() != 3 || self.backward_pass.len() != 3 {
            return Err(Error::shape("each pass needs exactly 3 mixing matrices"));
        }
        for m in self.forward_pass.iter().chain(&self.backward_pass) {
            check(m, p, p, "pass matrix")?;
        }
        if self.readout.len() != p {
            return Err(Error::shape(format!(
                "readout has {} entries, expected {p}",
                self.readout.len()
            )));
        }
        Ok(())
    }

    /// Parse and validate from JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let params: GnnParams = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::file(path.display().to_string(), e.to_string()))?;
        GnnParams::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameter serialization cannot fail")
    }

    pub fn to_json_file(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Per-node features: 5-vectors for the input layer, 3-vectors elsewhere.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub input: Vec<[f64; INPUT_FEATURES]>,
    /// Layers `1..=L` in order (the last one uses 0 for the dual entry).
    pub hidden: Vec<Vec<[f64; HIDDEN_FEATURES]>>,
}

/// Per-layer embedding matrices (nodes × p).
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    /// Index 0 is the input layer, then one entry per network layer.
    pub layers: Vec<Matrix>,
}

/// Neighbor-count divisors for the message passes, per layer transition.
/// For transition `k` (weights of layer `k`), `into[k][i]` counts the
/// nonzero entries of row `i` (neighbors feeding node `i` of layer `k`) and
/// `out_of[k][j]` the nonzero entries of column `j` (neighbors of node `j`
/// of layer `k−1` in layer `k`). Disconnected nodes get divisor 1 so the
/// zero sum stays zero.
#[derive(Debug, Clone)]
pub struct NeighborNorms {
    pub into: Vec<Vec<f64>>,
    pub out_of: Vec<Vec<f64>>,
}

impl NeighborNorms {
    pub fn for_network(net: &Network) -> Self {
        let mut into = Vec::with_capacity(net.layer_count());
        let mut out_of = Vec::with_capacity(net.layer_count());
        for layer in net.layers() {
            let w = &layer.weight;
            into.push(
                (0..w.rows())
                    .map(|i| (w.row_nnz(i).max(1)) as f64)
                    .collect(),
            );
            out_of.push(
                (0..w.cols())
                    .map(|j| (w.col_nnz(j).max(1)) as f64)
                    .collect(),
            );
        }
        NeighborNorms { into, out_of }
    }
}

/// Everything per-property the attack computes once: feasible intervals,
/// bounds, dual information, and neighbor norms.
#[derive(Debug, Clone)]
pub struct PropertyContext {
    pub bounds: LayerBounds,
    pub dual: DualState,
    pub norms: NeighborNorms,
    pub feasible: Vec<(f64, f64)>,
    pub mode: FeatureMode,
}

impl PropertyContext {
    /// Precompute bounds (tightest of interval and backward linear), the
    /// dual state (unless the mode skips it), and neighbor norms.
    pub fn prepare(
        net: &Network,
        prop: &AttackProperty,
        mode: FeatureMode,
        ascent: &AscentConfig,
    ) -> Result<Self> {
        let bounds = merged_bounds(net, &prop.ball)?;
        let dual = match mode {
            FeatureMode::Dual => supergradient_ascent(net, prop, &bounds, ascent)?,
            FeatureMode::Wk => zero_dual_state(net, &prop.ball),
        };
        Ok(PropertyContext {
            bounds,
            dual,
            norms: NeighborNorms::for_network(net),
            feasible: prop.ball.feasible_box(),
            mode,
        })
    }
}

/// Assemble the feature set at the current iterate. Only the point and
/// gradient-sign entries change between iterations; bounds, duals, and the
/// recovered primal are per-property constants.
pub fn compute_features(
    net: &Network,
    prop: &AttackProperty,
    x_t: &[f64],
    bounds: &LayerBounds,
    dual: Option<&DualState>,
    mode: FeatureMode,
) -> Result<FeatureSet> {
    let dual = match (mode, dual) {
        (FeatureMode::Dual, Some(d)) => Some(d),
        (FeatureMode::Dual, None) => {
            return Err(Error::config(
                "feature mode 'dual' requires a dual state",
            ))
        }
        (FeatureMode::Wk, _) => None,
    };
    let grad_sign = sgn_vec(&net.input_gradient(x_t, prop.y, prop.y_tar)?);
    let x_lp: Vec<f64> = match dual {
        Some(d) => d.x_lp.clone(),
        None => prop.ball.clamped_center(),
    };
    let mut input = Vec::with_capacity(x_t.len());
    for i in 0..x_t.len() {
        let (lo, hi) = prop.ball.feasible_interval(i);
        input.push([x_t[i], grad_sign[i], lo, hi, x_lp[i]]);
    }
    let n = net.layer_count();
    let mut hidden = Vec::with_capacity(n);
    for k in 0..n {
        let (lb, ub) = bounds.layer(k);
        let mut rows = Vec::with_capacity(lb.len());
        for j in 0..lb.len() {
            let rho = match dual {
                Some(d) if k < n - 1 => d.rho[k][j],
                _ => 0.0,
            };
            rows.push([lb[j], ub[j], rho]);
        }
        hidden.push(rows);
    }
    let finite = input.iter().flatten().chain(hidden.iter().flatten().flatten());
    for &v in finite {
        if !v.is_finite() {
            return Err(Error::NonFinite("feature entry".into()));
        }
    }
    Ok(FeatureSet { input, hidden })
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        // derivative-0-at-0 convention: anything not strictly positive
        // (including NaN inputs, which cannot occur for finite features)
        // collapses to 0
        if *x <= 0.0 || x.is_nan() {
            *x = 0.0;
        }
    }
}

/// Apply an embedding MLP to one feature row.
fn embed_row(mlp: &[Matrix], features: &[f64]) -> Vec<f64> {
    let mut mu = mlp[0].matvec(features);
    relu_inplace(&mut mu);
    for m in &mlp[1..] {
        let mut next = m.matvec(&mu);
        relu_inplace(&mut next);
        mu = next;
    }
    mu
}

/// Initial embeddings: each node's feature vector through its MLP.
pub fn init_embeddings(features: &FeatureSet, params: &GnnParams) -> Result<EmbeddingState> {
    params.validate()?;
    let p = params.p;
    let mut layers = Vec::with_capacity(features.hidden.len() + 1);
    let mut input = Matrix::zeros(features.input.len(), p);
    for (i, f) in features.input.iter().enumerate() {
        let mu = embed_row(&params.input_mlp, f);
        for (c, v) in mu.into_iter().enumerate() {
            input.set(i, c, v);
        }
    }
    layers.push(input);
    for rows in &features.hidden {
        let mut m = Matrix::zeros(rows.len(), p);
        for (i, f) in rows.iter().enumerate() {
            let mu = embed_row(&params.hidden_mlp, f);
            for (c, v) in mu.into_iter().enumerate() {
                m.set(i, c, v);
            }
        }
        layers.push(m);
    }
    Ok(EmbeddingState { layers })
}

/// Neighbor mean feeding layer `k` of the forward sweep: average of the
/// previous layer's embeddings over nonzero weights, divided by in-degree.
fn forward_neighbor_mean(w: &Matrix, prev: &Matrix, divisors: &[f64]) -> Matrix {
    let p = prev.cols();
    let mut out = Matrix::zeros(w.rows(), p);
    for i in 0..w.rows() {
        let row = w.row(i);
        for (j, &wij) in row.iter().enumerate() {
            if wij == 0.0 {
                continue;
            }
            let src = prev.row(j);
            for c in 0..p {
                let cur = out.get(i, c);
                out.set(i, c, cur + src[c]);
            }
        }
        let recip = 1.0 / divisors[i];
        for c in 0..p {
            let cur = out.get(i, c);
            out.set(i, c, cur * recip);
        }
    }
    out
}

/// Neighbor mean feeding layer `k` of the backward sweep: average of the
/// next layer's embeddings over nonzero weights, divided by out-degree.
fn backward_neighbor_mean(w_next: &Matrix, next: &Matrix, divisors: &[f64]) -> Matrix {
    let p = next.cols();
    let mut out = Matrix::zeros(w_next.cols(), p);
    for j in 0..w_next.rows() {
        let row = w_next.row(j);
        let src = next.row(j);
        for (i, &wji) in row.iter().enumerate() {
            if wji == 0.0 {
                continue;
            }
            for c in 0..p {
                let cur = out.get(i, c);
                out.set(i, c, cur + src[c]);
            }
        }
    }
    for i in 0..out.rows() {
        let recip = 1.0 / divisors[i];
        for c in 0..p {
            let cur = out.get(i, c);
            out.set(i, c, cur * recip);
        }
    }
    out
}

/// Broadcast-add a bias over the embedding channels of each node.
fn add_bias_rows(m: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let b = bias[i];
        for c in 0..out.cols() {
            let cur = out.get(i, c);
            out.set(i, c, cur + b);
        }
    }
    out
}

fn sub_bias_rows(m: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let b = bias[i];
        for c in 0..out.cols() {
            let cur = out.get(i, c);
            out.set(i, c, cur - b);
        }
    }
    out
}

/// Mix three per-node terms through `p×p` matrices and apply ReLU:
/// `relu(m1·a[i] + m2·b[i] + m3·c[i])` per node `i`.
fn mix3(
    m1: &Matrix,
    a: &Matrix,
    m2: &Matrix,
    b: &Matrix,
    m3: &Matrix,
    c: &Matrix,
) -> Matrix {
    let nodes = a.rows();
    let p = a.cols();
    let mut out = Matrix::zeros(nodes, p);
    for i in 0..nodes {
        let t1 = m1.matvec(a.row(i));
        let t2 = m2.matvec(b.row(i));
        let t3 = m3.matvec(c.row(i));
        for ch in 0..p {
            let v = t1[ch] + t2[ch] + t3[ch];
            out.set(i, ch, if v > 0.0 { v } else { 0.0 });
        }
    }
    out
}

/// Run the configured number of forward/backward sweeps. Sweeps update
/// layers in place sequentially (forward 1..L, then backward L−1..0), so a
/// single round already propagates information end to end.
pub fn message_pass(
    state: &EmbeddingState,
    net: &Network,
    params: &GnnParams,
    norms: &NeighborNorms,
) -> Result<EmbeddingState> {
    let n = net.layer_count();
    if state.layers.len() != n + 1 {
        return Err(Error::shape(format!(
            "embedding state has {} layers, network needs {}",
            state.layers.len(),
            n + 1
        )));
    }
    let mut emb = state.layers.clone();
    for _ in 0..params.t2 {
        for k in 1..=n {
            let layer = &net.layers()[k - 1];
            let lifted = add_bias_rows(&layer.weight.matmul(&emb[k - 1]), &layer.bias);
            let nm = forward_neighbor_mean(&layer.weight, &emb[k - 1], &norms.into[k - 1]);
            emb[k] = mix3(
                &params.forward_pass[0],
                &emb[k],
                &params.forward_pass[1],
                &lifted,
                &params.forward_pass[2],
                &nm,
            );
        }
        for k in (0..n).rev() {
            let layer = &net.layers()[k];
            let lowered = layer
                .weight
                .matmul_transposed_left(&sub_bias_rows(&emb[k + 1], &layer.bias));
            let nm = backward_neighbor_mean(&layer.weight, &emb[k + 1], &norms.out_of[k]);
            emb[k] = mix3(
                &params.backward_pass[0],
                &emb[k],
                &params.backward_pass[1],
                &lowered,
                &params.backward_pass[2],
                &nm,
            );
        }
    }
    Ok(EmbeddingState { layers: emb })
}

/// Linear readout: per input node, the inner product of its embedding with
/// the readout vector.
pub fn readout(state: &EmbeddingState, params: &GnnParams) -> Vec<f64> {
    let input = &state.layers[0];
    (0..input.rows())
        .map(|i| dot(&params.readout, input.row(i)))
        .collect()
}

/// One full direction computation at a point: features, embeddings, sweeps,
/// readout.
pub fn direction(
    net: &Network,
    prop: &AttackProperty,
    ctx: &PropertyContext,
    params: &GnnParams,
    x_t: &[f64],
) -> Result<Vec<f64>> {
    let dual = match ctx.mode {
        FeatureMode::Dual => Some(&ctx.dual),
        FeatureMode::Wk => None,
    };
    let features = compute_features(net, prop, x_t, &ctx.bounds, dual, ctx.mode)?;
    let emb = init_embeddings(&features, params)?;
    let emb = message_pass(&emb, net, params, &ctx.norms)?;
    Ok(readout(&emb, params))
}

/// Attack configuration.
#[derive(Debug, Clone)]
pub struct AdvGnnConfig {
    /// Step size applied to the readout direction.
    pub alpha: f64,
    /// Iterations per restart.
    pub max_iters: usize,
    pub seed: u64,
    pub max_restarts: Option<usize>,
    pub time_budget: Option<Duration>,
    pub feature_mode: FeatureMode,
    /// Dual precomputation settings (feature mode `dual`).
    pub ascent: AscentConfig,
    /// First restart starts here instead of a uniform sample.
    pub warm_start: Option<Vec<f64>>,
    pub record_iterates: bool,
}

impl Default for AdvGnnConfig {
    fn default() -> Self {
        AdvGnnConfig {
            alpha: 1e-2,
            max_iters: 100,
            seed: 0,
            max_restarts: None,
            time_budget: None,
            feature_mode: FeatureMode::Dual,
            ascent: AscentConfig::default(),
            warm_start: None,
            record_iterates: false,
        }
    }
}

/// Run the learned attack: precompute bounds and duals once, then iterate
/// feature → embedding → sweeps → readout → projected step, with uniform
/// restarts, stopping on success, iteration cap, or deadline.
pub fn advgnn_attack(
    net: &Network,
    prop: &AttackProperty,
    params: &GnnParams,
    cfg: &AdvGnnConfig,
) -> Result<AttackOutcome> {
    params.validate()?;
    if cfg.max_iters == 0 {
        return Err(Error::config("advgnn needs at least one iteration"));
    }
    // Precomputation is charged to the attack: it happens inside this call.
    let ctx = PropertyContext::prepare(net, prop, cfg.feature_mode, &cfg.ascent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = crate::attacks::RunState::new(cfg.time_budget, cfg.record_iterates);

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
        for _ in 0..cfg.max_iters {
            if state.out_of_time() {
                break 'restarts;
            }
            let dir = direction(net, prop, &ctx, params, &x)?;
            let stepped: Vec<f64> = x
                .iter()
                .zip(&dir)
                .map(|(&xi, &di)| xi + cfg.alpha * di)
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

/// Parameters that make the readout equal the gradient sign at any point of
/// any network: the input MLP routes the sign feature into the first two
/// embedding channels with opposite signs, the sweeps are identity on the
/// first term and zero elsewhere, and the readout subtracts channel 2 from
/// channel 1.
pub fn simulate_fgsm_params(p: usize) -> Result<GnnParams> {
    if p < 2 {
        return Err(Error::config(format!(
            "sign-routing construction needs embedding size ≥ 2, got {p}"
        )));
    }
    let mut params = GnnParams::zeros(p, 1, 1);
    params.input_mlp[0].set(0, 1, 1.0);
    params.input_mlp[0].set(1, 1, -1.0);
    params.input_mlp[1] = Matrix::identity(p);
    params.forward_pass[0] = Matrix::identity(p);
    params.backward_pass[0] = Matrix::identity(p);
    params.readout[0] = 1.0;
    params.readout[1] = -1.0;
    Ok(params)
}
