//! Feed-forward ReLU networks: representation, evaluation, and exact
//! reverse-mode input gradients.
//!
//! A network is a stack of affine layers with ReLU between them and no
//! activation after the last layer. Convolutions are materialized to dense
//! matrices up front ([`conv::conv_to_linear`]) so every downstream consumer
//! sees the same uniform shape.

mod conv;
mod json;

pub use conv::{conv_to_linear, ConvSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Where a layer's weight matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerOrigin {
    Dense,
    ConvolutionMaterialized,
}

/// One affine layer: `x ↦ W x + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub origin: LayerOrigin,
}

impl Layer {
    /// Dense layer from a weight matrix and bias. Errors if the row count and
    /// bias length disagree.
    pub fn dense(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::shape(format!(
                "layer weight has {} rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Layer {
            weight,
            bias,
            origin: LayerOrigin::Dense,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `W x + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// A feed-forward ReLU network together with its valid input box.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_box: Vec<(f64, f64)>,
}

impl Network {
    /// Build a network with the default `[0,1]^d` input box.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let d = layers
            .first()
            .ok_or_else(|| Error::shape("network needs at least one layer"))?
            .in_dim();
        let input_box = vec![(0.0, 1.0); d];
        Network::with_input_box(layers, input_box)
    }

    /// Build a network with an explicit per-coordinate input box.
    pub fn with_input_box(layers: Vec<Layer>, input_box: Vec<(f64, f64)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rows() != layer.bias.len() {
                return Err(Error::shape(format!(
                    "layer {i}: weight has {} rows but bias has {} entries",
                    layer.weight.rows(),
                    layer.bias.len()
                )));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::shape(format!(
                    "layer {i}: expects {} inputs but layer {} produces {}",
                    layer.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        if input_box.len() != layers[0].in_dim() {
            return Err(Error::shape(format!(
                "input box has {} coordinates but the first layer expects {}",
                input_box.len(),
                layers[0].in_dim()
            )));
        }
        if let Some((i, (lo, hi))) = input_box
            .iter()
            .enumerate()
            .find(|(_, (lo, hi))| lo > hi || lo.is_nan() || hi.is_nan())
        {
            return Err(Error::config(format!(
                "input box coordinate {i} has lo {lo} > hi {hi}"
            )));
        }
        Ok(Network { layers, input_box })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn input_box(&self) -> &[(f64, f64)] {
        &self.input_box
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} coordinates but layer 0 expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_classes(&self, y: usize, y_tar: usize) -> Result<()> {
        let m = self.output_dim();
        for index in [y, y_tar] {
            if index >= m {
                return Err(Error::ClassIndex { index, outputs: m });
            }
        }
        Ok(())
    }

    /// Evaluate the network, keeping every intermediate pre/post-activation.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut post = Vec::with_capacity(n.saturating_sub(1));
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&cur);
            pre.push(z.clone());
            if i + 1 < n {
                let activated: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                post.push(activated.clone());
                cur = activated;
            }
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre,
            post,
        })
    }

    /// Final-layer logits at `x`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits().to_vec())
    }

    /// Adversarial loss `f(x)[y_tar] − f(x)[y]`. Nonnegative means `x` is an
    /// adversarial example for the pair `(y, y_tar)`.
    pub fn adversarial_loss(&self, x: &[f64], y: usize, y_tar: usize) -> Result<f64> {
        self.check_classes(y, y_tar)?;
        let logits = self.logits(x)?;
        Ok(logits[y_tar] - logits[y])
    }

    /// Exact reverse-mode gradient of the adversarial loss with respect to
    /// the input, using subgradient 0 for ReLU units sitting exactly at 0.
    pub fn input_gradient(&self, x: &[f64], y: usize, y_tar: usize) -> Result<Vec<f64>> {
        self.check_classes(y, y_tar)?;
        let trace = self.forward(x)?;
        let n = self.layers.len();
        let m = self.output_dim();
        let mut seed = vec![0.0; m];
        seed[y_tar] += 1.0;
        seed[y] -= 1.0;
        let mut adj = seed;
        for i in (0..n).rev() {
            let mut upstream = self.layers[i].weight.matvec_transposed(&adj);
            if i > 0 {
                for (u, &z) in upstream.iter_mut().zip(&trace.pre[i - 1]) {
                    if z <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            adj = upstream;
        }
        Ok(adj)
    }

    /// Predicted class: argmax of the logits (smallest index wins ties).
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for i in 1..logits.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Intermediate values of one forward evaluation.
///
/// `pre[i]` is the pre-activation of layer `i` (0-based) and `post[i]` its
/// ReLU image (absent for the final layer).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Final-layer logits.
    pub fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

/// Compare a reverse-mode gradient against central finite differences and
/// return the worst per-coordinate relative error.
///
/// The relative error uses `max(|g|, |fd|, 1)` as the denominator, so for
/// gradients below 1 in magnitude it degrades gracefully into an absolute
/// error. Objective values must be finite at every probe point.
pub fn grad_check<F, G>(objective: F, gradient: G, point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if h <= 0.0 {
        return Err(Error::config(format!("finite-difference step {h} must be positive")));
    }
    let analytic = gradient(point);
    if analytic.len() != point.len() {
        return Err(Error::shape(format!(
            "gradient has {} coordinates, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let up = objective(&probe);
        probe[i] = point[i] - h;
        let down = objective(&probe);
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} probe: ({up}, {down})"
            )));
        }
        let fd = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(worst)
}
