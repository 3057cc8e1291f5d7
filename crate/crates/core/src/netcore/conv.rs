//! Materialization of 2-D convolutions into dense layers.
//!
//! Index layout is channel-major: a `(channels, height, width)` tensor is
//! flattened as `c * h * w + i * w + j`. The materialized layer applied to a
//! flattened input reproduces the sliding-window convolution exactly.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netcore::{Layer, LayerOrigin};

/// Geometry and weights of one convolution.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    /// Kernels indexed `[out_channel][in_channel]`, each `kh × kw`.
    pub kernels: Vec<Vec<Matrix>>,
    /// One bias per output channel, replicated over spatial positions.
    pub bias: Vec<f64>,
    pub stride: usize,
    /// Symmetric zero padding on all four sides.
    pub padding: usize,
    /// Input shape `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
}

impl ConvSpec {
    fn kernel_dims(&self) -> Result<(usize, usize, usize, usize)> {
        let out_ch = self.kernels.len();
        if out_ch == 0 {
            return Err(Error::config("convolution needs at least one output channel"));
        }
        let in_ch = self.input_shape.0;
        let (kh, kw) = {
            let first = self
                .kernels
                .first()
                .and_then(|k| k.first())
                .ok_or_else(|| Error::config("convolution kernel set is empty"))?;
            (first.rows(), first.cols())
        };
        for (oc, per_in) in self.kernels.iter().enumerate() {
            if per_in.len() != in_ch {
                return Err(Error::shape(format!(
                    "kernel for output channel {oc} covers {} input channels, expected {in_ch}",
                    per_in.len()
                )));
            }
            for (ic, k) in per_in.iter().enumerate() {
                if k.rows() != kh || k.cols() != kw {
                    return Err(Error::shape(format!(
                        "kernel [{oc}][{ic}] is {}x{}, expected {kh}x{kw}",
                        k.rows(),
                        k.cols()
                    )));
                }
            }
        }
        if self.bias.len() != out_ch {
            return Err(Error::shape(format!(
                "convolution has {out_ch} output channels but {} bias entries",
                self.bias.len()
            )));
        }
        Ok((out_ch, in_ch, kh, kw))
    }

    /// Output spatial dimensions `(out_h, out_w)`.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        let (_, _, kh, kw) = self.kernel_dims()?;
        let (_, h, w) = self.input_shape;
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be at least 1"));
        }
        let padded_h = h + 2 * self.padding;
        let padded_w = w + 2 * self.padding;
        if kh > padded_h || kw > padded_w {
            return Err(Error::config(format!(
                "kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"
            )));
        }
        Ok((
            (padded_h - kh) / self.stride + 1,
            (padded_w - kw) / self.stride + 1,
        ))
    }

    /// Apply the convolution directly (sliding window). Used as the oracle
    /// the materialized matrix is checked against.
    pub fn apply_direct(&self, input: &[f64]) -> Result<Vec<f64>> {
        let (out_ch, in_ch, kh, kw) = self.kernel_dims()?;
        let (c, h, w) = self.input_shape;
        debug_assert_eq!(c, in_ch);
        if input.len() != c * h * w {
            return Err(Error::shape(format!(
                "convolution input has {} values, expected {}",
                input.len(),
                c * h * w
            )));
        }
        let (out_h, out_w) = self.output_dims()?;
        let mut out = vec![0.0; out_ch * out_h * out_w];
        for oc in 0..out_ch {
            for oi in 0..out_h {
                for oj in 0..out_w {
                    let mut acc = self.bias[oc];
                    for ic in 0..in_ch {
                        let kernel = &self.kernels[oc][ic];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                                let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                                if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                                    continue; // zero padding
                                }
                                let idx = ic * h * w + ii as usize * w + jj as usize;
                                acc += kernel.get(ki, kj) * input[idx];
                            }
                        }
                    }
                    out[oc * out_h * out_w + oi * out_w + oj] = acc;
                }
            }
        }
        Ok(out)
    }
}

/// Materialize a convolution into a dense [`Layer`] whose application equals
/// the convolution on any input.
pub fn conv_to_linear(spec: &ConvSpec) -> Result<Layer> {
    let (out_ch, in_ch, kh, kw) = spec.kernel_dims()?;
    let (c, h, w) = spec.input_shape;
    let (out_h, out_w) = spec.output_dims()?;
    let in_dim = c * h * w;
    let out_dim = out_ch * out_h * out_w;
    let mut weight = Matrix::zeros(out_dim, in_dim);
    let mut bias = vec![0.0; out_dim];
    for oc in 0..out_ch {
        for oi in 0..out_h {
            for oj in 0..out_w {
                let row = oc * out_h * out_w + oi * out_w + oj;
                bias[row] = spec.bias[oc];
                for ic in 0..in_ch {
                    let kernel = &spec.kernels[oc][ic];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                            let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                            if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                                continue;
                            }
                            let col = ic * h * w + ii as usize * w + jj as usize;
                            weight.set(row, col, kernel.get(ki, kj));
                        }
                    }
                }
            }
        }
    }
    Ok(Layer {
        weight,
        bias,
        origin: LayerOrigin::ConvolutionMaterialized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_1x1(value: f64, side: usize) -> ConvSpec {
        ConvSpec {
            kernels: vec![vec![Matrix::from_rows(&[vec![value]]).unwrap()]],
            bias: vec![0.0],
            stride: 1,
            padding: 0,
            input_shape: (1, side, side),
        }
    }

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let layer = conv_to_linear(&unit_1x1(1.0, 3)).unwrap();
        assert_eq!(layer.weight, Matrix::identity(9));
        assert_eq!(layer.origin, LayerOrigin::ConvolutionMaterialized);
    }

    #[test]
    fn zero_kernel_is_zero_matrix() {
        let layer = conv_to_linear(&unit_1x1(0.0, 3)).unwrap();
        assert!(layer.weight.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn materialized_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kernel = Matrix::from_rows(
            &(0..3)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let spec = ConvSpec {
            kernels: vec![vec![kernel]],
            bias: vec![0.25],
            stride: 1,
            padding: 0,
            input_shape: (1, 4, 4),
        };
        let layer = conv_to_linear(&spec).unwrap();
        for _ in 0..100 {
            let input: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let direct = spec.apply_direct(&input).unwrap();
            let dense = layer.affine(&input);
            for (a, b) in direct.iter().zip(&dense) {
                assert!((a - b).abs() <= 1e-12, "direct {a} vs dense {b}");
            }
        }
    }

    #[test]
    fn strided_padded_conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng| {
            Matrix::from_rows(
                &(0..2)
                    .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let spec = ConvSpec {
            kernels: vec![
                vec![mk(&mut rng), mk(&mut rng)],
                vec![mk(&mut rng), mk(&mut rng)],
            ],
            bias: vec![0.5, -0.5],
            stride: 2,
            padding: 1,
            input_shape: (2, 5, 5),
        };
        let layer = conv_to_linear(&spec).unwrap();
        for _ in 0..50 {
            let input: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            let direct = spec.apply_direct(&input).unwrap();
            let dense = layer.affine(&input);
            for (a, b) in direct.iter().zip(&dense) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn inconsistent_geometry_rejected() {
        let mut spec = unit_1x1(1.0, 2);
        spec.stride = 0;
        assert!(conv_to_linear(&spec).is_err());
        let mut spec = unit_1x1(1.0, 2);
        spec.kernels[0][0] =
            Matrix::from_rows(&vec![vec![1.0, 1.0, 1.0]; 3]).unwrap();
        assert!(conv_to_linear(&spec).is_err(), "kernel larger than input");
    }
}
