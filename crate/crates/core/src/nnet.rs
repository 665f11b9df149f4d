//! Minimal dense MLP used for both learned vector fields and controllers.
//!
//! Parameters live in one flat [`ParamVector`]. For every layer the weight matrix of shape
//! `(fan_out, fan_in)` is stored row-major, followed by the bias vector of length `fan_out`.
//! Hidden layers apply the configured activation; the output layer is affine.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error("invalid network layout: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected length {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Exponential linear unit with alpha = 1.
    Elu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z >= 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Elu => {
                if z >= 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

/// Layer widths and hidden activation of an MLP. Validated on construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMlpSpec", into = "RawMlpSpec")]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct RawMlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl TryFrom<RawMlpSpec> for MlpSpec {
    type Error = NnetError;

    fn try_from(raw: RawMlpSpec) -> Result<Self, Self::Error> {
        MlpSpec::new(raw.layer_sizes, raw.activation)
    }
}

impl From<MlpSpec> for RawMlpSpec {
    fn from(spec: MlpSpec) -> Self {
        RawMlpSpec {
            layer_sizes: spec.layer_sizes,
            activation: spec.activation,
        }
    }
}

/// Position of one layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Index of the first weight; biases start at `offset + fan_in * fan_out`.
    pub offset: usize,
}

impl LayerShape {
    #[inline]
    pub fn weight_index(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.fan_in + col
    }

    #[inline]
    pub fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self, NnetError> {
        if layer_sizes.len() < 2 {
            return Err(NnetError::InvalidSpec(format!(
                "need at least an input and an output layer, got {} sizes",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(NnetError::InvalidSpec(format!(
                "layer {pos} has zero width"
            )));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn max_width(&self) -> usize {
        self.layer_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerShape> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let shape = LayerShape {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset += shape.param_count();
            shape
        })
    }
}

/// Flat parameter vector of a network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Structured view of one layer, as produced by [`unflatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `(fan_out, fan_in)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn unflatten(spec: &MlpSpec, theta: &ParamVector) -> Result<Vec<LayerParams>, NnetError> {
    check_len("parameter vector", spec.param_count(), theta.len())?;
    let p = theta.as_slice();
    Ok(spec
        .layers()
        .map(|l| LayerParams {
            fan_in: l.fan_in,
            fan_out: l.fan_out,
            weights: p[l.offset..l.bias_offset()].to_vec(),
            bias: p[l.bias_offset()..l.bias_offset() + l.fan_out].to_vec(),
        })
        .collect())
}

pub fn flatten(layers: &[LayerParams]) -> ParamVector {
    let mut out = Vec::with_capacity(layers.iter().map(|l| l.weights.len() + l.bias.len()).sum());
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    ParamVector(out)
}

/// Draws every weight and bias of a layer with fan-in `k` uniformly from `(-1/sqrt(k), 1/sqrt(k))`.
pub fn mlp_init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> ParamVector {
    let mut out = Vec::with_capacity(spec.param_count());
    for l in spec.layers() {
        let bound = (1.0 / l.fan_in as f64).sqrt();
        for _ in 0..l.param_count() {
            // random_range is half-open; reject the lower endpoint to keep the interval open.
            let v = loop {
                let v = rng.random_range(-bound..bound);
                if v != -bound {
                    break v;
                }
            };
            out.push(v);
        }
    }
    ParamVector(out)
}

/// Reusable buffers for [`forward_into`].
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Scratch {
    pub fn new(spec: &MlpSpec) -> Self {
        let w = spec.max_width();
        Self {
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

/// Shape-checked forward pass.
pub fn mlp_forward(
    spec: &MlpSpec,
    theta: &ParamVector,
    input: &[f64],
) -> Result<Vec<f64>, NnetError> {
    check_len("parameter vector", spec.param_count(), theta.len())?;
    check_len("network input", spec.input_dim(), input.len())?;
    let mut scratch = Scratch::new(spec);
    let mut out = vec![0.0; spec.output_dim()];
    forward_into(spec, theta.as_slice(), input, &mut scratch, &mut out);
    Ok(out)
}

/// Allocation-free forward pass. Lengths are the caller's responsibility (debug-asserted).
pub fn forward_into(
    spec: &MlpSpec,
    params: &[f64],
    input: &[f64],
    scratch: &mut Scratch,
    out: &mut [f64],
) {
    debug_assert_eq!(params.len(), spec.param_count());
    debug_assert_eq!(input.len(), spec.input_dim());
    debug_assert_eq!(out.len(), spec.output_dim());

    let n_layers = spec.num_layers();
    let act = spec.activation();
    scratch.a[..input.len()].copy_from_slice(input);
    for (li, l) in spec.layers().enumerate() {
        let last = li + 1 == n_layers;
        let (src, dst) = (&scratch.a[..l.fan_in], &mut scratch.b[..l.fan_out]);
        let w = &params[l.offset..l.bias_offset()];
        let bias = &params[l.bias_offset()..l.bias_offset() + l.fan_out];
        for (r, d) in dst.iter_mut().enumerate() {
            let row = &w[r * l.fan_in..(r + 1) * l.fan_in];
            let z = bias[r] + row.iter().zip(src).map(|(wi, xi)| wi * xi).sum::<f64>();
            *d = if last { z } else { act.apply(z) };
        }
        std::mem::swap(&mut scratch.a, &mut scratch.b);
    }
    out.copy_from_slice(&scratch.a[..spec.output_dim()]);
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), NnetError> {
    if expected != actual {
        return Err(NnetError::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    fn spec(sizes: &[usize], act: Activation) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), act).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(spec(&[2, 10, 2], Activation::Tanh).param_count(), 52);
        assert_eq!(spec(&[1, 1], Activation::Tanh).param_count(), 2);
        assert_eq!(spec(&[1, 5, 5, 5, 1], Activation::Elu).param_count(), 76);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![2, 0, 1], Activation::Tanh).is_err());
        let err = serde_json::from_str::<MlpSpec>(r#"{"layer_sizes":[4],"activation":"tanh"}"#);
        assert!(err.is_err());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let s = spec(&[2, 10, 2], Activation::Tanh);
        let theta = mlp_init(&s, &mut stream(3, Stream::Init));
        let layers: Vec<_> = s.layers().collect();
        let b0 = (0.5f64).sqrt();
        let first = &theta.as_slice()[..layers[0].param_count()];
        assert!(first.iter().all(|v| v.abs() < b0));
        let b1 = (0.1f64).sqrt();
        let second = &theta.as_slice()[layers[1].offset..];
        assert!(second.iter().all(|v| v.abs() < b1));

        let tiny = spec(&[1, 1], Activation::Tanh);
        let t = mlp_init(&tiny, &mut stream(0, Stream::Init));
        assert!(t.as_slice().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(&[2, 10, 2], Activation::Tanh);
        let a = mlp_init(&s, &mut stream(11, Stream::Init));
        let b = mlp_init(&s, &mut stream(11, Stream::Init));
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn forward_examples() {
        let s = spec(&[2, 10, 2], Activation::Tanh);
        let zeros = ParamVector::zeros(52);
        assert_eq!(
            mlp_forward(&s, &zeros, &[0.3, -4.0]).unwrap(),
            vec![0.0, 0.0]
        );

        let affine = spec(&[1, 1], Activation::Tanh);
        let out = mlp_forward(&affine, &vec![2.0, 0.5].into(), &[3.0]).unwrap();
        assert_eq!(out, vec![6.5]);

        // 1 -> 2 -> 1: hidden weights (1, -1), hidden biases 0, output weights (1, 1), bias 0.
        let s = spec(&[1, 2, 1], Activation::Tanh);
        let theta: ParamVector = vec![1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0].into();
        let out = mlp_forward(&s, &theta, &[0.5]).unwrap();
        assert!(out[0].abs() < 1e-15);
    }

    #[test]
    fn elu_hidden_layer() {
        let s = spec(&[1, 1, 1], Activation::Elu);
        // hidden z = x, output = hidden
        let theta: ParamVector = vec![1.0, 0.0, 1.0, 0.0].into();
        assert_eq!(mlp_forward(&s, &theta, &[2.0]).unwrap(), vec![2.0]);
        let neg = mlp_forward(&s, &theta, &[-1.0]).unwrap()[0];
        assert!((neg - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_mismatched_input() {
        let s = spec(&[2, 3, 1], Activation::Tanh);
        let theta = ParamVector::zeros(s.param_count());
        assert!(matches!(
            mlp_forward(&s, &theta, &[1.0]),
            Err(NnetError::DimensionMismatch {
                expected: 2,
                actual: 1,
                ..
            })
        ));
        assert!(mlp_forward(&s, &ParamVector::zeros(3), &[1.0, 2.0]).is_err());
    }

    fn spectral_norm(l: &LayerParams) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(l.fan_out, l.fan_in, &l.weights);
        m.singular_values().max()
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(seed in any::<u64>(), hidden in 1usize..8) {
            let s = spec(&[3, hidden, 2], Activation::Tanh);
            let theta = mlp_init(&s, &mut stream(seed, Stream::Init));
            let back = flatten(&unflatten(&s, &theta).unwrap());
            prop_assert_eq!(back, theta);
        }

        #[test]
        fn zero_bias_tanh_nets_are_odd(seed in any::<u64>(), x0 in -3.0f64..3.0, x1 in -3.0f64..3.0) {
            let s = spec(&[2, 6, 4, 2], Activation::Tanh);
            let mut layers = unflatten(&s, &mlp_init(&s, &mut stream(seed, Stream::Init))).unwrap();
            for l in &mut layers {
                l.bias.iter_mut().for_each(|b| *b = 0.0);
            }
            let theta = flatten(&layers);
            let p = mlp_forward(&s, &theta, &[x0, x1]).unwrap();
            let n = mlp_forward(&s, &theta, &[-x0, -x1]).unwrap();
            for (a, b) in p.iter().zip(&n) {
                prop_assert!((a + b).abs() <= 1e-14);
            }
        }

        #[test]
        fn tanh_nets_are_lipschitz_in_spectral_product(
            seed in any::<u64>(),
            x in prop::collection::vec(-2.0f64..2.0, 2),
            y in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let s = spec(&[2, 10, 2], Activation::Tanh);
            let theta = mlp_init(&s, &mut stream(seed, Stream::Init));
            let bound: f64 = unflatten(&s, &theta).unwrap().iter().map(spectral_norm).product();
            let fx = mlp_forward(&s, &theta, &x).unwrap();
            let fy = mlp_forward(&s, &theta, &y).unwrap();
            let dout = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let din = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dout <= bound * din * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn forward_is_bitwise_deterministic(seed in any::<u64>(), x in -5.0f64..5.0) {
            let s = spec(&[1, 5, 5, 5, 1], Activation::Elu);
            let theta = mlp_init(&s, &mut stream(seed, Stream::Init));
            let a = mlp_forward(&s, &theta, &[x]).unwrap();
            let b = mlp_forward(&s, &theta, &[x]).unwrap();
            prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }
}
