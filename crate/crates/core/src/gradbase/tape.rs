//! Reverse-mode differentiation through a fixed-step time unfolding.
//!
//! The forward sweep mirrors [`crate::ode::integrate`] for Euler and RK4 operation by operation,
//! so the taped states are bitwise identical to the plain integrator's. Every stage evaluation
//! keeps the per-layer activations needed by the backward sweep.

use super::GradError;
use crate::nnet::MlpSpec;
use crate::ode::{substeps, IntegratorConfig, Method};

/// Inputs and pre-activations of every layer for one network evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the network output.
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("at least one layer")
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

/// Forward pass that records a trace. Produces the same floating-point results as
/// [`crate::nnet::forward_into`].
pub fn forward_traced(spec: &MlpSpec, params: &[f64], input: &[f64]) -> MlpTrace {
    let n_layers = spec.num_layers();
    let act = spec.activation();
    let mut inputs = Vec::with_capacity(n_layers + 1);
    let mut pre = Vec::with_capacity(n_layers);
    inputs.push(input.to_vec());
    for (li, l) in spec.layers().enumerate() {
        let last = li + 1 == n_layers;
        let src = &inputs[li];
        let w = &params[l.offset..l.bias_offset()];
        let bias = &params[l.bias_offset()..l.bias_offset() + l.fan_out];
        let z: Vec<f64> = (0..l.fan_out)
            .map(|r| {
                let row = &w[r * l.fan_in..(r + 1) * l.fan_in];
                bias[r] + row.iter().zip(src).map(|(wi, xi)| wi * xi).sum::<f64>()
            })
            .collect();
        let a = if last {
            z.clone()
        } else {
            z.iter().map(|&v| act.apply(v)).collect()
        };
        pre.push(z);
        inputs.push(a);
    }
    MlpTrace { inputs, pre }
}

/// Accumulates `d(out_bar . y)/d(theta)` into `grad` and returns `d(out_bar . y)/d(input)`.
pub fn backward_traced(
    spec: &MlpSpec,
    params: &[f64],
    trace: &MlpTrace,
    out_bar: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let layers: Vec<_> = spec.layers().collect();
    let n_layers = layers.len();
    let act = spec.activation();
    let mut a_bar = out_bar.to_vec();
    for li in (0..n_layers).rev() {
        let l = layers[li];
        let z_bar: Vec<f64> = if li + 1 == n_layers {
            a_bar
        } else {
            a_bar
                .iter()
                .zip(&trace.pre[li])
                .map(|(ab, &z)| ab * act.derivative(z))
                .collect()
        };
        let src = &trace.inputs[li];
        let mut src_bar = vec![0.0; l.fan_in];
        for (r, zb) in z_bar.iter().enumerate() {
            if *zb == 0.0 {
                continue;
            }
            grad[l.bias_offset() + r] += zb;
            for c in 0..l.fan_in {
                grad[l.weight_index(r, c)] += zb * src[c];
                src_bar[c] += zb * params[l.weight_index(r, c)];
            }
        }
        a_bar = src_bar;
    }
    a_bar
}

/// A vector field whose evaluations can be recorded and differentiated.
pub trait TapedField {
    fn dim(&self) -> usize;
    /// Evaluates `f(x, t)` into `dx` and returns the trace.
    fn forward(&self, params: &[f64], x: &[f64], t: f64, dx: &mut [f64]) -> MlpTrace;
    /// Given the cotangent `f_bar` of `f(x, t)`, accumulates the parameter gradient and
    /// returns the state cotangent.
    fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        f_bar: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64>;
}

#[derive(Debug, Clone)]
struct StepRecord {
    h: f64,
    /// One trace per stage (1 for Euler, 4 for RK4).
    stages: Vec<MlpTrace>,
}

/// Recorded fixed-step unfolding.
#[derive(Debug, Clone)]
pub struct Tape {
    method: Method,
    steps: Vec<StepRecord>,
    /// Number of steps taken when each sample time was reached.
    sample_ends: Vec<usize>,
    /// States at the sample times.
    pub states: Vec<Vec<f64>>,
}

impl Tape {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Runs the unfolding on `times` and records it.
pub fn unroll<F: TapedField + ?Sized>(
    field: &F,
    params: &[f64],
    x0: &[f64],
    times: &[f64],
    config: &IntegratorConfig,
) -> Result<Tape, GradError> {
    if !config.is_fixed_step() {
        return Err(GradError::AdaptiveUnfolding);
    }
    config
        .validate()
        .map_err(|e| GradError::Problem(e.into()))?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut steps = Vec::new();
    let mut sample_ends = vec![0];
    let mut states = vec![x.clone()];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );

    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let count = substeps(t1 - t0, config.dt);
        let h = (t1 - t0) / count as f64;
        for s in 0..count {
            let t = t0 + s as f64 * h;
            let record = match config.method {
                Method::Euler => {
                    let tr = field.forward(params, &x, t, &mut k1);
                    for i in 0..n {
                        x[i] += h * k1[i];
                    }
                    StepRecord {
                        h,
                        stages: vec![tr],
                    }
                }
                _ => {
                    let tr1 = field.forward(params, &x, t, &mut k1);
                    for i in 0..n {
                        tmp[i] = x[i] + 0.5 * h * k1[i];
                    }
                    let tr2 = field.forward(params, &tmp, t + 0.5 * h, &mut k2);
                    for i in 0..n {
                        tmp[i] = x[i] + 0.5 * h * k2[i];
                    }
                    let tr3 = field.forward(params, &tmp, t + 0.5 * h, &mut k3);
                    for i in 0..n {
                        tmp[i] = x[i] + h * k3[i];
                    }
                    let tr4 = field.forward(params, &tmp, t + h, &mut k4);
                    for i in 0..n {
                        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                    StepRecord {
                        h,
                        stages: vec![tr1, tr2, tr3, tr4],
                    }
                }
            };
            steps.push(record);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(GradError::NonFinite {
                    step: steps.len() - 1,
                });
            }
        }
        sample_ends.push(steps.len());
        states.push(x.clone());
    }
    Ok(Tape {
        method: config.method,
        steps,
        sample_ends,
        states,
    })
}

/// Reverse sweep. `sample_bars[i]` is the loss cotangent of the state at sample `i`.
/// Returns the cotangent of the initial state; the parameter gradient is added to `grad`.
pub fn reverse<F: TapedField + ?Sized>(
    field: &F,
    params: &[f64],
    tape: &Tape,
    sample_bars: &[Vec<f64>],
    grad: &mut [f64],
) -> Vec<f64> {
    let n = field.dim();
    let mut x_bar = vec![0.0; n];
    for i in (1..tape.sample_ends.len()).rev() {
        add_into(&mut x_bar, &sample_bars[i]);
        for s in (tape.sample_ends[i - 1]..tape.sample_ends[i]).rev() {
            x_bar = step_backward(field, params, tape.method, &tape.steps[s], x_bar, grad);
        }
    }
    add_into(&mut x_bar, &sample_bars[0]);
    x_bar
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| s * x).collect()
}

fn step_backward<F: TapedField + ?Sized>(
    field: &F,
    params: &[f64],
    method: Method,
    rec: &StepRecord,
    x_bar: Vec<f64>,
    grad: &mut [f64],
) -> Vec<f64> {
    let h = rec.h;
    match method {
        Method::Euler => {
            let mut prev = x_bar.clone();
            let s = field.backward(params, &rec.stages[0], &scaled(&x_bar, h), grad);
            add_into(&mut prev, &s);
            prev
        }
        _ => {
            let mut prev = x_bar.clone();
            let mut k1_bar = scaled(&x_bar, h / 6.0);
            let mut k2_bar = scaled(&x_bar, h / 3.0);
            let mut k3_bar = scaled(&x_bar, h / 3.0);
            let k4_bar = scaled(&x_bar, h / 6.0);

            let s4 = field.backward(params, &rec.stages[3], &k4_bar, grad);
            add_into(&mut prev, &s4);
            add_into(&mut k3_bar, &scaled(&s4, h));

            let s3 = field.backward(params, &rec.stages[2], &k3_bar, grad);
            add_into(&mut prev, &s3);
            add_into(&mut k2_bar, &scaled(&s3, 0.5 * h));

            let s2 = field.backward(params, &rec.stages[1], &k2_bar, grad);
            add_into(&mut prev, &s2);
            add_into(&mut k1_bar, &scaled(&s2, 0.5 * h));

            let s1 = field.backward(params, &rec.stages[0], &k1_bar, grad);
            add_into(&mut prev, &s1);
            prev
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{forward_into, mlp_init, Activation, Scratch};
    use crate::rng::{stream, Stream};

    #[test]
    fn traced_forward_matches_plain_forward_bitwise() {
        for act in [Activation::Tanh, Activation::Elu] {
            let spec = MlpSpec::new(vec![2, 7, 3, 2], act).unwrap();
            let theta = mlp_init(&spec, &mut stream(5, Stream::Init));
            let x = [0.3, -1.7];
            let tr = forward_traced(&spec, theta.as_slice(), &x);
            let mut out = [0.0; 2];
            forward_into(
                &spec,
                theta.as_slice(),
                &x,
                &mut Scratch::new(&spec),
                &mut out,
            );
            assert_eq!(tr.output(), &out);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Elu] {
            let spec = MlpSpec::new(vec![2, 4, 3, 2], act).unwrap();
            let theta = mlp_init(&spec, &mut stream(9, Stream::Init)).into_inner();
            let x = [0.4, -0.9];
            let w = [0.7, -1.3];
            let f = |p: &[f64], x: &[f64]| {
                let o = forward_traced(&spec, p, x);
                o.output()[0] * w[0] + o.output()[1] * w[1]
            };
            let tr = forward_traced(&spec, &theta, &x);
            let mut grad = vec![0.0; theta.len()];
            let x_bar = backward_traced(&spec, &theta, &tr, &w, &mut grad);
            let eps = 1e-6;
            for i in 0..theta.len() {
                let (mut p, mut m) = (theta.clone(), theta.clone());
                p[i] += eps;
                m[i] -= eps;
                let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * eps);
                assert!(
                    (fd - grad[i]).abs() < 1e-8,
                    "param {i}: {fd} vs {}",
                    grad[i]
                );
            }
            for i in 0..2 {
                let (mut p, mut m) = (x, x);
                p[i] += eps;
                m[i] -= eps;
                let fd = (f(&theta, &p) - f(&theta, &m)) / (2.0 * eps);
                assert!((fd - x_bar[i]).abs() < 1e-8);
            }
        }
    }
}
