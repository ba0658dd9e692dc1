//! Multi-layer perceptrons for the drift and diffusion functions.
//!
//! Hidden layers apply `tanh`; the output layer is affine. Bounded, smooth
//! activations keep the networks inside the growth and regularity conditions
//! the fractional SDE solver relies on, so no other activation is accepted.
//!
//! Parameters are flattened layer by layer, each layer contributing its
//! row-major weight matrix followed by its bias vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// One affine map `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.inputs..(i + 1) * self.inputs]
    }
}

#[derive(Serialize, Deserialize)]
struct MlpDoc {
    activation: Activation,
    layers: Vec<Layer>,
}

/// Weights and biases of a tanh MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpDoc", into = "MlpDoc")]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl TryFrom<MlpDoc> for MlpParams {
    type Error = Error;

    fn try_from(doc: MlpDoc) -> Result<Self> {
        MlpParams::new(doc.layers)
    }
}

impl From<MlpParams> for MlpDoc {
    fn from(p: MlpParams) -> Self {
        MlpDoc {
            activation: Activation::Tanh,
            layers: p.layers,
        }
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Config("layers must have nonzero width".into()));
            }
            if l.weights.len() != l.inputs * l.outputs {
                return Err(Error::Dimension {
                    expected: l.inputs * l.outputs,
                    actual: l.weights.len(),
                });
            }
            if l.bias.len() != l.outputs {
                return Err(Error::Dimension {
                    expected: l.outputs,
                    actual: l.bias.len(),
                });
            }
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Dimension {
                    expected: w[0].outputs,
                    actual: w[1].inputs,
                });
            }
        }
        Ok(Self { layers })
    }

    /// All-zero network with the given layer widths (input first, output last).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("need an input and an output width".into()));
        }
        Self::new(sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())
    }

    /// Weights and biases uniform on `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        for l in &mut p.layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            let (b, r) = r.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    /// Length of the activation buffer used by [`MlpParams::forward_into`].
    pub fn tape_len(&self) -> usize {
        self.layers[0].inputs + self.layers.iter().map(|l| l.outputs).sum::<usize>()
    }

    /// Runs the network, leaving every layer's activations in `tape`.
    ///
    /// `tape` holds the input followed by each layer's output; it is what
    /// [`MlpParams::backward_from`] needs.
    pub fn forward_into(&self, x: &[f64], tape: &mut [f64]) {
        let n0 = self.layers[0].inputs;
        tape[..n0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        let mut offset = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let (prev, next) = tape[offset..].split_at_mut(l.inputs);
            for (i, out) in next[..l.outputs].iter_mut().enumerate() {
                let h = l.bias[i] + dot(l.row(i), prev);
                *out = if li < last { tanh(h) } else { h };
            }
            offset += l.inputs;
        }
    }

    /// Reverse pass through the activations in `tape`.
    ///
    /// Adds `d(upstream . f)/d(theta)` into `param_grad` and returns the
    /// gradient with respect to the input.
    pub fn backward_from(
        &self,
        tape: &[f64],
        upstream: &[f64],
        param_grad: &mut [f64],
    ) -> Vec<f64> {
        let mut input_grad = vec![0.0; self.input_dim()];
        self.backward_with(
            tape,
            upstream,
            param_grad,
            &mut input_grad,
            &mut Scratch::default(),
        );
        input_grad
    }

    /// [`MlpParams::backward_from`] writing the input gradient into
    /// `input_grad` and reusing `scratch` between calls.
    pub fn backward_with(
        &self,
        tape: &[f64],
        upstream: &[f64],
        param_grad: &mut [f64],
        input_grad: &mut [f64],
        scratch: &mut Scratch,
    ) {
        let Scratch { delta, prev } = scratch;
        delta.clear();
        delta.extend_from_slice(upstream);
        let mut in_end = self.tape_len() - self.output_dim();
        let mut p_end = self.param_count();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let input = &tape[in_end - l.inputs..in_end];
            let (gw, gb) = param_grad[p_end - l.param_count()..p_end].split_at_mut(l.weights.len());
            prev.clear();
            prev.resize(l.inputs, 0.0);
            for (i, &d) in delta.iter().enumerate() {
                gb[i] += d;
                let row = l.row(i);
                let grow = &mut gw[i * l.inputs..(i + 1) * l.inputs];
                for j in 0..l.inputs {
                    grow[j] += d * input[j];
                    prev[j] += row[j] * d;
                }
            }
            if li > 0 {
                // input[j] = tanh(h_j), so dtanh = 1 - input[j]^2
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
            std::mem::swap(delta, prev);
            in_end -= l.inputs;
            p_end -= l.param_count();
        }
        input_grad.copy_from_slice(delta);
    }

    /// Scalar-in, scalar-out evaluation.
    pub fn eval_scalar(&self, x: f64, tape: &mut [f64]) -> f64 {
        self.forward_into(&[x], tape);
        tape[tape.len() - 1]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// `tanh` through `expm1`, about twice as fast as the libm routine and
/// within an ulp or two of it.
#[inline]
fn tanh(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = (2.0 * x).exp_m1();
    e / (e + 2.0)
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Reusable buffers for [`MlpParams::backward_with`].
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    delta: Vec<f64>,
    prev: Vec<f64>,
}

/// Network output for input `x`.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x)?;
    let mut tape = vec![0.0; params.tape_len()];
    params.forward_into(x, &mut tape);
    Ok(tape[tape.len() - params.output_dim()..].to_vec())
}

/// Gradients of `upstream . mlp_forward(params, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    /// In flattened parameter order.
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn mlp_gradients(params: &MlpParams, x: &[f64], upstream: &[f64]) -> Result<MlpGradients> {
    params.check_input(x)?;
    if upstream.len() != params.output_dim() {
        return Err(Error::Dimension {
            expected: params.output_dim(),
            actual: upstream.len(),
        });
    }
    let mut tape = vec![0.0; params.tape_len()];
    params.forward_into(x, &mut tape);
    let mut grad = vec![0.0; params.param_count()];
    let input = params.backward_from(&tape, upstream, &mut grad);
    Ok(MlpGradients {
        params: grad,
        input,
    })
}

/// Drift and diffusion networks of one generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetPair {
    pub drift: MlpParams,
    pub diffusion: MlpParams,
}

impl NetPair {
    pub fn new(drift: MlpParams, diffusion: MlpParams) -> Result<Self> {
        for net in [&drift, &diffusion] {
            if net.input_dim() != 1 || net.output_dim() != 1 {
                return Err(Error::Config(
                    "drift and diffusion networks map a scalar state to a scalar".into(),
                ));
            }
        }
        Ok(Self { drift, diffusion })
    }

    /// Scalar networks with the given hidden widths, initialized from `rng`.
    pub fn init<R: Rng + ?Sized>(
        drift_hidden: &[usize],
        diffusion_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = |hidden: &[usize]| {
            std::iter::once(1)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(1))
                .collect::<Vec<_>>()
        };
        let drift = MlpParams::init(&sizes(drift_hidden), rng)?;
        let diffusion = MlpParams::init(&sizes(diffusion_hidden), rng)?;
        Self::new(drift, diffusion)
    }

    pub fn drift_count(&self) -> usize {
        self.drift.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.drift.param_count() + self.diffusion.param_count()
    }

    /// Drift parameters followed by diffusion parameters.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.drift.to_flat();
        v.extend(self.diffusion.to_flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let (d, s) = flat.split_at(self.drift_count());
        self.drift.set_flat(d)?;
        self.diffusion.set_flat(s)
    }
}

/// Pathwise derivative `dX_t/d(theta)` over drift then diffusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub values: Vec<f64>,
}

impl Sensitivity {
    pub fn zeros(nets: &NetPair) -> Self {
        Self {
            values: vec![0.0; nets.param_count()],
        }
    }
}

/// One Euler step of the sensitivity equation
/// `dY = (b_theta + b_x Y) dt + (s_theta + s_x Y) dB`, evaluated at state `x`.
pub fn sensitivity_step(
    nets: &NetPair,
    x: f64,
    y: &Sensitivity,
    dt: f64,
    db: f64,
) -> Result<Sensitivity> {
    let p = nets.param_count();
    if y.values.len() != p {
        return Err(Error::Dimension {
            expected: p,
            actual: y.values.len(),
        });
    }
    let b = mlp_gradients(&nets.drift, &[x], &[1.0])?;
    let s = mlp_gradients(&nets.diffusion, &[x], &[1.0])?;
    let (bx, sx) = (b.input[0], s.input[0]);
    let k = nets.drift_count();
    let mut out = Vec::with_capacity(p);
    for (i, &yi) in y.values.iter().enumerate() {
        let (b_theta, s_theta) = if i < k {
            (b.params[i], 0.0)
        } else {
            (0.0, s.params[i - k])
        };
        let v = yi + (b_theta + bx * yi) * dt + (s_theta + sx * yi) * db;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                context: format!("sensitivity component {i} overflowed"),
            });
        }
        out.push(v);
    }
    Ok(Sensitivity { values: out })
}
