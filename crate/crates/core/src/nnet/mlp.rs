//! Dense SiLU multilayer perceptron with a bounded sigmoid output layer.
//!
//! Parameters live in one flat vector. For every layer `l` the block is the
//! weight matrix of shape `(layer_sizes[l + 1], layer_sizes[l])` in row-major
//! order followed by the bias vector of length `layer_sizes[l + 1]`.
//!
//! Hidden layers apply `silu(z) = z * sigmoid(z)`. The last layer maps its
//! pre-activation through `lo + (hi - lo) * sigmoid(z)`, so every output lies
//! strictly inside `(lo, hi)`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Pre-activations beyond this magnitude are clamped before the output sigmoid.
/// At 30 the sigmoid is still 1e-13 away from its limits, which keeps outputs
/// strictly inside the bounds in double precision.
const OUTPUT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "SiLU")]
    Silu,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Open interval the network outputs are mapped into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputBounds {
    pub lo: f64,
    pub hi: f64,
}

impl OutputBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "output bounds must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    fn map(&self, z: f64) -> f64 {
        let z = z.clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP);
        let width = self.hi - self.lo;
        // Evaluate from the nearer bound so saturation never rounds onto it.
        if z > 0.0 {
            self.hi - width * sigmoid(-z)
        } else {
            self.lo + width * sigmoid(z)
        }
    }

    #[inline]
    fn map_prime(&self, z: f64) -> f64 {
        if z.abs() > OUTPUT_CLAMP {
            return 0.0;
        }
        let s = sigmoid(z);
        (self.hi - self.lo) * s * (1.0 - s)
    }
}

/// Layer topology, activation and output bounds of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    bounds: OutputBounds,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, bounds: OutputBounds) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        OutputBounds::new(bounds.lo, bounds.hi)?;
        Ok(Self {
            layer_sizes,
            activation: Activation::Silu,
            bounds,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn bounds(&self) -> OutputBounds {
        self.bounds
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: sum over layers of `n_in * n_out + n_out`.
    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.num_params());
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            values.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector { values }
    }

    fn tape_sizes(&self) -> (usize, usize) {
        let acts: usize = self.layer_sizes.iter().sum();
        let pre: usize = self.layer_sizes[1..].iter().sum();
        (acts, pre)
    }

    /// Evaluate the network. `params` must follow the documented layout.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp parameters", self.num_params(), params.len())?;
        check_len("mlp input", self.input_dim(), input.len())?;
        let mut tape = MlpTape::default();
        Ok(self.forward_taped(params, input, &mut tape).to_vec())
    }

    /// Forward pass that records activations for a later [`MlpSpec::backward_taped`].
    /// Shapes are the caller's responsibility.
    pub(crate) fn forward_taped<'t>(
        &self,
        params: &[f64],
        input: &[f64],
        tape: &'t mut MlpTape,
    ) -> &'t [f64] {
        let (n_acts, n_pre) = self.tape_sizes();
        tape.acts.resize(n_acts, 0.0);
        tape.slope.resize(n_pre, 0.0);
        tape.acts[..input.len()].copy_from_slice(input);

        let last = self.num_layers() - 1;
        let mut p_off = 0;
        let mut a_off = 0;
        let mut z_off = 0;
        for l in 0..self.num_layers() {
            let n_in = self.layer_sizes[l];
            let n_out = self.layer_sizes[l + 1];
            let weights = &params[p_off..p_off + n_in * n_out];
            let biases = &params[p_off + n_in * n_out..p_off + n_in * n_out + n_out];
            let (prev, next) = tape.acts.split_at_mut(a_off + n_in);
            let a_in = &prev[a_off..];
            for j in 0..n_out {
                let row = &weights[j * n_in..(j + 1) * n_in];
                let z = biases[j] + row.iter().zip(a_in).map(|(w, a)| w * a).sum::<f64>();
                // The local slope is stored so the reverse sweep needs no exp.
                let (act, slope) = if l == last {
                    (self.bounds.map(z), self.bounds.map_prime(z))
                } else {
                    match self.activation {
                        Activation::Silu => {
                            let s = sigmoid(z);
                            (z * s, s * (1.0 + z * (1.0 - s)))
                        }
                    }
                };
                next[j] = act;
                tape.slope[z_off + j] = slope;
            }
            p_off += n_in * n_out + n_out;
            a_off += n_in;
            z_off += n_out;
        }
        &tape.acts[a_off..]
    }

    /// Reverse sweep over a recorded tape. Parameter gradients are added into
    /// `param_grad` when given; input gradients overwrite `input_grad`.
    pub(crate) fn backward_taped(
        &self,
        params: &[f64],
        tape: &MlpTape,
        cotangent: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: &mut [f64],
    ) {
        SCRATCH.with(|cell| {
            let (delta, upstream) = &mut *cell.borrow_mut();
            let n_layers = self.num_layers();
            let mut z_off = tape.slope.len() - self.output_dim();
            let mut a_off = tape.acts.len() - self.output_dim();
            let mut p_off = params.len();
            delta.clear();
            delta.extend(cotangent.iter().zip(&tape.slope[z_off..]).map(|(c, s)| c * s));

            for l in (0..n_layers).rev() {
                let n_in = self.layer_sizes[l];
                let n_out = self.layer_sizes[l + 1];
                p_off -= n_in * n_out + n_out;
                a_off -= n_in;
                let weights = &params[p_off..p_off + n_in * n_out];
                if let Some(grad) = param_grad.as_deref_mut() {
                    let a_in = &tape.acts[a_off..a_off + n_in];
                    let (gw, gb) = grad[p_off..p_off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                    for j in 0..n_out {
                        let dj = delta[j];
                        if dj == 0.0 {
                            continue;
                        }
                        gb[j] += dj;
                        for (g, a) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(a_in) {
                            *g += dj * a;
                        }
                    }
                }
                upstream.clear();
                upstream.resize(n_in, 0.0);
                for j in 0..n_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    for (u, w) in upstream.iter_mut().zip(&weights[j * n_in..(j + 1) * n_in]) {
                        *u += w * dj;
                    }
                }
                if l == 0 {
                    input_grad.copy_from_slice(upstream);
                } else {
                    z_off -= n_in;
                    delta.clear();
                    delta.extend(upstream.iter().zip(&tape.slope[z_off..z_off + n_in]).map(|(u, s)| u * s));
                }
            }
        })
    }

    /// Exact reverse-mode gradient of `<cotangent, forward(params, input)>`
    /// with respect to the parameters and the input.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("mlp parameters", self.num_params(), params.len())?;
        check_len("mlp input", self.input_dim(), input.len())?;
        check_len("mlp cotangent", self.output_dim(), cotangent.len())?;
        let mut tape = MlpTape::default();
        self.forward_taped(params, input, &mut tape);
        let mut param_grad = vec![0.0; params.len()];
        let mut input_grad = vec![0.0; input.len()];
        self.backward_taped(params, &tape, cotangent, Some(&mut param_grad), &mut input_grad);
        Ok((param_grad, input_grad))
    }
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    acts: Vec<f64>,
    /// Activation slope at every pre-activation.
    slope: Vec<f64>,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

impl MlpTape {
    pub fn output(&self, spec: &MlpSpec) -> &[f64] {
        &self.acts[self.acts.len() - spec.output_dim()..]
    }
}

/// Flat parameter storage for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![0.0; spec.num_params()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// JSON checkpoint of a single network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub bounds: (f64, f64),
    pub values: Vec<f64>,
    pub seed: u64,
}

impl MlpCheckpoint {
    pub fn new(spec: &MlpSpec, params: &[f64], seed: u64) -> Self {
        Self {
            layer_sizes: spec.layer_sizes.clone(),
            activation: spec.activation,
            bounds: (spec.bounds.lo, spec.bounds.hi),
            values: params.to_vec(),
            seed,
        }
    }

    pub fn into_parts(self) -> Result<(MlpSpec, ParamVector, u64)> {
        let spec = MlpSpec::new(self.layer_sizes, OutputBounds::new(self.bounds.0, self.bounds.1)?)?;
        check_len("checkpoint values", spec.num_params(), self.values.len())?;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok((spec, ParamVector { values: self.values }, self.seed))
    }
}
