//! The SDF, colour and density field networks and the sharpness-controlled
//! logistic used to turn SDF values into opacity.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::{self, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// `ln(1 + e^(k z)) / k`; `sharpness = 1` is the ordinary softplus.
    Softplus { sharpness: f64 },
    Sigmoid,
}

impl Activation {
    pub const SOFTPLUS: Activation = Activation::Softplus { sharpness: 1.0 };

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Softplus { .. } => self.apply_with_derivative(z).0,
            Activation::Sigmoid => math::sigmoid(z),
        }
    }

    /// Derivative given the pre-activation `z` and the output `y`. ReLU takes
    /// the zero subgradient at the kink.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus { sharpness } => math::sigmoid(sharpness * z),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    /// Output and derivative together, sharing the exponential.
    #[inline]
    pub fn apply_with_derivative(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Softplus { sharpness } => {
                let x = sharpness * z;
                let e = (-x.abs()).exp();
                let y = (x.max(0.0) + e.ln_1p()) / sharpness;
                let d = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (y, d)
            }
            Activation::Identity | Activation::Relu | Activation::Sigmoid => {
                let y = self.apply(z);
                (y, self.derivative(z, y))
            }
        }
    }

    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.biases[o] + dot(row, x));
        }
    }
}

/// Dot product with four independent partial sums, which lets the compiler
/// keep them in vector registers.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    /// Input to each layer (the network input first).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
    /// Activation derivative at each pre-activation.
    pub slope: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpParams {
    /// Zero-initialised network with layer widths `sizes[0] -> … -> sizes[n]`.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2);
        MlpParams {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "mlp input width");
        let mut cur = x.to_vec();
        let mut pre = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut pre);
            let act = self.activation(l);
            cur.clear();
            cur.extend(pre.iter().map(|&z| act.apply(z)));
        }
        cur
    }

    pub fn forward_traced(&self, x: &[f64]) -> MlpTape {
        assert_eq!(x.len(), self.input_dim(), "mlp input width");
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            slope: Vec::with_capacity(self.layers.len()),
            output: Vec::new(),
        };
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(layer.outputs);
            layer.affine(&cur, &mut pre);
            let act = self.activation(l);
            let (next, slope) = pre.iter().map(|&z| act.apply_with_derivative(z)).unzip();
            tape.inputs.push(std::mem::replace(&mut cur, next));
            tape.pre.push(pre);
            tape.slope.push(slope);
        }
        tape.output = cur;
        tape
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, tape: &MlpTape, upstream: &[f64], grad: &mut MlpParams) -> Vec<f64> {
        let n = self.layers.len();
        let mut delta: Vec<f64> = upstream.to_vec();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            for (d, s) in delta.iter_mut().zip(&tape.slope[l]) {
                *d *= s;
            }
            let input = &tape.inputs[l];
            let g = &mut grad.layers[l];
            let mut next = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = o * layer.inputs;
                let wrow = &layer.weights[row..row + layer.inputs];
                let grow = &mut g.weights[row..row + layer.inputs];
                for i in 0..layer.inputs {
                    grow[i] += d * input[i];
                    next[i] += d * wrow[i];
                }
            }
            delta = next;
        }
        delta
    }

    /// Smallest |pre-activation| over kinked hidden units; used to detect
    /// evaluations sitting on a ReLU kink.
    pub fn min_kink_distance(&self, tape: &MlpTape) -> f64 {
        let mut m = f64::INFINITY;
        for (l, pre) in tape.pre.iter().enumerate() {
            if self.activation(l).has_kink() {
                for z in pre {
                    m = m.min(z.abs());
                }
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

/// The sharpness-controlled logistic `1 / (1 + exp(-s β))`.
#[inline]
pub fn logistic_delta(s: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    math::sigmoid(s * beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Number of sinusoidal octaves appended to the position; 0 disables.
    pub encoding_frequencies: usize,
    /// Sharpness of the softplus hidden activation in the SDF net.
    pub sdf_sharpness: f64,
    /// Initial radius of the SDF sphere, as a fraction of the scene extent.
    pub init_radius_fraction: f64,
    pub init_beta: f64,
    /// Standard deviation of the colour/density weight init.
    pub init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hidden_width: 64,
            hidden_layers: 2,
            encoding_frequencies: 0,
            sdf_sharpness: 100.0,
            init_radius_fraction: 0.5,
            init_beta: 10.0,
            init_scale: 1e-2,
        }
    }
}

impl FieldConfig {
    pub fn position_dim(&self) -> usize {
        3 + 6 * self.encoding_frequencies
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldNets {
    pub sdf: MlpParams,
    pub rgb: MlpParams,
    pub density: MlpParams,
    pub log_beta: f64,
    pub encoding_frequencies: usize,
}

/// Field values and tapes for one sample point.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub sdf: f64,
    pub rgb: [f64; 3],
    pub density: f64,
    pub sdf_tape: MlpTape,
    pub rgb_tape: Option<MlpTape>,
    pub density_tape: MlpTape,
}

impl FieldNets {
    fn sizes(input: usize, cfg: &FieldConfig, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        s.push(output);
        s
    }

    pub fn zeros(channels: usize, cfg: &FieldConfig) -> Self {
        let pos = cfg.position_dim();
        let sdf_act = Activation::Softplus {
            sharpness: cfg.sdf_sharpness,
        };
        FieldNets {
            sdf: MlpParams::zeros(
                &Self::sizes(pos + channels, cfg, 1),
                sdf_act,
                Activation::Identity,
            ),
            rgb: MlpParams::zeros(
                &Self::sizes(pos + channels + 3, cfg, 3),
                Activation::SOFTPLUS,
                Activation::Sigmoid,
            ),
            density: MlpParams::zeros(
                &Self::sizes(pos + channels, cfg, 1),
                Activation::SOFTPLUS,
                Activation::SOFTPLUS,
            ),
            log_beta: cfg.init_beta.ln(),
            encoding_frequencies: cfg.encoding_frequencies,
        }
    }

    /// Geometric initialisation for the SDF net and small Gaussian weights
    /// for the colour and density nets.
    ///
    /// First-layer rows are unit directions spread on a Fibonacci sphere
    /// (position inputs only, offset by `center`), so the mean of their
    /// rectified outputs is `‖p − center‖ / 4` up to quadrature and smoothing
    /// error. Later hidden layers start
    /// as identity plus small noise and the output averages the units, which
    /// puts the zero level set on a sphere of radius
    /// `init_radius_fraction * extent`.
    pub fn initialize<R: Rng + ?Sized>(
        channels: usize,
        cfg: &FieldConfig,
        center: Vec3,
        extent: f64,
        rng: &mut R,
    ) -> Self {
        let mut nets = Self::zeros(channels, cfg);
        let radius = cfg.init_radius_fraction * extent;
        let n = nets.sdf.layers.len();
        for (l, layer) in nets.sdf.layers.iter_mut().enumerate() {
            let (fan_in, fan_out) = (layer.inputs, layer.outputs);
            if l + 1 == n {
                let scale = 4.0 / fan_in as f64;
                for w in &mut layer.weights {
                    *w = scale * (1.0 + 1e-3 * normal(rng));
                }
                layer.biases.fill(-radius);
            } else if l == 0 {
                for o in 0..fan_out {
                    let u = fibonacci_direction(o, fan_out);
                    layer.weights[o * fan_in..o * fan_in + 3].copy_from_slice(&u);
                    layer.biases[o] = -math::dot(u, center);
                }
            } else {
                let noise = 1e-2 / (fan_in as f64).sqrt();
                for o in 0..fan_out {
                    for i in 0..fan_in {
                        let eye = if i == o { 1.0 } else { 0.0 };
                        layer.weights[o * fan_in + i] = eye + noise * normal(rng);
                    }
                }
            }
        }
        for net in [&mut nets.rgb, &mut nets.density] {
            for layer in &mut net.layers {
                for w in &mut layer.weights {
                    *w = cfg.init_scale * normal(rng);
                }
            }
        }
        nets
    }

    pub fn zeros_like(&self) -> Self {
        FieldNets {
            sdf: self.sdf.zeros_like(),
            rgb: self.rgb.zeros_like(),
            density: self.density.zeros_like(),
            log_beta: 0.0,
            encoding_frequencies: self.encoding_frequencies,
        }
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn channels(&self) -> usize {
        self.sdf.input_dim() - 3 - 6 * self.encoding_frequencies
    }

    /// Position encoding followed by the feature vector.
    pub fn encode_input(&self, p: Vec3, f: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&p);
        for l in 0..self.encoding_frequencies {
            let freq = (1u64 << l) as f64 * std::f64::consts::PI;
            for a in 0..3 {
                out.push((freq * p[a]).sin());
            }
            for a in 0..3 {
                out.push((freq * p[a]).cos());
            }
        }
        out.extend_from_slice(f);
    }

    pub fn phi_sdf(&self, p: Vec3, f: &[f64]) -> f64 {
        let mut x = Vec::new();
        self.encode_input(p, f, &mut x);
        self.sdf.forward(&x)[0]
    }

    pub fn phi_rgb(&self, p: Vec3, f: &[f64], d: Vec3) -> [f64; 3] {
        debug_assert!((math::norm(d) - 1.0).abs() < 1e-6, "view direction must be unit");
        let mut x = Vec::new();
        self.encode_input(p, f, &mut x);
        x.extend_from_slice(&d);
        let y = self.rgb.forward(&x);
        [y[0], y[1], y[2]]
    }

    pub fn phi_density(&self, p: Vec3, f: &[f64]) -> f64 {
        let mut x = Vec::new();
        self.encode_input(p, f, &mut x);
        self.density.forward(&x)[0]
    }

    /// Evaluates all three nets at one point, keeping tapes for backward.
    /// The colour net is skipped when `with_rgb` is false.
    pub fn evaluate_traced(&self, p: Vec3, f: &[f64], d: Vec3, with_rgb: bool) -> FieldSample {
        let mut x = Vec::with_capacity(self.rgb.input_dim());
        self.encode_input(p, f, &mut x);
        let sdf_tape = self.sdf.forward_traced(&x);
        let density_tape = self.density.forward_traced(&x);
        let rgb_tape = with_rgb.then(|| {
            x.extend_from_slice(&d);
            self.rgb.forward_traced(&x)
        });
        let rgb = rgb_tape
            .as_ref()
            .map(|t| [t.output[0], t.output[1], t.output[2]])
            .unwrap_or([0.0; 3]);
        FieldSample {
            sdf: sdf_tape.output[0],
            rgb,
            density: density_tape.output[0],
            sdf_tape,
            rgb_tape,
            density_tape,
        }
    }

    /// Backpropagates upstream gradients of one [`FieldSample`] into `grad`
    /// and returns the gradient with respect to the feature vector.
    pub fn backward_sample(
        &self,
        sample: &FieldSample,
        d_sdf: f64,
        d_rgb: [f64; 3],
        d_density: f64,
        grad: &mut FieldNets,
    ) -> Vec<f64> {
        let pos = 3 + 6 * self.encoding_frequencies;
        let c = self.channels();
        let mut df = vec![0.0; c];
        if d_sdf != 0.0 {
            let gx = self.sdf.backward(&sample.sdf_tape, &[d_sdf], &mut grad.sdf);
            for k in 0..c {
                df[k] += gx[pos + k];
            }
        }
        if d_density != 0.0 {
            let gx = self
                .density
                .backward(&sample.density_tape, &[d_density], &mut grad.density);
            for k in 0..c {
                df[k] += gx[pos + k];
            }
        }
        if let Some(tape) = &sample.rgb_tape {
            if d_rgb.iter().any(|v| *v != 0.0) {
                let gx = self.rgb.backward(tape, &d_rgb, &mut grad.rgb);
                for k in 0..c {
                    df[k] += gx[pos + k];
                }
            }
        }
        df
    }

    pub fn is_finite(&self) -> bool {
        self.sdf.is_finite()
            && self.rgb.is_finite()
            && self.density.is_finite()
            && self.log_beta.is_finite()
    }
}

/// `i`-th of `n` near-uniform unit vectors (golden-angle spiral).
fn fibonacci_direction(i: usize, n: usize) -> Vec3 {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let theta = golden * i as f64;
    [r * theta.cos(), r * theta.sin(), z]
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
