//! Dense feedforward networks with dropout gating and exact backprop.
//!
//! A layer maps its (gated) input `u` to `g(W · [u; 1])`, where the last
//! column of `W` holds the bias. Dropout is expressed as a multiplicative
//! gate on every layer input: a sampled 0/1 mask during training, the keep
//! probability itself for `scaled` inference, or 1 when dropout is off.

mod model_file;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

pub use model_file::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};

/// Slope of the modified ReLU below zero.
pub const RELU_LEAK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    ModifiedRelu,
    Logistic,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::ModifiedRelu => {
                if a > 0.0 {
                    a
                } else {
                    RELU_LEAK * a
                }
            }
            Activation::Logistic => 1.0 / (1.0 + (-a).exp()),
            Activation::Identity => a,
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `z`.
    #[inline]
    fn derivative(self, a: f64, z: f64) -> f64 {
        match self {
            Activation::ModifiedRelu => {
                if a > 0.0 {
                    1.0
                } else {
                    RELU_LEAK
                }
            }
            Activation::Logistic => z * (1.0 - z),
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::ModifiedRelu => 0,
            Activation::Logistic => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::ModifiedRelu),
            1 => Some(Activation::Logistic),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One affine map plus activation. `weights` is `rows × cols` row-major and
/// its last column is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, activation: Activation) -> Result<Self> {
        if rows == 0 || cols < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer must be at least 1x2, got {rows}x{cols}"
            )));
        }
        ensure_shape!(
            weights.len() == rows * cols,
            "{} weights for a {rows}x{cols} layer",
            weights.len()
        );
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite weight".into()));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            activation,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn input_dim(&self) -> usize {
        self.cols - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            ensure_shape!(
                pair[0].rows == pair[1].input_dim(),
                "layer {l} emits {} values but layer {} expects {}",
                pair[0].rows,
                l + 1,
                pair[1].input_dim()
            );
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.rows))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Rounds every weight to the nearest `f32`, the precision of model files.
    pub fn quantize_f32(&mut self) {
        for layer in &mut self.layers {
            for w in &mut layer.weights {
                *w = *w as f32 as f64;
            }
        }
    }

    /// Multiplies each layer's input weights (not biases) by that layer's
    /// keep probability, so plain inference equals `scaled` dropout
    /// inference. Applied once after training with dropout.
    pub fn fold_keep(&mut self, dropout: &DropoutSpec) {
        if dropout.mode == DropoutMode::Off {
            return;
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = dropout.keep_for(l);
            let cols = layer.cols;
            for row in layer.weights.chunks_exact_mut(cols) {
                row[..cols - 1].iter_mut().for_each(|w| *w *= p);
            }
        }
    }

    /// Deterministic inference without dropout.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(feedforward(self, x, &Gates::Off)?.output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutMode {
    /// Bernoulli masks drawn per call.
    Sampled,
    /// Each layer input multiplied by its keep probability.
    Scaled,
    Off,
}

/// Dropout configuration: keep probability per layer input (a single value
/// applies to every layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub keep: Vec<f64>,
    pub mode: DropoutMode,
    #[serde(default)]
    pub seed: u64,
}

impl DropoutSpec {
    pub fn off() -> Self {
        Self {
            keep: vec![1.0],
            mode: DropoutMode::Off,
            seed: 0,
        }
    }

    pub fn uniform(keep: f64, mode: DropoutMode, seed: u64) -> Self {
        Self {
            keep: vec![keep],
            mode,
            seed,
        }
    }

    pub fn with_mode(&self, mode: DropoutMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.keep.len() != 1 && self.keep.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{} keep probabilities for {layers} layers",
                self.keep.len()
            )));
        }
        if let Some(p) = self.keep.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::InvalidArgument(format!("keep probability {p} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn keep_for(&self, layer: usize) -> f64 {
        if self.keep.len() == 1 {
            self.keep[0]
        } else {
            self.keep[layer]
        }
    }

    /// Realizes the gates for one forward pass. Only `sampled` mode draws
    /// from `rng`.
    pub fn gates<R: Rng + ?Sized>(&self, net: &Network, rng: &mut R) -> Result<Gates> {
        self.validate(net.layers().len())?;
        Ok(match self.mode {
            DropoutMode::Off => Gates::Off,
            DropoutMode::Scaled => Gates::Scaled((0..net.layers().len()).map(|l| self.keep_for(l)).collect()),
            DropoutMode::Sampled => Gates::Masks(
                net.layers()
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| {
                        let p = self.keep_for(l);
                        (0..layer.input_dim())
                            .map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            ),
        })
    }
}

/// Multiplicative gates applied to each layer's input.
#[derive(Debug, Clone, PartialEq)]
pub enum Gates {
    Off,
    /// One factor per layer.
    Scaled(Vec<f64>),
    /// One factor per input unit per layer.
    Masks(Vec<Vec<f64>>),
}

impl Gates {
    fn validate(&self, net: &Network) -> Result<()> {
        match self {
            Gates::Off => {}
            Gates::Scaled(s) => ensure_shape!(
                s.len() == net.layers().len(),
                "{} scale factors for {} layers",
                s.len(),
                net.layers().len()
            ),
            Gates::Masks(m) => {
                ensure_shape!(
                    m.len() == net.layers().len(),
                    "{} masks for {} layers",
                    m.len(),
                    net.layers().len()
                );
                for (mask, layer) in m.iter().zip(net.layers()) {
                    ensure_shape!(
                        mask.len() == layer.input_dim(),
                        "mask of {} for layer input {}",
                        mask.len(),
                        layer.input_dim()
                    );
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn factor(&self, layer: usize, unit: usize) -> f64 {
        match self {
            Gates::Off => 1.0,
            Gates::Scaled(s) => s[layer],
            Gates::Masks(m) => m[layer][unit],
        }
    }
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Gated input of each layer; `inputs[0]` is the gated network input.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pub pre: Vec<Vec<f64>>,
    /// Activations of each layer; the last entry is the network output.
    pub outputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub fn feedforward(net: &Network, x: &[f64], gates: &Gates) -> Result<Trace> {
    ensure_shape!(
        x.len() == net.input_dim(),
        "input of length {} for a network expecting {}",
        x.len(),
        net.input_dim()
    );
    gates.validate(net)?;
    let n = net.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n);

    for (l, layer) in net.layers.iter().enumerate() {
        let z = if l == 0 { x } else { &outputs[l - 1] };
        let u: Vec<f64> = z.iter().enumerate().map(|(i, v)| v * gates.factor(l, i)).collect();
        let cols = layer.cols;
        let a: Vec<f64> = layer
            .weights
            .chunks_exact(cols)
            .map(|row| {
                let (w, bias) = row.split_at(cols - 1);
                bias[0] + dot(w, &u)
            })
            .collect();
        let out: Vec<f64> = a.iter().map(|&v| layer.activation.apply(v)).collect();
        inputs.push(u);
        pre.push(a);
        outputs.push(out);
    }
    let output = outputs[n - 1].clone();
    Ok(Trace {
        inputs,
        pre,
        outputs,
        output,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums keep the loop vectorizable; the order is fixed.
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Gradients of the loss with respect to every layer's weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| g.is_finite())
    }

    pub fn check_congruent(&self, net: &Network) -> Result<()> {
        ensure_shape!(
            self.layers.len() == net.layers.len()
                && self
                    .layers
                    .iter()
                    .zip(&net.layers)
                    .all(|(g, l)| g.len() == l.weights.len()),
            "gradient shapes do not match the network"
        );
        Ok(())
    }
}

/// Sum-of-squared-error loss and its exact gradient under fixed `gates`.
pub fn backprop(net: &Network, x: &[f64], target: &[f64], gates: &Gates) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(net);
    let loss = backprop_into(net, x, target, gates, &mut grads)?;
    Ok((loss, grads))
}

/// Like [`backprop`] but adds the gradient into `grads`.
pub fn backprop_into(net: &Network, x: &[f64], target: &[f64], gates: &Gates, grads: &mut Gradients) -> Result<f64> {
    ensure_shape!(
        target.len() == net.output_dim(),
        "target of length {} for a network emitting {}",
        target.len(),
        net.output_dim()
    );
    grads.check_congruent(net)?;
    let trace = feedforward(net, x, gates)?;
    let n = net.layers.len();
    let last = &net.layers[n - 1];

    let mut loss = 0.0;
    let mut delta: Vec<f64> = trace
        .output
        .iter()
        .zip(target)
        .zip(&trace.pre[n - 1])
        .map(|((&y, &t), &a)| {
            let r = y - t;
            loss += r * r;
            2.0 * r * last.activation.derivative(a, y)
        })
        .collect();

    for l in (0..n).rev() {
        let layer = &net.layers[l];
        let u = &trace.inputs[l];
        let cols = layer.cols;
        let g = &mut grads.layers[l];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut g[r * cols..(r + 1) * cols];
            for (gw, &ui) in row[..cols - 1].iter_mut().zip(u) {
                *gw += d * ui;
            }
            row[cols - 1] += d;
        }
        if l == 0 {
            break;
        }
        let prev = &net.layers[l - 1];
        let mut du = vec![0.0; cols - 1];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[r * cols..r * cols + cols - 1];
            for (acc, &w) in du.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
        delta = du
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                v * gates.factor(l, i) * prev.activation.derivative(trace.pre[l - 1][i], trace.outputs[l - 1][i])
            })
            .collect();
    }
    Ok(loss)
}

/// Seeded network initialization: weights uniform with variance
/// `2 / fan_in` (rounded to `f32`), biases zero.
pub fn init_weights(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Network> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    if dims.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least input and output dimensions".into(),
        ));
    }
    if activations.len() != dims.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} activations for {} layers",
            activations.len(),
            dims.len() - 1
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument("zero-width layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .zip(activations)
        .map(|(pair, &act)| {
            let (fan_in, rows) = (pair[0], pair[1]);
            let cols = fan_in + 1;
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut weights = vec![0.0; rows * cols];
            for row in weights.chunks_exact_mut(cols) {
                for w in &mut row[..fan_in] {
                    *w = rng.gen_range(-bound..bound) as f32 as f64;
                }
            }
            Layer::new(rows, cols, weights, act)
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers)
}
