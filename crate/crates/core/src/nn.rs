//! Dense feed-forward networks with hand-written reverse mode, Adam and the
//! R² primitives used by the training losses.
//!
//! Layout: a layer holds `weights` of shape `(out, in)` and `bias` of length
//! `out`; batches are `(batch, features)` row-major matrices.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator guard for R² on near-constant targets.
pub const EPSILON_VAR: f64 = 1e-12;

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// SplitMix64 finalizer; derives independent RNG streams from one seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Selu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative at pre-activation `z`, given `a = apply(z)`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    a + SELU_LAMBDA * SELU_ALPHA
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "selu" => Ok(Activation::Selu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Argument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Glorot/Xavier uniform matrix of shape `(fan_out, fan_in)` with entries on
/// `[-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))]`.
pub fn glorot_uniform_init(fan_in: usize, fan_out: usize, seed: u64) -> Array2<f64> {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub dropout: f64,
}

impl DenseLayer {
    pub fn input_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout active, masks drawn from this seed.
    Train {
        seed: u64,
    },
    Eval,
}

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
    // Changes whenever parameters may have been mutated; tapes remember it.
    revision: u64,
}

impl Clone for MlpNetwork {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            revision: fresh_revision(),
        }
    }
}

impl PartialEq for MlpNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    revision: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Parameter blocks in the same order as [`MlpNetwork::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

impl MlpNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_width() {
                return Err(Error::shape("layer bias", l.output_width(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].output_width() != l.input_width() {
                return Err(Error::shape(
                    "layer chain",
                    layers[i - 1].output_width(),
                    l.input_width(),
                ));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Argument(format!(
                    "dropout rate {} outside [0, 1)",
                    l.dropout
                )));
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Argument(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(Self {
            layers,
            revision: fresh_revision(),
        })
    }

    /// Glorot-initialized network with zero biases. `widths` lists every
    /// layer width including input and output; dropout goes on hidden layers.
    pub fn glorot(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Argument(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| DenseLayer {
                weights: glorot_uniform_init(widths[l], widths[l + 1], mix_seed(seed, l as u64)),
                bias: Array1::zeros(widths[l + 1]),
                activation: if l + 1 == n { output } else { hidden },
                dropout: if l + 1 == n { 0.0 } else { dropout },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").output_width()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Hidden layer widths (all layers except the output).
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(DenseLayer::output_width)
            .collect()
    }

    /// Mutable parameter blocks `[W0, b0, W1, b1, ...]`; invalidates tapes.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision = fresh_revision();
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_block_names(&self, prefix: &str) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.layer{i}.weights"), l.weights.len()),
                    (format!("{prefix}.layer{i}.bias"), l.bias.len()),
                ]
            })
            .collect()
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: ForwardMode) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_width() {
            return Err(Error::shape("network input", self.input_width(), x.ncols()));
        }
        let n = self.layers.len();
        let mut tape = Tape {
            revision: self.revision,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut current = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            let a = z.mapv(|v| layer.activation.apply(v));
            let mask = match mode {
                ForwardMode::Train { seed } if layer.dropout > 0.0 => {
                    let keep = 1.0 - layer.dropout;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, l as u64));
                    Some(Array2::from_shape_simple_fn(a.dim(), || {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }))
                }
                _ => None,
            };
            let out = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            tape.inputs.push(std::mem::replace(&mut current, out));
            tape.pre.push(z);
            tape.post.push(a);
            tape.masks.push(mask);
        }
        Ok((current, tape))
    }

    /// Eval-mode forward without a tape.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_width() {
            return Err(Error::shape("network input", self.input_width(), x.ncols()));
        }
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            z.mapv_inplace(|v| layer.activation.apply(v));
            current = z;
        }
        Ok(current)
    }

    /// Reverse pass: parameter gradients and the gradient with respect to the
    /// network input, given `upstream = dLoss/dOutput`.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if tape.revision != self.revision || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        let batch = tape.inputs[0].nrows();
        if upstream.dim() != (batch, self.output_width()) {
            return Err(Error::shape(
                "upstream gradient",
                format!("{batch}x{}", self.output_width()),
                format!("{}x{}", upstream.nrows(), upstream.ncols()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &tape.masks[l] {
                g *= mask;
            }
            Zip::from(&mut g)
                .and(&tape.pre[l])
                .and(&tape.post[l])
                .for_each(|g, &z, &a| *g *= layer.activation.derivative(z, a));
            let weights = standard_layout(g.t().dot(&tape.inputs[l]));
            let bias = g.sum_axis(Axis(0));
            g = g.dot(&layer.weights);
            grads.push(LayerGradient { weights, bias });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }
}

/// Row-major copy when `a` came out of a product in another layout.
pub(crate) fn standard_layout(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected Adam over a fixed list of named parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    blocks: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig, blocks: &[(String, usize)]) -> Self {
        Self {
            config,
            t: 0,
            blocks: blocks
                .iter()
                .map(|(name, len)| Moments {
                    name: name.clone(),
                    m: vec![0.0; *len],
                    v: vec![0.0; *len],
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update of every block. Nothing is modified when a gradient is
    /// non-finite or a block has the wrong length.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.blocks.len() || grads.len() != self.blocks.len() {
            return Err(Error::shape(
                "optimizer blocks",
                self.blocks.len(),
                params.len().min(grads.len()),
            ));
        }
        for ((p, g), b) in params.iter().zip(grads).zip(&self.blocks) {
            if p.len() != b.m.len() || g.len() != b.m.len() {
                return Err(Error::shape("optimizer block", b.m.len(), p.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Gradient {
                    block: b.name.clone(),
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), b) in params.iter_mut().zip(grads).zip(&mut self.blocks) {
            for i in 0..p.len() {
                b.m[i] = beta1 * b.m[i] + (1.0 - beta1) * g[i];
                b.v[i] = beta2 * b.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = b.m[i] / c1;
                let v_hat = b.v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `1 - SS_res / max(SS_tot, EPSILON_VAR)`, mean taken over `y_true`.
pub fn r2(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> Result<f64> {
    check_r2_args(y_true, y_pred)?;
    let mean = y_true.mean().expect("non-empty");
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot.max(EPSILON_VAR))
}

/// R² and its gradient with respect to `y_pred`.
pub fn r2_with_grad(
    y_true: ArrayView1<f64>,
    y_pred: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>)> {
    check_r2_args(y_true, y_pred)?;
    let mean = y_true.mean().expect("non-empty");
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    let denom = ss_tot.max(EPSILON_VAR);
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    let grad = Zip::from(y_true)
        .and(y_pred)
        .map_collect(|y, p| 2.0 * (y - p) / denom);
    Ok((1.0 - ss_res / denom, grad))
}

fn check_r2_args(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape("r2", y_true.len(), y_pred.len()));
    }
    if y_true.len() < 2 {
        return Err(Error::Argument("r2 needs at least 2 samples".into()));
    }
    Ok(())
}
