//! The trainable feature map: a small multilayer perceptron with a cached
//! forward pass and a hand-written backward pass, plus an identity encoder.

use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure_same_dim, Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation. ReLU uses 0 at the kink.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Fully connected network; hidden layers share one activation, the output
/// layer is affine.
///
/// Layer `l` maps `layer_dims[l]` to `layer_dims[l + 1]`; its weights are stored
/// row-major with shape `(layer_dims[l + 1], layer_dims[l])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp")]
pub struct MlpEncoder {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<RawMlp> for MlpEncoder {
    type Error = Error;

    fn try_from(raw: RawMlp) -> Result<Self> {
        MlpEncoder::from_parts(raw.layer_dims, raw.activation, raw.weights, raw.biases)
    }
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(contract("an MLP needs at least an input and an output dimension"));
    }
    if layer_dims.contains(&0) {
        return Err(contract("layer dimensions must be >= 1"));
    }
    Ok(())
}

impl MlpEncoder {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(layer_dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.uniform_in(-bound, bound)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        activation: Activation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(contract(format!(
                "expected {layers} weight and bias blocks, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            ensure_same_dim(pair[0] * pair[1], weights[l].len(), "weight block")?;
            ensure_same_dim(pair[1], biases[l].len(), "bias block")?;
        }
        let all_finite = weights.iter().chain(&biases).flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(contract("encoder parameters must be finite"));
        }
        Ok(Self {
            layer_dims,
            activation,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }
}

/// The feature map `R^L → R^D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Encoder {
    Identity { dim: usize },
    Mlp(MlpEncoder),
}

/// Intermediate values of one forward pass, needed by [`Encoder::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTape {
    fingerprint: u64,
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardTape {
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre_activations
    }
}

/// Parameter gradients (shape-congruent with the encoder) plus the input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_grad: Vec<f64>,
}

impl EncoderGrads {
    pub fn flat_params(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    fn congruent(&self, other: &EncoderGrads) -> bool {
        let shape = |g: &EncoderGrads| {
            (
                g.weights.iter().map(Vec::len).collect::<Vec<_>>(),
                g.biases.iter().map(Vec::len).collect::<Vec<_>>(),
                g.input_grad.len(),
            )
        };
        shape(self) == shape(other)
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        if !self.congruent(other) {
            return Err(contract("gradient shapes do not match"));
        }
        let pairs = self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain(std::iter::once(&mut self.input_grad))
            .zip(
                other
                    .weights
                    .iter()
                    .chain(&other.biases)
                    .chain(std::iter::once(&other.input_grad)),
            );
        for (dst, src) in pairs {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain(std::iter::once(&mut self.input_grad))
            .flatten()
            .for_each(|v| *v *= factor);
    }
}

/// Element-wise sum of two congruent gradient sets.
pub fn accumulate(a: &EncoderGrads, b: &EncoderGrads) -> Result<EncoderGrads> {
    let mut sum = a.clone();
    sum.add_assign(b)?;
    Ok(sum)
}

fn fnv1a(state: u64, word: u64) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01B3;
    word.to_le_bytes()
        .iter()
        .fold(state, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

impl Encoder {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(contract("identity encoder needs dimension >= 1"));
        }
        Ok(Encoder::Identity { dim })
    }

    pub fn mlp(layer_dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        MlpEncoder::init(layer_dims, activation, rng).map(Encoder::Mlp)
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp(m) => m.layer_dims[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp(m) => *m.layer_dims.last().expect("validated dims"),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Encoder::Identity { .. } => 0,
            Encoder::Mlp(m) => m.layer_dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum(),
        }
    }

    /// Hash of the architecture and every parameter bit pattern.
    fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
        match self {
            Encoder::Identity { dim } => fnv1a(OFFSET, *dim as u64),
            Encoder::Mlp(m) => {
                let h = m.layer_dims.iter().fold(OFFSET, |h, &d| fnv1a(h, d as u64));
                m.weights
                    .iter()
                    .chain(&m.biases)
                    .flatten()
                    .fold(h, |h, v| fnv1a(h, v.to_bits()))
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTape)> {
        ensure_same_dim(self.input_dim(), x.len(), "encoder input")?;
        let fingerprint = self.fingerprint();
        match self {
            Encoder::Identity { .. } => Ok((
                x.to_vec(),
                ForwardTape {
                    fingerprint,
                    activations: vec![x.to_vec()],
                    pre_activations: Vec::new(),
                },
            )),
            Encoder::Mlp(m) => {
                let layers = m.num_layers();
                let mut activations = Vec::with_capacity(layers + 1);
                let mut pre_activations = Vec::with_capacity(layers);
                activations.push(x.to_vec());
                for l in 0..layers {
                    let input = &activations[l];
                    let fan_in = m.layer_dims[l];
                    let pre: Vec<f64> = m.weights[l]
                        .chunks_exact(fan_in)
                        .zip(&m.biases[l])
                        .map(|(row, b)| b + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>())
                        .collect();
                    let out = if l + 1 < layers {
                        pre.iter().map(|&p| m.activation.apply(p)).collect()
                    } else {
                        pre.clone()
                    };
                    pre_activations.push(pre);
                    activations.push(out);
                }
                let embedding = activations[layers].clone();
                Ok((
                    embedding,
                    ForwardTape {
                        fingerprint,
                        activations,
                        pre_activations,
                    },
                ))
            }
        }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(e, _)| e)
    }

    /// Gradient of `grad_out · f(x)` with respect to the parameters and `x`,
    /// for the `x` recorded on `tape`.
    pub fn backward(&self, tape: &ForwardTape, grad_out: &[f64]) -> Result<EncoderGrads> {
        ensure_same_dim(self.output_dim(), grad_out.len(), "encoder output gradient")?;
        if tape.fingerprint != self.fingerprint() {
            return Err(contract("forward tape was recorded with different encoder parameters"));
        }
        match self {
            Encoder::Identity { .. } => Ok(EncoderGrads {
                weights: Vec::new(),
                biases: Vec::new(),
                input_grad: grad_out.to_vec(),
            }),
            Encoder::Mlp(m) => {
                let layers = m.num_layers();
                let mut weights = vec![Vec::new(); layers];
                let mut biases = vec![Vec::new(); layers];
                let mut delta = grad_out.to_vec();
                for l in (0..layers).rev() {
                    if l + 1 < layers {
                        for (d, &pre) in delta.iter_mut().zip(&tape.pre_activations[l]) {
                            *d *= m.activation.derivative(pre);
                        }
                    }
                    let input = &tape.activations[l];
                    let fan_in = m.layer_dims[l];
                    let mut dw = Vec::with_capacity(delta.len() * fan_in);
                    for &d in &delta {
                        dw.extend(input.iter().map(|a| d * a));
                    }
                    let mut prev = vec![0.0; fan_in];
                    for (row, &d) in m.weights[l].chunks_exact(fan_in).zip(&delta) {
                        prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
                    }
                    weights[l] = dw;
                    biases[l] = std::mem::replace(&mut delta, prev);
                }
                Ok(EncoderGrads {
                    weights,
                    biases,
                    input_grad: delta,
                })
            }
        }
    }

    /// All-zero gradients shaped like this encoder.
    pub fn zero_grads(&self) -> EncoderGrads {
        match self {
            Encoder::Identity { dim } => EncoderGrads {
                weights: Vec::new(),
                biases: Vec::new(),
                input_grad: vec![0.0; *dim],
            },
            Encoder::Mlp(m) => EncoderGrads {
                weights: m.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
                biases: m.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
                input_grad: vec![0.0; m.layer_dims[0]],
            },
        }
    }

    /// Parameters flattened layer by layer (weights, then biases).
    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Encoder::Identity { .. } => Vec::new(),
            Encoder::Mlp(m) => m
                .weights
                .iter()
                .zip(&m.biases)
                .flat_map(|(w, b)| w.iter().chain(b).copied())
                .collect(),
        }
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure_same_dim(self.param_count(), flat.len(), "flat parameter vector")?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(contract("encoder parameters must be finite"));
        }
        if let Encoder::Mlp(m) = self {
            let mut rest = flat;
            for (w, b) in m.weights.iter_mut().zip(m.biases.iter_mut()) {
                let (head, tail) = rest.split_at(w.len());
                w.copy_from_slice(head);
                let (head, tail) = tail.split_at(b.len());
                b.copy_from_slice(head);
                rest = tail;
            }
        }
        Ok(())
    }
}
