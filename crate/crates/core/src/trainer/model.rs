//! Small convolutional regressor with hand-written backpropagation.
//!
//! Input per pixel is the latent, the 21 condition channels, the mask,
//! sinusoidal step features and the prompt embedding (both broadcast over
//! the image). Hidden layers are 3×3 "same" convolutions with tanh; the
//! last layer is linear and outputs three channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbuffer::CONDITION_CHANNELS;
use crate::image::Image;

pub const TIME_FEATURES: usize = 4;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels of each hidden layer.
    pub width: usize,
    /// Number of convolution layers; 1 gives a single linear layer.
    pub depth: usize,
    pub latent_channels: usize,
    pub prompt_dim: usize,
    /// Start the output layer at zero so the initial prediction is 0.
    pub zero_init_head: bool,
    /// Indices of layers excluded from training.
    pub frozen: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            depth: 3,
            latent_channels: 3,
            prompt_dim: 8,
            zero_init_head: false,
            frozen: Vec::new(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn input_channels(&self) -> usize {
        self.latent_channels + CONDITION_CHANNELS + 1 + TIME_FEATURES + self.prompt_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Config(
                "model depth and width must be positive".into(),
            ));
        }
        if let Some(&l) = self.frozen.iter().find(|&&l| l >= self.depth) {
            return Err(Error::Config(format!("frozen layer {l} out of range")));
        }
        Ok(())
    }
}

/// One 3×3 convolution: `weights[((o * cin + i) * 3 + ky) * 3 + kx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng, zero: bool) -> Self {
        let n = cout * cin * KERNEL * KERNEL;
        let scale = (1.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
        let weights = if zero {
            vec![0.0; n]
        } else {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect()
        };
        Self {
            cin,
            cout,
            weights,
            bias: vec![0.0; cout],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.cin + i) * KERNEL + ky) * KERNEL + kx
    }

    /// Zero-padded 3×3 convolution of an HWC buffer.
    fn forward(&self, input: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; w * h * self.cout];
        for y in 0..h {
            for x in 0..w {
                let o_base = (y * w + x) * self.cout;
                out[o_base..o_base + self.cout].copy_from_slice(&self.bias);
                for ky in 0..KERNEL {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        let i_base = (sy * w + sx) * self.cin;
                        let px = &input[i_base..i_base + self.cin];
                        for o in 0..self.cout {
                            let mut acc = 0.0;
                            for (i, v) in px.iter().enumerate() {
                                acc += self.weights[self.widx(o, i, ky, kx)] * v;
                            }
                            out[o_base + o] += acc;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        w: usize,
        h: usize,
        grads: &mut LayerGrads,
    ) -> Vec<f64> {
        let mut grad_in = vec![0.0; input.len()];
        for y in 0..h {
            for x in 0..w {
                let o_base = (y * w + x) * self.cout;
                let g = &grad_out[o_base..o_base + self.cout];
                for (o, gv) in g.iter().enumerate() {
                    grads.bias[o] += gv;
                }
                for ky in 0..KERNEL {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        let i_base = (sy * w + sx) * self.cin;
                        for (o, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..self.cin {
                                let wi = self.widx(o, i, ky, kx);
                                grads.weights[wi] += gv * input[i_base + i];
                                grad_in[i_base + i] += gv * self.weights[wi];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of every layer, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    fn zeros_like(model: &ToyModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Everything the model sees for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<'a> {
    pub latent: &'a Image,
    pub condition: &'a Image,
    pub mask: &'a Image,
    pub step: usize,
    pub prompt: &'a [f64],
}

pub fn time_features(step: usize) -> [f64; TIME_FEATURES] {
    let t = step as f64;
    [t.sin(), t.cos(), (0.1 * t).sin(), (0.1 * t).cos()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub layers: Vec<ConvLayer>,
}

struct Trace {
    /// Input of each layer; the last entry is the prediction.
    activations: Vec<Vec<f64>>,
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.depth);
        let mut cin = config.input_channels();
        for l in 0..config.depth {
            let last = l + 1 == config.depth;
            let cout = if last { 3 } else { config.width };
            layers.push(ConvLayer::new(
                cin,
                cout,
                &mut rng,
                last && config.zero_init_head,
            ));
            cin = cout;
        }
        Ok(Self { config, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.config.frozen.contains(&layer)
    }

    /// Flat index ranges `(layer, start, end)` of trainable parameters.
    pub fn trainable_ranges(&self) -> Vec<(usize, usize, usize)> {
        let mut start = 0;
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let end = start + layer.param_count();
            if !self.is_frozen(l) {
                out.push((l, start, end));
            }
            start = end;
        }
        out
    }

    pub fn get_param(&self, flat: usize) -> f64 {
        let (l, off) = self.locate(flat);
        let layer = &self.layers[l];
        if off < layer.weights.len() {
            layer.weights[off]
        } else {
            layer.bias[off - layer.weights.len()]
        }
    }

    pub fn set_param(&mut self, flat: usize, v: f64) {
        let (l, off) = self.locate(flat);
        let layer = &mut self.layers[l];
        if off < layer.weights.len() {
            layer.weights[off] = v;
        } else {
            let n = layer.weights.len();
            layer.bias[off - n] = v;
        }
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if flat < layer.param_count() {
                return (l, flat);
            }
            flat -= layer.param_count();
        }
        panic!("parameter index out of range");
    }

    fn assemble(&self, input: &ModelInput<'_>) -> Result<(Vec<f64>, usize, usize)> {
        let (w, h) = input.latent.dims();
        let c = &self.config;
        if input.latent.channels() != c.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, model expects {}",
                input.latent.channels(),
                c.latent_channels
            )));
        }
        if input.condition.dims() != (w, h) || input.condition.channels() != CONDITION_CHANNELS {
            return Err(Error::Shape("condition does not match latent grid".into()));
        }
        if input.mask.dims() != (w, h) || input.mask.channels() != 1 {
            return Err(Error::Shape(
                "mask must be single-channel on the latent grid".into(),
            ));
        }
        if input.prompt.len() != c.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt embedding has {} values, model expects {}",
                input.prompt.len(),
                c.prompt_dim
            )));
        }
        let time = time_features(input.step);
        let cin = c.input_channels();
        let mut buf = Vec::with_capacity(w * h * cin);
        for p in 0..w * h {
            buf.extend_from_slice(
                &input.latent.data()[p * c.latent_channels..(p + 1) * c.latent_channels],
            );
            buf.extend_from_slice(
                &input.condition.data()[p * CONDITION_CHANNELS..(p + 1) * CONDITION_CHANNELS],
            );
            buf.push(input.mask.data()[p]);
            buf.extend_from_slice(&time);
            buf.extend_from_slice(input.prompt);
        }
        Ok((buf, w, h))
    }

    fn trace(&self, input: &ModelInput<'_>) -> Result<(Trace, usize, usize)> {
        let (x, w, h) = self.assemble(input)?;
        let mut activations = vec![x];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(activations.last().expect("non-empty"), w, h);
            if l + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(y);
        }
        Ok((Trace { activations }, w, h))
    }

    pub fn forward(&self, input: &ModelInput<'_>) -> Result<Image> {
        let (trace, w, h) = self.trace(input)?;
        Image::from_vec(
            w,
            h,
            3,
            trace.activations.into_iter().last().expect("output"),
        )
    }

    /// Prediction and parameter gradients given `dL/dprediction`.
    pub fn backward(
        &self,
        input: &ModelInput<'_>,
        grad_fn: impl FnOnce(&Image) -> Result<Image>,
    ) -> Result<(Image, Gradients)> {
        let (trace, w, h) = self.trace(input)?;
        let pred = Image::from_vec(w, h, 3, trace.activations.last().expect("output").clone())?;
        let mut grad = grad_fn(&pred)?.into_data();
        let mut grads = Gradients::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                // Output of layer l went through tanh: d tanh = 1 − y².
                for (g, y) in grad.iter_mut().zip(&trace.activations[l + 1]) {
                    *g *= 1.0 - y * y;
                }
            }
            grad =
                self.layers[l].backward(&trace.activations[l], &grad, w, h, &mut grads.layers[l]);
        }
        for l in 0..self.layers.len() {
            if self.is_frozen(l) {
                grads.layers[l].weights.fill(0.0);
                grads.layers[l].bias.fill(0.0);
            }
        }
        Ok((pred, grads))
    }
}
