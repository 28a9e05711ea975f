//! The encoder-decoder segmentation network.
//!
//! Encoder: five VGG-style blocks of 3×3 convolutions (each followed by
//! ReLU) and a 2×2 max pool. Decoder: a stride-2 transposed convolution,
//! concatenation with the fourth pooling output, a 3×3 convolution, a second
//! stride-2 transposed convolution, concatenation with the third pooling
//! output, another 3×3 convolution, a stride-8 transposed convolution back to
//! the input resolution, and a final 3×3 convolution producing two-class
//! logits for the softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, RasterImage};

use super::ops::{
    concat_channels, conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_inplace, softmax_channels,
    softmax_xent, split_channels, BACKGROUND_CLASS,
};
use super::tensor::Tensor;

const BLOCKS: usize = 5;
/// Side reduction between the input and the deepest decoder skip (pool 3).
const SKIP_REDUCTION: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub convs_per_block: Vec<usize>,
    /// Output channels of the two stride-2 decoder stages.
    pub decoder_channels: Vec<usize>,
    pub final_upsample_stride: usize,
    pub final_upsample_kernel: usize,
    pub num_classes: usize,
}

impl NetworkConfig {
    /// VGG-16 encoder at 224×224.
    pub fn vgg16(input_channels: usize) -> Self {
        Self {
            input_side: 224,
            input_channels,
            encoder_channels: vec![64, 128, 256, 512, 512],
            convs_per_block: vec![2, 2, 3, 3, 3],
            decoder_channels: vec![256, 128],
            final_upsample_stride: 8,
            final_upsample_kernel: 8,
            num_classes: 2,
        }
    }

    /// Same topology at 64×64 with one narrow convolution per block.
    pub fn toy(input_channels: usize) -> Self {
        Self {
            input_side: 64,
            input_channels,
            encoder_channels: vec![8, 16, 32, 64, 64],
            convs_per_block: vec![1, 1, 1, 1, 1],
            decoder_channels: vec![32, 16],
            final_upsample_stride: 8,
            final_upsample_kernel: 8,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !matches!(self.input_channels, 1 | 3 | 4) {
            return bad(format!("unsupported input channel count {}", self.input_channels));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(1 << BLOCKS) {
            return bad(format!(
                "input side {} must be a positive multiple of {}",
                self.input_side,
                1 << BLOCKS
            ));
        }
        if self.encoder_channels.len() != BLOCKS || self.convs_per_block.len() != BLOCKS {
            return bad(format!("the encoder has exactly {BLOCKS} blocks"));
        }
        if self.encoder_channels.contains(&0) || self.convs_per_block.contains(&0) {
            return bad("encoder blocks need at least one channel and one convolution".into());
        }
        if self.decoder_channels.len() != 2 || self.decoder_channels.contains(&0) {
            return bad("the decoder has two non-empty upsampling stages".into());
        }
        if self.final_upsample_stride * (self.input_side / SKIP_REDUCTION) != self.input_side {
            return bad(format!(
                "final upsampling stride {} does not restore the {} side from {}",
                self.final_upsample_stride,
                self.input_side,
                self.input_side / SKIP_REDUCTION
            ));
        }
        let (k, s) = (self.final_upsample_kernel, self.final_upsample_stride);
        if k < s || (k - s) % 2 != 0 {
            return bad(format!(
                "final kernel {k} must be at least the stride {s} with an even surplus"
            ));
        }
        if self.num_classes != 2 {
            return bad("only object/background segmentation is supported".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// Same-padded 3×3 convolution; weights at `param`, bias at `param + 1`.
    Conv { param: usize, relu: bool },
    Pool,
    Deconv { param: usize, stride: usize, pad: usize },
    /// Remembers the current map for a later concatenation.
    Save(usize),
    /// Appends the remembered map's channels to the current map.
    Concat(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub final_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    config: NetworkConfig,
    params: Vec<Param>,
    steps: Vec<Step>,
    labels: Vec<String>,
    pub meta: TrainingMeta,
}

/// Activations kept from a training forward pass.
struct ForwardCache {
    /// `acts[i]` is the input of step `i`; the last entry is the logits.
    acts: Vec<Tensor>,
    argmax: Vec<Vec<usize>>,
}

/// Parameter gradients aligned with [`NetworkModel::params`].
pub type Gradients = Vec<Vec<f64>>;

struct Layout {
    steps: Vec<Step>,
    labels: Vec<String>,
    /// `(name, shape, fan_in, fan_out)`; fans are zero for biases.
    params: Vec<(String, Vec<usize>, usize, usize)>,
}

fn layout(config: &NetworkConfig) -> Layout {
    let mut steps = Vec::new();
    let mut labels = Vec::new();
    let mut params = Vec::new();
    let conv = |name: String,
                    in_c: usize,
                    out_c: usize,
                    k: usize,
                    transposed: bool,
                    params: &mut Vec<(String, Vec<usize>, usize, usize)>| {
        let idx = params.len();
        let shape = if transposed {
            vec![in_c, out_c, k, k]
        } else {
            vec![out_c, in_c, k, k]
        };
        params.push((format!("{name}.weight"), shape, in_c * k * k, out_c * k * k));
        params.push((format!("{name}.bias"), vec![out_c], 0, 0));
        idx
    };

    let mut channels = config.input_channels;
    let mut pooled = Vec::with_capacity(BLOCKS);
    for block in 0..BLOCKS {
        let out_c = config.encoder_channels[block];
        for i in 0..config.convs_per_block[block] {
            let name = format!("enc{}_{}", block + 1, i + 1);
            let param = conv(name.clone(), channels, out_c, 3, false, &mut params);
            steps.push(Step::Conv { param, relu: true });
            labels.push(name);
            channels = out_c;
        }
        steps.push(Step::Pool);
        labels.push(format!("pool{}", block + 1));
        pooled.push(channels);
        if block == 2 || block == 3 {
            steps.push(Step::Save(block - 2));
            labels.push(format!("pool{}", block + 1));
        }
    }

    // two stride-2 stages, each fused with a pooled encoder map
    for (stage, slot) in [(0usize, 1usize), (1, 0)] {
        let out_c = config.decoder_channels[stage];
        let n = stage + 1;
        let param = conv(format!("up{n}"), channels, out_c, 4, true, &mut params);
        steps.push(Step::Deconv {
            param,
            stride: 2,
            pad: 1,
        });
        labels.push(format!("up{n}"));
        steps.push(Step::Concat(slot));
        labels.push(format!("cat{n}"));
        let skip_c = pooled[slot + 2];
        let param = conv(format!("dec{n}"), out_c + skip_c, out_c, 3, false, &mut params);
        steps.push(Step::Conv { param, relu: true });
        labels.push(format!("dec{n}"));
        channels = out_c;
    }

    let (k, s) = (config.final_upsample_kernel, config.final_upsample_stride);
    let classes = config.num_classes;
    let param = conv("up3".into(), channels, classes, k, true, &mut params);
    steps.push(Step::Deconv {
        param,
        stride: s,
        pad: (k - s) / 2,
    });
    labels.push("up3".into());
    let param = conv("final".into(), classes, classes, 3, false, &mut params);
    steps.push(Step::Conv { param, relu: false });
    labels.push("logits".into());

    Layout {
        steps,
        labels,
        params,
    }
}

/// Centers 8-bit samples on zero (`v - 127.5`, no rescaling) in `[C, H, W]` order.
pub fn image_to_tensor(img: &RasterImage) -> Tensor {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut values = vec![0.0; c * h * w];
    for (i, px) in img.data().chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            values[ch * h * w + i] = v as f64 - 127.5;
        }
    }
    Tensor::from_vec(&[c, h, w], values).expect("sized by construction")
}

impl NetworkModel {
    /// Builds the network with He-uniform weights, zero biases and a zero
    /// scoring layer, so every pixel starts at even odds.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let Layout {
            steps,
            labels,
            params: specs,
        } = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, shape, fan_in, _)| {
                let mut value = Tensor::zeros(&shape);
                if fan_in > 0 && name != "final.weight" {
                    let limit = (6.0 / fan_in as f64).sqrt();
                    value
                        .values_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.gen_range(-limit..limit));
                }
                Param { name, value }
            })
            .collect();
        Ok(Self {
            config,
            params,
            steps,
            labels,
            meta: TrainingMeta::default(),
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(config: NetworkConfig, params: Vec<Param>, meta: TrainingMeta) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::CorruptModel(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::CorruptModel(format!(
                    "parameter `{}` {:?} does not fit `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            *slot = p;
        }
        model.meta = meta;
        Ok(model)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_side, c.input_side];
        if x.shape() != expected {
            return Err(Error::ShapeMismatch(format!(
                "network expects input {:?}, got {:?}",
                expected,
                x.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, x: Tensor, mut cache: Option<&mut ForwardCache>, mut trace: Option<&mut Vec<(String, Vec<usize>)>>) -> Result<Tensor> {
        self.check_input(&x)?;
        let mut saved: [Option<Tensor>; 2] = [None, None];
        let mut cur = x;
        for (i, step) in self.steps.iter().enumerate() {
            let mut argmax = Vec::new();
            let next = match *step {
                Step::Conv { param, relu } => {
                    let mut y = conv2d_forward(
                        &cur,
                        &self.params[param].value,
                        Some(&self.params[param + 1].value),
                        1,
                    )?;
                    if relu {
                        relu_inplace(&mut y);
                    }
                    y
                }
                Step::Pool => {
                    let out = maxpool2x2_forward(&cur)?;
                    argmax = out.argmax;
                    out.output
                }
                Step::Deconv { param, stride, pad } => deconv2d_forward(
                    &cur,
                    &self.params[param].value,
                    Some(&self.params[param + 1].value),
                    stride,
                    pad,
                )?,
                Step::Save(slot) => {
                    saved[slot] = Some(cur.clone());
                    cur.clone()
                }
                Step::Concat(slot) => {
                    let skip = saved[slot].as_ref().expect("saved before use");
                    concat_channels(&cur, skip)?
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                if !matches!(step, Step::Save(_)) {
                    t.push((self.labels[i].clone(), next.shape().to_vec()));
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.acts.push(std::mem::replace(&mut cur, next));
                c.argmax.push(argmax);
            } else {
                cur = next;
            }
        }
        Ok(cur)
    }

    /// Raw two-channel logits for one `[C, side, side]` input.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x.clone(), None, None)
    }

    /// Per-pixel class probabilities (channel 0 object, channel 1 background).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        softmax_channels(&self.logits(x)?)
    }

    /// Output shapes of every layer, labelled, in execution order.
    pub fn shape_trace(&self, x: &Tensor) -> Result<Vec<(String, Vec<usize>)>> {
        let mut trace = Vec::new();
        self.run(x.clone(), None, Some(&mut trace))?;
        Ok(trace)
    }

    /// Background-probability tile for one image patch.
    pub fn predict_patch(&self, patch: &RasterImage) -> Result<Vec<f64>> {
        let side = self.config.input_side;
        if patch.width() != side || patch.height() != side {
            return Err(Error::ShapeMismatch(format!(
                "patch is {}×{}, network expects {side}×{side}",
                patch.width(),
                patch.height()
            )));
        }
        if patch.channels() != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "patch has {} channels, network expects {}",
                patch.channels(),
                self.config.input_channels
            )));
        }
        let probs = self.forward(&image_to_tensor(patch))?;
        let plane = side * side;
        Ok(probs.values()[BACKGROUND_CLASS * plane..(BACKGROUND_CLASS + 1) * plane].to_vec())
    }

    /// Mean pixel cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        x: &Tensor,
        target: &BinaryMask,
        object_weight: f64,
    ) -> Result<(f64, Gradients)> {
        let mut cache = ForwardCache {
            acts: Vec::with_capacity(self.steps.len() + 1),
            argmax: Vec::with_capacity(self.steps.len()),
        };
        let logits = self.run(x.clone(), Some(&mut cache), None)?;
        let xent = softmax_xent(&logits, target, object_weight)?;
        cache.acts.push(logits);
        let grads = self.backward(&cache, xent.grad)?;
        Ok((xent.loss, grads))
    }

    /// Mean cross-entropy only (no gradient), used by finite-difference checks.
    pub fn loss(&self, x: &Tensor, target: &BinaryMask, object_weight: f64) -> Result<f64> {
        Ok(softmax_xent(&self.logits(x)?, target, object_weight)?.loss)
    }

    fn backward(&self, cache: &ForwardCache, mut g: Tensor) -> Result<Gradients> {
        let mut grads: Gradients = self.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut skip_grads: [Option<Tensor>; 2] = [None, None];
        let acts = &cache.acts;
        for (i, step) in self.steps.iter().enumerate().rev() {
            g = match *step {
                Step::Conv { param, relu } => {
                    if relu {
                        relu_backward(&acts[i + 1], &mut g);
                    }
                    let lg = conv2d_backward(&acts[i], &self.params[param].value, 1, &g)?;
                    grads[param] = lg.weight.into_values();
                    grads[param + 1] = lg.bias.into_values();
                    lg.input
                }
                Step::Pool => maxpool2x2_backward(acts[i].shape(), &cache.argmax[i], &g)?,
                Step::Deconv { param, stride, pad } => {
                    let lg = deconv2d_backward(&acts[i], &self.params[param].value, stride, pad, &g)?;
                    grads[param] = lg.weight.into_values();
                    grads[param + 1] = lg.bias.into_values();
                    lg.input
                }
                Step::Concat(slot) => {
                    let (main, skip) = split_channels(&g, acts[i].chw()?.0)?;
                    skip_grads[slot] = Some(skip);
                    main
                }
                Step::Save(slot) => {
                    let skip = skip_grads[slot].take().expect("concat visited first");
                    for (a, b) in g.values_mut().iter_mut().zip(skip.values()) {
                        *a += b;
                    }
                    g
                }
            };
        }
        Ok(grads)
    }
}
