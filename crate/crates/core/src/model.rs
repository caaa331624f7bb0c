//! Generator (1-D U-Net) and conditional critic.
//!
//! Generator: three 1x1 conditioning projections, then five stride-2 ReLU
//! convolutions down, then five stages of `upsample x2 -> concat skip -> conv`
//! back up. Decoder stage `k` (1-based) receives encoder activation `5 - k`
//! as its skip, where activation 0 is the projected conditioning itself. The
//! last stage emits the 64 feature channels through `tanh`.
//!
//! Critic: the feature block concatenated with the annotation channels, five
//! stride-2 LeakyReLU convolutions, and a linear head producing one
//! unbounded score per block.

use rand::Rng;

use crate::conditioning::{
    project_on_tape, projection_layers, ConditioningBatch, ConditioningBlock, ConditioningSpec,
};
use crate::config::{validate_block_size, TrainingConfig, DEPTH, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, ConvLayerSpec, LayerKind, NetworkParams, ParamBinding, Tape, Tensor, Var,
};

/// A `64 x N` block of (normalised) vocoder features.
pub type FeatureBlock = Tensor;

const KERNEL: usize = 3;

/// Everything that fixes the shapes of both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: TrainingConfig,
    pub conditioning: ConditioningSpec,
}

impl Architecture {
    pub fn new(config: TrainingConfig, conditioning: ConditioningSpec) -> Result<Self> {
        config.validate()?;
        conditioning.validate()?;
        Ok(Self {
            config,
            conditioning,
        })
    }

    pub fn block_size(&self) -> usize {
        self.config.block_size
    }

    fn conv(inputs: usize, outputs: usize, stride: usize, activation: Activation) -> LayerKind {
        LayerKind::Conv(ConvLayerSpec {
            in_channels: inputs,
            out_channels: outputs,
            kernel_size: KERNEL,
            stride,
            activation,
        })
    }

    /// Generator layers in parameter order.
    pub fn generator_layers(&self) -> Vec<(String, LayerKind)> {
        let widths = self.config.encoder_widths();
        let input = self.config.conditioning_channels();
        let mut layers = projection_layers(&self.config, &self.conditioning);
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push((format!("enc{}", i + 1), Self::conv(prev, w, 2, Activation::Relu)));
            prev = w;
        }
        // skip sources for decoder stages 1..=5: e4, e3, e2, e1, input
        let skips = [widths[3], widths[2], widths[1], widths[0], input];
        let outs = [widths[3], widths[2], widths[1], widths[0], FEATURE_CHANNELS];
        for stage in 0..DEPTH {
            let act = if stage + 1 == DEPTH {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            layers.push((
                format!("dec{}", stage + 1),
                Self::conv(prev + skips[stage], outs[stage], 1, act),
            ));
            prev = outs[stage];
        }
        layers
    }

    /// Critic layers in parameter order.
    pub fn critic_layers(&self) -> Vec<(String, LayerKind)> {
        let widths = self.config.encoder_widths();
        let slope = self.config.leaky_slope;
        let mut prev = FEATURE_CHANNELS + self.conditioning.raw_channels();
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            layers.push((
                format!("critic{}", i + 1),
                Self::conv(prev, w, 2, Activation::LeakyRelu(slope)),
            ));
            prev = w;
        }
        let bottleneck = self.block_size() >> DEPTH;
        layers.push((
            "critic_head".to_string(),
            LayerKind::Linear {
                inputs: prev * bottleneck,
                outputs: 1,
            },
        ));
        layers
    }
}

fn conv_spec(params: &NetworkParams, idx: usize) -> ConvLayerSpec {
    match params.layers[idx].kind {
        LayerKind::Conv(spec) => spec,
        LayerKind::Linear { .. } => unreachable!("layer {idx} is built as a convolution"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub arch: Architecture,
    pub params: NetworkParams,
}

impl Generator {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let params = NetworkParams::init(rng, &arch.generator_layers());
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: NetworkParams) -> Result<Self> {
        let expected = arch.generator_layers();
        check_layout(&params, &expected, "generator")?;
        Ok(Self { arch, params })
    }

    /// Index of the first U-Net layer (after the three projections).
    fn first_encoder(&self) -> usize {
        3
    }

    /// U-Net forward on a `[B, C_cond, N]` tape node. `ablate_skip` zeroes the
    /// skip fed into decoder stage `k` (1-based) for wiring checks.
    pub fn unet_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        input: Var,
        ablate_skip: Option<usize>,
    ) -> Result<Var> {
        let frames = tape.shape(input)[2];
        if frames != self.arch.block_size() {
            return Err(Error::Dimension {
                context: "generator",
                axis: "frames",
                expected: self.arch.block_size(),
                actual: frames,
            });
        }
        let base = self.first_encoder();
        let mut activations = vec![input];
        let mut h = input;
        for i in 0..DEPTH {
            let (w, b) = binding.layer(base + i);
            h = tape.conv1d(h, w, b, &conv_spec(&self.params, base + i))?;
            activations.push(h);
        }
        for stage in 0..DEPTH {
            let up = tape.upsample(h, 2)?;
            let mut skip = activations[DEPTH - 1 - stage];
            if ablate_skip == Some(stage + 1) {
                let zeros = Tensor::zeros(tape.shape(skip));
                skip = tape.constant(&zeros);
            }
            let merged = tape.concat_channels(&[up, skip])?;
            let idx = base + DEPTH + stage;
            let (w, b) = binding.layer(idx);
            h = tape.conv1d(merged, w, b, &conv_spec(&self.params, idx))?;
        }
        Ok(h)
    }

    /// Full path from raw conditioning (projections included) to `[B, 64, N]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        batch: &ConditioningBatch,
    ) -> Result<Var> {
        let projected = project_on_tape(tape, &self.params, binding, batch)?;
        self.unet_on_tape(tape, binding, projected.concatenated, None)
    }

    /// Runs the generator on an assembled conditioning block.
    pub fn forward(&self, cond: &ConditioningBlock) -> Result<FeatureBlock> {
        self.forward_with_ablation(cond, None)
    }

    pub fn forward_with_ablation(
        &self,
        cond: &ConditioningBlock,
        ablate_skip: Option<usize>,
    ) -> Result<FeatureBlock> {
        let (c, n) = (cond.concatenated.shape()[0], cond.concatenated.shape()[1]);
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let input = tape.constant(&cond.concatenated.reshaped(&[1, c, n])?);
        let out = self.unet_on_tape(&mut tape, &binding, input, ablate_skip)?;
        Tensor::new(&[FEATURE_CHANNELS, n], tape.value(out).to_vec())
    }

    /// Batched inference from raw conditioning, returning `B` blocks of `64 x N`.
    pub fn forward_batch(&self, batch: &ConditioningBatch) -> Result<Vec<FeatureBlock>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &binding, batch)?;
        let n = batch.frames();
        tape.value(out)
            .chunks(FEATURE_CHANNELS * n)
            .map(|c| Tensor::new(&[FEATURE_CHANNELS, n], c.to_vec()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub arch: Architecture,
    pub params: NetworkParams,
}

impl Critic {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let params = NetworkParams::init(rng, &arch.critic_layers());
        Self { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = NetworkParams::zeros(&arch.critic_layers());
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: NetworkParams) -> Result<Self> {
        let expected = arch.critic_layers();
        check_layout(&params, &expected, "critic")?;
        Ok(Self { arch, params })
    }

    /// Scores `[B, 64, N]` features against `[B, P + 2 + S, N]` annotations;
    /// returns a `[B, 1]` node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        features: Var,
        annotations: Var,
    ) -> Result<Var> {
        let fs = tape.shape(features).to_vec();
        let cs = tape.shape(annotations).to_vec();
        if fs[2] != cs[2] {
            return Err(Error::Dimension {
                context: "critic",
                axis: "frames",
                expected: fs[2],
                actual: cs[2],
            });
        }
        if fs[2] != self.arch.block_size() {
            return Err(Error::Dimension {
                context: "critic",
                axis: "frames",
                expected: self.arch.block_size(),
                actual: fs[2],
            });
        }
        let mut h = tape.concat_channels(&[features, annotations])?;
        for i in 0..DEPTH {
            let (w, b) = binding.layer(i);
            h = tape.conv1d(h, w, b, &conv_spec(&self.params, i))?;
        }
        let batch = fs[0];
        let flat_len = tape.value(h).len() / batch;
        let flat = tape.reshape(h, &[batch, flat_len])?;
        let (w, b) = binding.layer(DEPTH);
        tape.linear(flat, w, b)
    }

    /// One score per block. `features` is `[64, N]` or `[B, 64, N]`;
    /// `annotations` has the matching layout.
    pub fn forward(&self, features: &Tensor, annotations: &Tensor) -> Result<Vec<f64>> {
        let to3 = |t: &Tensor| -> Result<Tensor> {
            match t.shape() {
                [c, n] => t.reshaped(&[1, *c, *n]),
                [_, _, _] => Ok(t.clone()),
                s => Err(Error::Dimension {
                    context: "critic_forward",
                    axis: "rank",
                    expected: 3,
                    actual: s.len(),
                }),
            }
        };
        let (f, a) = (to3(features)?, to3(annotations)?);
        if f.shape()[0] != a.shape()[0] {
            return Err(Error::Dimension {
                context: "critic_forward",
                axis: "batch",
                expected: f.shape()[0],
                actual: a.shape()[0],
            });
        }
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let fv = tape.constant(&f);
        let av = tape.constant(&a);
        let out = self.forward_on_tape(&mut tape, &binding, fv, av)?;
        Ok(tape.value(out).to_vec())
    }

    /// Scores a generated or real block against an assembled conditioning block.
    pub fn score(&self, block: &FeatureBlock, cond: &ConditioningBlock) -> Result<f64> {
        Ok(self.forward(block, &cond.raw.annotation_stack())?[0])
    }
}

fn check_layout(params: &NetworkParams, expected: &[(String, LayerKind)], what: &str) -> Result<()> {
    if params.layers.len() != expected.len() {
        return Err(Error::Contract(format!(
            "{what} expects {} layers, found {}",
            expected.len(),
            params.layers.len()
        )));
    }
    for (layer, (name, kind)) in params.layers.iter().zip(expected) {
        if &layer.name != name || &layer.kind != kind {
            return Err(Error::Contract(format!(
                "{what} layer `{}` does not match the architecture (expected `{name}`)",
                layer.name
            )));
        }
        if layer.weight.shape() != kind.weight_shape().as_slice() || layer.bias.len() != kind.bias_len() {
            return Err(Error::Contract(format!("{what} layer `{name}` has wrong tensor shapes")));
        }
    }
    Ok(())
}

/// Builds an architecture, rejecting block sizes the U-Net cannot preserve.
pub fn architecture(config: &TrainingConfig, conditioning: ConditioningSpec) -> Result<Architecture> {
    validate_block_size(config.block_size)?;
    Architecture::new(config.clone(), conditioning)
}
