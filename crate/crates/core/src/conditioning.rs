//! Generator input assembly: frame-wise phoneme one-hot, normalised log-f0
//! with an unvoiced flag, broadcast singer one-hot, and uniform noise. The
//! three annotation streams each pass through a learned 1x1 projection before
//! being stacked with the noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, ConvLayerSpec, LayerKind, NetworkParams, ParamBinding, Tape, Tensor, Var};

pub const PROJ_PHONEME: &str = "proj_phoneme";
pub const PROJ_F0: &str = "proj_f0";
pub const PROJ_SINGER: &str = "proj_singer";

/// Normalised log-f0 plus the unvoiced flag.
pub const F0_INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAnnotations {
    pub phoneme_ids: Vec<usize>,
    pub f0_hz: Vec<f64>,
    pub singer_id: usize,
    pub frame_hop_ms: f64,
}

impl FrameAnnotations {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }

    /// Shifts every voiced frame by `semitones`, clamping into `[f0_min, f0_max]`.
    pub fn transposed(&self, semitones: f64, f0_min: f64, f0_max: f64) -> Self {
        let ratio = 2f64.powf(semitones / 12.0);
        let f0_hz = self
            .f0_hz
            .iter()
            .map(|&f| if f > 0.0 { (f * ratio).clamp(f0_min, f0_max) } else { 0.0 })
            .collect();
        Self {
            f0_hz,
            ..self.clone()
        }
    }

    /// Repeats the last frame until the track has `frames` frames.
    pub fn padded_to(&self, frames: usize) -> Self {
        let mut out = self.clone();
        if let (Some(&p), Some(&f)) = (self.phoneme_ids.last(), self.f0_hz.last()) {
            out.phoneme_ids.resize(frames.max(self.len()), p);
            out.f0_hz.resize(frames.max(self.len()), f);
        }
        out
    }
}

/// Vocabulary sizes and pitch range the conditioning is built against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditioningSpec {
    pub phonemes: usize,
    pub singers: usize,
    pub f0_min: f64,
    pub f0_max: f64,
}

impl ConditioningSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phonemes == 0 || self.singers == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        if !(self.f0_min > 0.0 && self.f0_max > self.f0_min) {
            return Err(Error::Config(format!(
                "f0 range must satisfy 0 < f0_min < f0_max, got [{}, {}]",
                self.f0_min, self.f0_max
            )));
        }
        Ok(())
    }

    /// Channels of the pre-projection stack without noise.
    pub fn raw_channels(&self) -> usize {
        self.phonemes + F0_INPUT_CHANNELS + self.singers
    }

    pub fn check(&self, ann: &FrameAnnotations) -> Result<()> {
        if ann.phoneme_ids.len() != ann.f0_hz.len() {
            return Err(Error::Dimension {
                context: "FrameAnnotations",
                axis: "frames",
                expected: ann.phoneme_ids.len(),
                actual: ann.f0_hz.len(),
            });
        }
        if ann.singer_id >= self.singers {
            return Err(Error::Vocabulary {
                frame: 0,
                id: ann.singer_id,
                size: self.singers,
            });
        }
        Ok(())
    }
}

/// One-hot `[P, T]` encoding of phoneme ids.
pub fn encode_phonemes(ids: &[usize], vocab: usize) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::DegenerateInput("no phoneme frames".into()));
    }
    let t = ids.len();
    let mut data = vec![0.0; vocab * t];
    for (frame, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Vocabulary { frame, id, size: vocab });
        }
        data[id * t + frame] = 1.0;
    }
    Tensor::new(&[vocab, t], data)
}

/// Singer one-hot replicated over `frames`, shape `[S, frames]`.
pub fn encode_singer(singer: usize, singers: usize, frames: usize) -> Result<Tensor> {
    if singer >= singers {
        return Err(Error::Vocabulary {
            frame: 0,
            id: singer,
            size: singers,
        });
    }
    let mut data = vec![0.0; singers * frames];
    data[singer * frames..(singer + 1) * frames].fill(1.0);
    Tensor::new(&[singers, frames], data)
}

/// Maps voiced f0 onto `[-1, 1]` on a log scale; unvoiced (0 Hz) frames map to -1.
pub fn normalize_f0(f0_hz: &[f64], f0_min: f64, f0_max: f64) -> Result<Tensor> {
    if f0_hz.is_empty() {
        return Err(Error::DegenerateInput("no f0 frames".into()));
    }
    let (lo, hi) = (f0_min.ln(), f0_max.ln());
    let data = f0_hz
        .iter()
        .enumerate()
        .map(|(frame, &f)| {
            if f == 0.0 {
                Ok(-1.0)
            } else if f >= f0_min && f <= f0_max {
                Ok(2.0 * (f.ln() - lo) / (hi - lo) - 1.0)
            } else {
                Err(Error::Range {
                    frame,
                    value: f,
                    min: f0_min,
                    max: f0_max,
                })
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(&[1, f0_hz.len()], data)
}

/// Normalised f0 stacked with the unvoiced flag, shape `[2, T]`.
pub fn f0_features(f0_hz: &[f64], f0_min: f64, f0_max: f64) -> Result<Tensor> {
    let norm = normalize_f0(f0_hz, f0_min, f0_max)?;
    let mut data = norm.into_data();
    data.extend(f0_hz.iter().map(|&f| if f == 0.0 { 1.0 } else { 0.0 }));
    Tensor::new(&[2, f0_hz.len()], data)
}

/// Uniform `[-1, 1]` noise of shape `[channels, frames]` from `seed`.
pub fn uniform_noise(channels: usize, frames: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..channels * frames).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// The pre-projection conditioning stack for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConditioning {
    pub phoneme: Tensor,
    pub f0: Tensor,
    pub singer: Tensor,
    /// Zeros when noise is disabled; a single zero row when there are no noise channels.
    pub noise: Tensor,
}

impl RawConditioning {
    pub fn frames(&self) -> usize {
        self.phoneme.shape()[1]
    }

    /// Annotation channels only (phoneme, f0, singer), shape `[P + 2 + S, N]`.
    pub fn annotation_stack(&self) -> Tensor {
        let mut data = self.phoneme.data().to_vec();
        data.extend_from_slice(self.f0.data());
        data.extend_from_slice(self.singer.data());
        let c = self.phoneme.shape()[0] + self.f0.shape()[0] + self.singer.shape()[0];
        Tensor::new(&[c, self.frames()], data).expect("parts share frame count")
    }
}

/// Builds the raw conditioning for frames `[start, start + frames)`.
pub fn raw_window(
    ann: &FrameAnnotations,
    spec: &ConditioningSpec,
    start: usize,
    frames: usize,
    noise_channels: usize,
    noise_seed: Option<u64>,
) -> Result<RawConditioning> {
    spec.check(ann)?;
    let end = start + frames;
    if frames == 0 || end > ann.len() {
        return Err(Error::Bounds {
            start,
            end,
            len: ann.len(),
        });
    }
    let phoneme = encode_phonemes(&ann.phoneme_ids[start..end], spec.phonemes).map_err(|e| match e {
        Error::Vocabulary { frame, id, size } => Error::Vocabulary {
            frame: frame + start,
            id,
            size,
        },
        other => other,
    })?;
    let f0 = f0_features(&ann.f0_hz[start..end], spec.f0_min, spec.f0_max).map_err(|e| match e {
        Error::Range { frame, value, min, max } => Error::Range {
            frame: frame + start,
            value,
            min,
            max,
        },
        other => other,
    })?;
    let singer = encode_singer(ann.singer_id, spec.singers, frames)?;
    let noise_data = match noise_seed {
        Some(seed) => uniform_noise(noise_channels, frames, seed),
        None => vec![0.0; noise_channels * frames],
    };
    let noise = if noise_channels == 0 {
        Tensor::zeros(&[1, frames])
    } else {
        Tensor::new(&[noise_channels, frames], noise_data)?
    };
    Ok(RawConditioning {
        phoneme,
        f0,
        singer,
        noise,
    })
}

/// Stacks per-window tensors into a `[B, C, N]` batch.
pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::DegenerateInput("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * first.len());
    for p in parts {
        if p.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                context: "stack_batch",
                axis: "shape",
                expected: first.len(),
                actual: p.len(),
            });
        }
        data.extend_from_slice(p.data());
    }
    let mut full = vec![parts.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Layer descriptions of the three 1x1 projections, in generator order.
pub fn projection_layers(cfg: &TrainingConfig, spec: &ConditioningSpec) -> Vec<(String, LayerKind)> {
    let proj = |name: &str, inputs: usize, outputs: usize| {
        (
            name.to_string(),
            LayerKind::Conv(ConvLayerSpec {
                in_channels: inputs,
                out_channels: outputs,
                kernel_size: 1,
                stride: 1,
                activation: Activation::Identity,
            }),
        )
    };
    vec![
        proj(PROJ_PHONEME, spec.phonemes, cfg.phoneme_channels),
        proj(PROJ_F0, F0_INPUT_CHANNELS, cfg.f0_channels),
        proj(PROJ_SINGER, spec.singers, cfg.singer_channels),
    ]
}

/// Batched conditioning ready to be placed on a tape.
#[derive(Clone, Debug)]
pub struct ConditioningBatch {
    pub phoneme: Tensor,
    pub f0: Tensor,
    pub singer: Tensor,
    pub noise: Option<Tensor>,
    /// Annotation channels seen by the critic, `[B, P + 2 + S, N]`.
    pub annotations: Tensor,
}

impl ConditioningBatch {
    pub fn from_windows(windows: &[RawConditioning], with_noise: bool) -> Result<Self> {
        let col = |f: fn(&RawConditioning) -> &Tensor| {
            stack_batch(&windows.iter().map(f).collect::<Vec<_>>())
        };
        let stacks: Vec<Tensor> = windows.iter().map(RawConditioning::annotation_stack).collect();
        Ok(Self {
            phoneme: col(|w| &w.phoneme)?,
            f0: col(|w| &w.f0)?,
            singer: col(|w| &w.singer)?,
            noise: if with_noise { Some(col(|w| &w.noise)?) } else { None },
            annotations: stack_batch(&stacks.iter().collect::<Vec<_>>())?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.phoneme.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.phoneme.shape()[2]
    }
}

/// Projected parts of a conditioning batch on the tape.
pub struct ProjectedVars {
    pub phoneme: Var,
    pub f0: Var,
    pub singer: Var,
    pub noise: Option<Var>,
    pub concatenated: Var,
}

/// Applies the three projections (layers `0..3` of `binding`) and stacks the
/// parts with noise in the order phoneme, f0, singer, noise.
pub fn project_on_tape(
    tape: &mut Tape,
    params: &NetworkParams,
    binding: &ParamBinding,
    batch: &ConditioningBatch,
) -> Result<ProjectedVars> {
    let mut project = |name: &str, input: &Tensor| -> Result<Var> {
        let idx = params
            .layer_index(name)
            .ok_or_else(|| Error::Contract(format!("generator lacks layer `{name}`")))?;
        let LayerKind::Conv(spec) = params.layers[idx].kind else {
            return Err(Error::Contract(format!("layer `{name}` is not a convolution")));
        };
        let (w, b) = binding.layer(idx);
        let x = tape.constant(input);
        tape.conv1d(x, w, b, &spec)
    };
    let phoneme = project(PROJ_PHONEME, &batch.phoneme)?;
    let f0 = project(PROJ_F0, &batch.f0)?;
    let singer = project(PROJ_SINGER, &batch.singer)?;
    let noise = batch.noise.as_ref().map(|n| tape.constant(n));
    let mut parts = vec![phoneme, f0, singer];
    parts.extend(noise);
    let concatenated = tape.concat_channels(&parts)?;
    Ok(ProjectedVars {
        phoneme,
        f0,
        singer,
        noise,
        concatenated,
    })
}

/// A fully assembled generator input for one window.
#[derive(Clone, Debug)]
pub struct ConditioningBlock {
    pub projected_phoneme: Tensor,
    pub projected_f0: Tensor,
    pub projected_singer: Tensor,
    pub noise: Tensor,
    pub concatenated: Tensor,
    pub raw: RawConditioning,
}

impl ConditioningBlock {
    pub fn frames(&self) -> usize {
        self.concatenated.shape()[1]
    }
}

/// Builds the conditioning for frames `[start, start + frames)` using the
/// projection layers held in `generator_params`.
pub fn assemble_block(
    ann: &FrameAnnotations,
    spec: &ConditioningSpec,
    start: usize,
    frames: usize,
    generator_params: &NetworkParams,
    noise_channels: usize,
    noise_seed: Option<u64>,
) -> Result<ConditioningBlock> {
    let raw = raw_window(ann, spec, start, frames, noise_channels, noise_seed)?;
    let batch = ConditioningBatch::from_windows(std::slice::from_ref(&raw), noise_channels > 0)?;
    let mut tape = Tape::new();
    let binding = generator_params.bind(&mut tape, false);
    let vars = project_on_tape(&mut tape, generator_params, &binding, &batch)?;
    let unbatch = |tape: &Tape, v: Var| -> Tensor {
        let s = tape.shape(v);
        Tensor::new(&[s[1], s[2]], tape.value(v).to_vec()).expect("batch of one")
    };
    Ok(ConditioningBlock {
        projected_phoneme: unbatch(&tape, vars.phoneme),
        projected_f0: unbatch(&tape, vars.f0),
        projected_singer: unbatch(&tape, vars.singer),
        noise: raw.noise.clone(),
        concatenated: unbatch(&tape, vars.concatenated),
        raw,
    })
}
