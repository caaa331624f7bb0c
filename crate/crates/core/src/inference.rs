//! Whole-track synthesis by overlap-adding half-overlapping generator blocks.

use std::path::Path;

use crate::conditioning::{raw_window, ConditioningBatch, FrameAnnotations};
use crate::config::FEATURE_CHANNELS;
use crate::data::{write_features, NormStats};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::nn::Tensor;

/// Symmetric triangle with `w[i] + w[i + N/2] == 1` for every `i < N/2`.
pub fn triangular_window(n: usize) -> Result<Vec<f64>> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!("window length must be even and positive, got {n}")));
    }
    let half = n / 2;
    let mut w = vec![0.0; n];
    // rising half: (i + 0.5) / half, paired so each pair sums to exactly 1
    for i in 0..half.div_ceil(2) {
        w[i] = (i as f64 + 0.5) / half as f64;
        w[half - 1 - i] = 1.0 - w[i];
    }
    for i in 0..half {
        w[n - 1 - i] = w[i];
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisPlan {
    pub track_length: usize,
    pub block_size: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    pub block_starts: Vec<usize>,
}

impl SynthesisPlan {
    pub fn new(track_length: usize, block_size: usize) -> Result<Self> {
        let window = triangular_window(block_size)?;
        if track_length < block_size {
            return Err(Error::TooShort {
                frames: track_length,
                block: block_size,
            });
        }
        let hop = block_size / 2;
        let mut block_starts = vec![0];
        while block_starts.last().unwrap() + block_size < track_length {
            let next = block_starts.last().unwrap() + hop;
            block_starts.push(next);
        }
        Ok(Self {
            track_length,
            block_size,
            hop,
            window,
            block_starts,
        })
    }

    /// Length the annotations are padded to so every block is complete.
    pub fn padded_length(&self) -> usize {
        self.block_starts.last().unwrap() + self.block_size
    }
}

/// Overlap-adds `64 x N` blocks laid out by `plan` into a `64 x T` matrix.
/// Frames covered by two blocks get the window-weighted sum; frames covered
/// by a single block (the outer half-blocks) take that block verbatim.
pub fn overlap_add(blocks: &[Tensor], plan: &SynthesisPlan) -> Result<Tensor> {
    if blocks.len() != plan.block_starts.len() {
        return Err(Error::Dimension {
            context: "overlap_add",
            axis: "blocks",
            expected: plan.block_starts.len(),
            actual: blocks.len(),
        });
    }
    let n = plan.block_size;
    for b in blocks {
        if b.shape() != [FEATURE_CHANNELS, n] {
            return Err(Error::Dimension {
                context: "overlap_add",
                axis: "frames",
                expected: n,
                actual: b.shape().get(1).copied().unwrap_or(0),
            });
        }
    }
    let padded = plan.padded_length();
    let mut coverage = vec![0u8; padded];
    for &s in &plan.block_starts {
        coverage[s..s + n].iter_mut().for_each(|c| *c += 1);
    }
    let t = plan.track_length;
    let mut out = vec![0.0; FEATURE_CHANNELS * t];
    for (block, &start) in blocks.iter().zip(&plan.block_starts) {
        for ch in 0..FEATURE_CHANNELS {
            let src = &block.data()[ch * n..(ch + 1) * n];
            for (i, &v) in src.iter().enumerate() {
                let frame = start + i;
                if frame >= t {
                    break;
                }
                let weight = if coverage[frame] == 1 { 1.0 } else { plan.window[i] };
                out[ch * t + frame] += weight * v;
            }
        }
    }
    Tensor::new(&[FEATURE_CHANNELS, t], out)
}

/// Anything that can predict a normalised `64 x N` block for a window of a
/// (padded) annotation track.
pub trait BlockPredictor {
    fn block_size(&self) -> usize;

    fn predict(&self, ann: &FrameAnnotations, start: usize, block_index: usize) -> Result<Tensor>;

    fn predict_all(&self, ann: &FrameAnnotations, starts: &[usize]) -> Result<Vec<Tensor>> {
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| self.predict(ann, s, i))
            .collect()
    }
}

/// Runs a trained generator block by block. Noise for block `i` is seeded
/// from `seed + i`; with `noise` off the noise channels are zero.
pub struct GeneratorPredictor<'a> {
    pub generator: &'a Generator,
    pub seed: u64,
    pub noise: bool,
}

impl GeneratorPredictor<'_> {
    fn window(&self, ann: &FrameAnnotations, start: usize, index: usize) -> Result<crate::conditioning::RawConditioning> {
        let arch = &self.generator.arch;
        raw_window(
            ann,
            &arch.conditioning,
            start,
            arch.block_size(),
            arch.config.noise_channels,
            self.noise.then(|| self.seed.wrapping_add(index as u64)),
        )
    }
}

impl BlockPredictor for GeneratorPredictor<'_> {
    fn block_size(&self) -> usize {
        self.generator.arch.block_size()
    }

    fn predict(&self, ann: &FrameAnnotations, start: usize, block_index: usize) -> Result<Tensor> {
        Ok(self.predict_all_from(ann, &[(start, block_index)])?.remove(0))
    }

    fn predict_all(&self, ann: &FrameAnnotations, starts: &[usize]) -> Result<Vec<Tensor>> {
        let pairs: Vec<(usize, usize)> = starts.iter().copied().zip(0..).collect();
        let mut out = Vec::with_capacity(starts.len());
        for chunk in pairs.chunks(16) {
            out.extend(self.predict_all_from(ann, chunk)?);
        }
        Ok(out)
    }
}

impl GeneratorPredictor<'_> {
    fn predict_all_from(&self, ann: &FrameAnnotations, pairs: &[(usize, usize)]) -> Result<Vec<Tensor>> {
        let windows = pairs
            .iter()
            .map(|&(s, i)| self.window(ann, s, i))
            .collect::<Result<Vec<_>>>()?;
        let noise_channels = self.generator.arch.config.noise_channels;
        let batch = ConditioningBatch::from_windows(&windows, noise_channels > 0)?;
        self.generator.forward_batch(&batch)
    }
}

/// Synthesises a full track in the normalised domain, then denormalises.
/// Tracks whose length is not a whole number of hops are padded with their
/// last frame and truncated back to `T`.
pub fn synthesize_track<P: BlockPredictor>(
    ann: &FrameAnnotations,
    predictor: &P,
    stats: &NormStats,
) -> Result<Tensor> {
    let normalized = synthesize_normalized(ann, predictor)?;
    stats.denormalize(&normalized)
}

pub fn synthesize_normalized<P: BlockPredictor>(ann: &FrameAnnotations, predictor: &P) -> Result<Tensor> {
    let plan = SynthesisPlan::new(ann.len(), predictor.block_size())?;
    let padded = ann.padded_to(plan.padded_length());
    let blocks = predictor.predict_all(&padded, &plan.block_starts)?;
    overlap_add(&blocks, &plan)
}

/// Writes synthesised features in the corpus feature format.
pub fn export_features(matrix: &Tensor, path: &Path) -> Result<()> {
    if matrix.is_empty() {
        return Err(Error::DegenerateInput("cannot export an empty feature matrix".into()));
    }
    write_features(path, matrix)
}
