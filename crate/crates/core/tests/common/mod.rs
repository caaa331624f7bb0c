#![allow(dead_code)]

pub mod grad;

use std::path::Path;

use blocksynth::conditioning::FrameAnnotations;
use blocksynth::config::TrainingConfig;
use blocksynth::data::{load_corpus, make_toy_corpus, Dataset, ToyCorpusSpec};
use blocksynth::inference::{BlockPredictor, SynthesisPlan};
use blocksynth::nn::Tensor;
use blocksynth::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small corpus for fast mechanical tests.
pub fn small_corpus(dir: &Path) -> Dataset {
    let spec = ToyCorpusSpec {
        tracks: 4,
        frames: 160,
        holdout: 1,
        ..ToyCorpusSpec::default()
    };
    load_corpus(&make_toy_corpus(dir, &spec).unwrap()).unwrap()
}

/// The corpus the convergence criteria are stated for.
pub fn reference_corpus(dir: &Path) -> Dataset {
    load_corpus(&make_toy_corpus(dir, &ToyCorpusSpec::default()).unwrap()).unwrap()
}

pub fn tiny_config(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        width_multiplier: 0.125,
        block_size: 64,
        batch_size: 2,
        epochs,
        ..TrainingConfig::default()
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

pub fn flat_annotations(frames: usize) -> FrameAnnotations {
    FrameAnnotations {
        phoneme_ids: vec![0; frames],
        f0_hz: vec![0.0; frames],
        singer_id: 0,
        frame_hop_ms: 5.0,
    }
}

/// Returns the matching window of a fixed feature track, repeating its last
/// frame past the end.
pub struct Echo {
    pub block: usize,
    pub track: Tensor,
}

impl BlockPredictor for Echo {
    fn block_size(&self) -> usize {
        self.block
    }

    fn predict(&self, _: &FrameAnnotations, start: usize, _: usize) -> Result<Tensor> {
        let (c, t) = (self.track.shape()[0], self.track.shape()[1]);
        let mut out = Vec::with_capacity(c * self.block);
        for ch in 0..c {
            for i in 0..self.block {
                out.push(self.track.data()[ch * t + (start + i).min(t - 1)]);
            }
        }
        Tensor::new(&[c, self.block], out)
    }
}

/// Returns independent random blocks, one per block index.
pub struct RandomBlocks {
    pub block: usize,
    pub seed: u64,
}

impl BlockPredictor for RandomBlocks {
    fn block_size(&self) -> usize {
        self.block
    }

    fn predict(&self, _: &FrameAnnotations, _: usize, index: usize) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1000) + index as u64);
        Ok(random_matrix(&mut rng, 64, self.block))
    }
}

/// Frame-by-frame overlap-add: for each output frame, find the blocks that
/// cover it; one block is copied, two blocks are mixed by their window taps.
pub fn naive_overlap_add(blocks: &[Tensor], starts: &[usize], n: usize, t: usize) -> Vec<f64> {
    let half = n as f64 / 2.0;
    let tap = |i: usize| {
        // explicit triangle: rising (i + 0.5) / half, then mirrored
        let j = if i < n / 2 { i } else { n - 1 - i };
        (j as f64 + 0.5) / half
    };
    let mut out = vec![0.0; 64 * t];
    for frame in 0..t {
        let covering: Vec<usize> = (0..starts.len())
            .filter(|&b| starts[b] <= frame && frame < starts[b] + n)
            .collect();
        for ch in 0..64 {
            let v = |b: usize| blocks[b].data()[ch * n + frame - starts[b]];
            out[ch * t + frame] = match covering.as_slice() {
                [b] => v(*b),
                [a, b] => tap(frame - starts[*a]) * v(*a) + tap(frame - starts[*b]) * v(*b),
                other => panic!("frame {frame} covered by {} blocks", other.len()),
            };
        }
    }
    out
}

pub fn plan(t: usize, n: usize) -> SynthesisPlan {
    SynthesisPlan::new(t, n).unwrap()
}

/// Per-frame loop MCD with the constant spelled out independently.
pub fn brute_mcd(pred: &Tensor, reference: &Tensor, lo: usize, hi: usize) -> f64 {
    let t = reference.shape()[1];
    let k = 10.0 / 10f64.ln();
    let mut total = 0.0;
    for f in 0..t {
        let mut ss = 0.0;
        for d in lo..hi {
            let diff = pred.data()[d * t + f] - reference.data()[d * t + f];
            ss += diff * diff;
        }
        total += k * (2.0 * ss).sqrt();
    }
    total / t as f64
}
