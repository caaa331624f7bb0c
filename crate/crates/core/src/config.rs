//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which norm the reconstruction term uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconNorm {
    L1,
    L2,
}

impl ReconNorm {
    fn as_str(self) -> &'static str {
        match self {
            ReconNorm::L1 => "l1",
            ReconNorm::L2 => "l2",
        }
    }
}

/// Channel widths of the encoder at width multiplier 1; the decoder mirrors them.
pub const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Number of stride-2 stages in the encoder.
pub const DEPTH: usize = 5;

/// Vocoder features per frame: 60 harmonic plus 4 aperiodic.
pub const FEATURE_CHANNELS: usize = 64;
pub const HARMONIC_CHANNELS: usize = 60;
pub const APERIODIC_CHANNELS: usize = 4;
pub const HOP_MS: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub lambda_recon: f64,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub epochs: usize,
    pub block_size: usize,
    pub clip_bound: f64,
    pub critic_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub width_multiplier: f64,
    pub leaky_slope: f64,
    pub phoneme_channels: usize,
    pub f0_channels: usize,
    pub singer_channels: usize,
    pub noise_channels: usize,
    pub recon_norm: ReconNorm,
    /// Whether synthesis feeds seeded noise (true) or zeros into the noise channels.
    pub inference_noise: bool,
    /// Archive a numbered checkpoint every this many epochs; `latest` is always refreshed.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_recon: 0.0005,
            learning_rate: 0.0001,
            rmsprop_decay: crate::nn::optim::DEFAULT_DECAY,
            rmsprop_epsilon: crate::nn::optim::DEFAULT_EPSILON,
            epochs: 3000,
            block_size: 128,
            clip_bound: 0.01,
            critic_steps: 5,
            batch_size: 16,
            seed: 0,
            width_multiplier: 1.0,
            leaky_slope: 0.2,
            phoneme_channels: 16,
            f0_channels: 16,
            singer_channels: 16,
            noise_channels: 4,
            recon_norm: ReconNorm::L1,
            inference_noise: true,
            checkpoint_every: 1,
        }
    }
}

pub const KEYS: [&str; 19] = [
    "lambda_recon",
    "learning_rate",
    "rmsprop_decay",
    "rmsprop_epsilon",
    "epochs",
    "block_size",
    "clip_bound",
    "critic_steps",
    "batch_size",
    "seed",
    "width_multiplier",
    "leaky_slope",
    "phoneme_channels",
    "f0_channels",
    "singer_channels",
    "noise_channels",
    "recon_norm",
    "inference_noise",
    "checkpoint_every",
];

/// Keys that may change when resuming a run without changing its trajectory.
const RESUMABLE_KEYS: [&str; 2] = ["epochs", "checkpoint_every"];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

impl TrainingConfig {
    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lambda_recon" => self.lambda_recon = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "rmsprop_decay" => self.rmsprop_decay = parse_num(key, v)?,
            "rmsprop_epsilon" => self.rmsprop_epsilon = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "block_size" => self.block_size = parse_num(key, v)?,
            "clip_bound" => self.clip_bound = parse_num(key, v)?,
            "critic_steps" => self.critic_steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "width_multiplier" => self.width_multiplier = parse_num(key, v)?,
            "leaky_slope" => self.leaky_slope = parse_num(key, v)?,
            "phoneme_channels" => self.phoneme_channels = parse_num(key, v)?,
            "f0_channels" => self.f0_channels = parse_num(key, v)?,
            "singer_channels" => self.singer_channels = parse_num(key, v)?,
            "noise_channels" => self.noise_channels = parse_num(key, v)?,
            "recon_norm" => {
                self.recon_norm = match v.to_ascii_lowercase().as_str() {
                    "l1" => ReconNorm::L1,
                    "l2" => ReconNorm::L2,
                    _ => return Err(Error::Config(format!("recon_norm must be l1 or l2, got `{v}`"))),
                }
            }
            "inference_noise" => self.inference_noise = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses the flat text form on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("expected key = value, got `{line}`"),
                });
            };
            cfg.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "lambda_recon" => format!("{:?}", self.lambda_recon),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "rmsprop_decay" => format!("{:?}", self.rmsprop_decay),
            "rmsprop_epsilon" => format!("{:?}", self.rmsprop_epsilon),
            "epochs" => self.epochs.to_string(),
            "block_size" => self.block_size.to_string(),
            "clip_bound" => format!("{:?}", self.clip_bound),
            "critic_steps" => self.critic_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "width_multiplier" => format!("{:?}", self.width_multiplier),
            "leaky_slope" => format!("{:?}", self.leaky_slope),
            "phoneme_channels" => self.phoneme_channels.to_string(),
            "f0_channels" => self.f0_channels.to_string(),
            "singer_channels" => self.singer_channels.to_string(),
            "noise_channels" => self.noise_channels.to_string(),
            "recon_norm" => self.recon_norm.as_str().to_string(),
            "inference_noise" => self.inference_noise.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => unreachable!("KEYS lists every field"),
        }
    }

    /// Canonical text form; `parse(to_text())` restores every field exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    /// Digest of every field that shapes the training trajectory.
    pub fn trajectory_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| !RESUMABLE_KEYS.contains(k)) {
            h.update(key.as_bytes());
            h.update(b"=");
            h.update(self.value_of(key).as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("rmsprop_epsilon", self.rmsprop_epsilon),
            ("clip_bound", self.clip_bound),
            ("width_multiplier", self.width_multiplier),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        if !(self.lambda_recon >= 0.0 && self.lambda_recon.is_finite()) {
            return Err(Error::Config(format!(
                "`lambda_recon` must be non-negative, got {}",
                self.lambda_recon
            )));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::Config(format!("`rmsprop_decay` must lie in (0, 1), got {}", self.rmsprop_decay)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("`leaky_slope` must lie in (0, 1), got {}", self.leaky_slope)));
        }
        let counts = [
            ("critic_steps", self.critic_steps),
            ("batch_size", self.batch_size),
            ("phoneme_channels", self.phoneme_channels),
            ("f0_channels", self.f0_channels),
            ("singer_channels", self.singer_channels),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        validate_block_size(self.block_size)
    }

    /// Encoder channel widths after applying the width multiplier.
    pub fn encoder_widths(&self) -> [usize; DEPTH] {
        BASE_WIDTHS.map(|w| ((w as f64 * self.width_multiplier).round() as usize).max(1))
    }

    /// Channels of the projected conditioning stack fed to the generator.
    pub fn conditioning_channels(&self) -> usize {
        self.phoneme_channels + self.f0_channels + self.singer_channels + self.noise_channels
    }

    /// Differences that would make resuming from `other` diverge.
    pub fn resume_conflicts(&self, other: &TrainingConfig) -> Vec<&'static str> {
        KEYS.iter()
            .copied()
            .filter(|k| !RESUMABLE_KEYS.contains(k))
            .filter(|k| self.value_of(k) != other.value_of(k))
            .collect()
    }
}

/// Block sizes must survive five halvings and leave at least two frames at the
/// bottleneck for linear upsampling.
pub fn validate_block_size(n: usize) -> Result<()> {
    let total_stride = 1 << DEPTH;
    if n == 0 || !n.is_multiple_of(total_stride) {
        return Err(Error::Config(format!(
            "block size must be a positive multiple of {total_stride}, got {n}"
        )));
    }
    if n / total_stride < 2 {
        return Err(Error::Config(format!(
            "block size must be at least {}, got {n}",
            2 * total_stride
        )));
    }
    Ok(())
}
