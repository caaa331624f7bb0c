//! Adversarial training: weight-clipped critic updates alternating with
//! generator updates on the adversarial term plus a weighted reconstruction
//! loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::conditioning::{raw_window, ConditioningBatch, FrameAnnotations};
use crate::config::{ReconNorm, TrainingConfig, FEATURE_CHANNELS};
use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::model::{architecture, Critic, Generator};
use crate::nn::{clip_params, RmsProp, Tape, Tensor};

/// Per-epoch averages of the logged losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    /// `E[D(y)] - E[D(G(x))]`, averaged over the epoch's critic updates.
    pub critic_estimate: f64,
    /// `-E[D(G(x))]`.
    pub gen_adv: f64,
    pub recon: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,critic_estimate,gen_adv,recon,total";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.epoch, self.critic_estimate, self.gen_adv, self.recon, self.total
        )
    }
}

/// Outcome of one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStepReport {
    pub critic_estimate: f64,
}

/// Outcome of one generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStepReport {
    pub gen_adv: f64,
    pub recon: f64,
    pub total: f64,
}

/// One minibatch: the generator input `x` and the normalised real block `y`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub conditioning: ConditioningBatch,
    /// `[B, 64, N]` in the normalised domain.
    pub targets: Tensor,
    /// `(track index, window start)` per example, for diagnostics.
    pub windows: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct TrainingTrack {
    annotations: FrameAnnotations,
    normalized: Tensor,
}

/// Counts of optimizer updates applied so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub critic: u64,
    pub generator: u64,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub generator: Generator,
    pub critic: Critic,
    pub generator_opt: RmsProp,
    pub critic_opt: RmsProp,
    pub rng: ChaCha8Rng,
    pub stats: NormStats,
    pub epoch: usize,
    pub counters: UpdateCounters,
    pub history: Vec<LossReport>,
    pub phoneme_symbols: Vec<String>,
    pub singer_symbols: Vec<String>,
    tracks: Vec<TrainingTrack>,
    training_frames: usize,
}

impl Trainer {
    /// Fresh networks seeded from `config.seed`; critic weights start clipped.
    pub fn new(dataset: &Dataset, config: TrainingConfig) -> Result<Self> {
        let arch = architecture(&config, dataset.conditioning)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(arch.clone(), &mut rng);
        let mut critic = Critic::new(arch, &mut rng);
        clip_params(critic.params.tensors_mut(), config.clip_bound)?;
        let opt = || RmsProp::new(config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon);
        let (tracks, training_frames) = prepare_tracks(dataset, &dataset.stats, config.block_size)?;
        Ok(Self {
            generator_opt: opt()?,
            critic_opt: opt()?,
            generator,
            critic,
            rng,
            stats: dataset.stats.clone(),
            epoch: 0,
            counters: UpdateCounters::default(),
            history: Vec::new(),
            phoneme_symbols: dataset.phoneme_symbols.clone(),
            singer_symbols: dataset.singer_symbols.clone(),
            tracks,
            training_frames,
            config,
        })
    }

    /// Restores a trainer from a checkpoint. `config` may differ from the
    /// stored one only in `epochs` and `checkpoint_every`.
    pub fn resume(dataset: &Dataset, checkpoint: Checkpoint, config: TrainingConfig) -> Result<Self> {
        let conflicts = checkpoint.generator.arch.config.resume_conflicts(&config);
        if !conflicts.is_empty() {
            return Err(Error::Config(format!(
                "config differs from the checkpoint in {conflicts:?}; resuming would change the run"
            )));
        }
        if checkpoint.generator.arch.conditioning != dataset.conditioning {
            return Err(Error::Config("corpus vocabularies or f0 range differ from the checkpoint".into()));
        }
        let (tracks, training_frames) = prepare_tracks(dataset, &checkpoint.stats, config.block_size)?;
        let mut generator = checkpoint.generator;
        let mut critic = checkpoint.critic;
        generator.arch.config = config.clone();
        critic.arch.config = config.clone();
        Ok(Self {
            config,
            generator,
            critic,
            generator_opt: checkpoint.generator_opt,
            critic_opt: checkpoint.critic_opt,
            rng: checkpoint.rng,
            stats: checkpoint.stats,
            epoch: checkpoint.epoch,
            counters: checkpoint.counters,
            history: checkpoint.history,
            phoneme_symbols: checkpoint.phoneme_symbols,
            singer_symbols: checkpoint.singer_symbols,
            tracks,
            training_frames,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.generator.clone(),
            critic: self.critic.clone(),
            generator_opt: self.generator_opt.clone(),
            critic_opt: self.critic_opt.clone(),
            rng: self.rng.clone(),
            stats: self.stats.clone(),
            phoneme_symbols: self.phoneme_symbols.clone(),
            singer_symbols: self.singer_symbols.clone(),
            epoch: self.epoch,
            counters: self.counters,
            history: self.history.clone(),
        }
    }

    /// Generator updates per epoch: enough blocks to cover the training frames once.
    pub fn steps_per_epoch(&self) -> usize {
        self.training_frames
            .div_ceil(self.config.block_size * self.config.batch_size)
            .max(1)
    }

    /// Draws a batch: tracks weighted by length, uniform window start, fresh
    /// noise per example.
    pub fn sample_batch(&mut self) -> Result<Batch> {
        let n = self.config.block_size;
        let mut windows = Vec::with_capacity(self.config.batch_size);
        let mut raws = Vec::with_capacity(self.config.batch_size);
        let mut targets = Vec::with_capacity(self.config.batch_size * FEATURE_CHANNELS * n);
        for _ in 0..self.config.batch_size {
            let mut pick = self.rng.gen_range(0..self.training_frames);
            let ti = self
                .tracks
                .iter()
                .position(|t| {
                    if pick < t.annotations.len() {
                        true
                    } else {
                        pick -= t.annotations.len();
                        false
                    }
                })
                .expect("pick is below the total frame count");
            let track = &self.tracks[ti];
            let t = track.annotations.len();
            let start = self.rng.gen_range(0..=t - n);
            let noise_seed: u64 = self.rng.gen();
            raws.push(raw_window(
                &track.annotations,
                &self.generator.arch.conditioning,
                start,
                n,
                self.config.noise_channels,
                Some(noise_seed),
            )?);
            for ch in 0..FEATURE_CHANNELS {
                targets.extend_from_slice(&track.normalized.data()[ch * t + start..][..n]);
            }
            windows.push((ti, start));
        }
        let batch_size = raws.len();
        Ok(Batch {
            conditioning: ConditioningBatch::from_windows(&raws, self.config.noise_channels > 0)?,
            targets: Tensor::new(&[batch_size, FEATURE_CHANNELS, n], targets)?,
            windows,
        })
    }

    /// One critic update on a fresh batch.
    pub fn critic_step(&mut self) -> Result<CriticStepReport> {
        let batch = self.sample_batch()?;
        self.critic_step_on(&batch)
    }

    /// Ascends `E[D(y)] - E[D(G(x))]` on `batch` with the generator frozen,
    /// then clips every critic weight into `[-clip_bound, clip_bound]`.
    pub fn critic_step_on(&mut self, batch: &Batch) -> Result<CriticStepReport> {
        let fakes = self.generator.forward_batch(&batch.conditioning)?;
        let fake_data: Vec<f64> = fakes.iter().flat_map(|t| t.data().iter().copied()).collect();
        let fake = Tensor::new(batch.targets.shape(), fake_data)?;
        self.critic_step_with_fakes(batch, &fake)
    }

    /// Critic update against caller-supplied generated blocks.
    pub fn critic_step_with_fakes(&mut self, batch: &Batch, fake: &Tensor) -> Result<CriticStepReport> {
        let mut tape = Tape::new();
        let binding = self.critic.params.bind(&mut tape, true);
        let real = tape.constant(&batch.targets);
        let fake = tape.constant(fake);
        let ann = tape.constant(&batch.conditioning.annotations);
        let d_real = self.critic.forward_on_tape(&mut tape, &binding, real, ann)?;
        let d_fake = self.critic.forward_on_tape(&mut tape, &binding, fake, ann)?;
        let mean_real = tape.mean(d_real);
        let mean_fake = tape.mean(d_fake);
        let loss = tape.sub(mean_fake, mean_real)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(self.non_finite("critic loss", batch));
        }
        tape.backward(loss)?;
        self.critic.params.zero_grad();
        self.critic.params.collect_grads(&tape, &binding);
        self.critic_opt.step(self.critic.params.tensors_mut())?;
        clip_params(self.critic.params.tensors_mut(), self.config.clip_bound)?;
        self.critic.params.zero_grad();
        self.counters.critic += 1;
        Ok(CriticStepReport {
            critic_estimate: -value,
        })
    }

    /// One generator update on a fresh batch.
    pub fn generator_step(&mut self) -> Result<GeneratorStepReport> {
        let batch = self.sample_batch()?;
        self.generator_step_on(&batch)
    }

    /// Descends `-E[D(G(x))] + lambda_recon * E||G(x) - y||` with the critic frozen.
    pub fn generator_step_on(&mut self, batch: &Batch) -> Result<GeneratorStepReport> {
        let mut tape = Tape::new();
        let g_binding = self.generator.params.bind(&mut tape, true);
        let d_binding = self.critic.params.bind(&mut tape, false);
        let out = self.generator.forward_on_tape(&mut tape, &g_binding, &batch.conditioning)?;
        let ann = tape.constant(&batch.conditioning.annotations);
        let scores = self.critic.forward_on_tape(&mut tape, &d_binding, out, ann)?;
        let mean_score = tape.mean(scores);
        let adv = tape.scale(mean_score, -1.0);
        let target = tape.constant(&batch.targets);
        let recon = reconstruction_on_tape(&mut tape, out, target, self.config.recon_norm)?;
        let weighted = tape.scale(recon, self.config.lambda_recon);
        let total = tape.add(adv, weighted)?;
        let report = GeneratorStepReport {
            gen_adv: tape.scalar(adv),
            recon: tape.scalar(recon),
            total: tape.scalar(total),
        };
        if !report.total.is_finite() {
            return Err(self.non_finite("generator loss", batch));
        }
        tape.backward(total)?;
        self.generator.params.zero_grad();
        self.generator.params.collect_grads(&tape, &g_binding);
        self.generator_opt.step(self.generator.params.tensors_mut())?;
        self.generator.params.zero_grad();
        if !self.generator.params.is_finite() {
            return Err(self.non_finite("generator parameters", batch));
        }
        self.counters.generator += 1;
        Ok(report)
    }

    fn non_finite(&self, what: &'static str, batch: &Batch) -> Error {
        Error::NonFinite {
            what,
            epoch: self.epoch + 1,
            step: self.counters.generator as usize,
            windows: batch.windows.clone(),
        }
    }

    /// Runs one epoch: `steps_per_epoch` rounds of `critic_steps` critic
    /// updates followed by one generator update.
    pub fn run_epoch(&mut self) -> Result<LossReport> {
        let steps = self.steps_per_epoch();
        let (mut est, mut adv, mut recon, mut total) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..steps {
            for _ in 0..self.config.critic_steps {
                est += self.critic_step()?.critic_estimate;
            }
            let g = self.generator_step()?;
            adv += g.gen_adv;
            recon += g.recon;
            total += g.total;
        }
        self.epoch += 1;
        let report = LossReport {
            epoch: self.epoch,
            critic_estimate: est / (steps * self.config.critic_steps) as f64,
            gen_adv: adv / steps as f64,
            recon: recon / steps as f64,
            total: total / steps as f64,
        };
        debug!("epoch {} {:?}", self.epoch, report);
        self.history.push(report);
        Ok(report)
    }
}

/// Per-example reconstruction norm, averaged over the batch.
pub fn reconstruction_on_tape(
    tape: &mut Tape,
    output: crate::nn::Var,
    target: crate::nn::Var,
    norm: ReconNorm,
) -> Result<crate::nn::Var> {
    let batch = tape.shape(output)[0] as f64;
    let diff = tape.sub(output, target)?;
    let per = match norm {
        ReconNorm::L1 => tape.abs(diff),
        ReconNorm::L2 => tape.square(diff),
    };
    let sum = tape.sum(per);
    Ok(tape.scale(sum, 1.0 / batch))
}

/// Reference value of the original GAN objective,
/// `log D(y) + log(1 - D(G(x)))`, from discriminator probabilities.
pub fn gan_loss_reference(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::DegenerateInput("GAN objective needs at least one real and one fake output".into()));
    }
    for &p in d_real.iter().chain(d_fake) {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Probability(p));
        }
    }
    let real = d_real.iter().map(|p| p.ln()).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

/// Logistic squashing used to turn critic scores into probabilities for
/// [`gan_loss_reference`].
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn prepare_tracks(dataset: &Dataset, stats: &NormStats, block: usize) -> Result<(Vec<TrainingTrack>, usize)> {
    let mut tracks = Vec::new();
    for t in dataset.training_tracks() {
        if t.frames() < block {
            info!("skipping track `{}`: {} frames is shorter than a block", t.id, t.frames());
            continue;
        }
        tracks.push(TrainingTrack {
            annotations: t.annotations.clone(),
            normalized: stats.normalize(&t.features)?,
        });
    }
    if tracks.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "no training track has at least {block} frames"
        )));
    }
    let frames = tracks.iter().map(|t| t.annotations.len()).sum();
    Ok((tracks, frames))
}

/// Files produced by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<LossReport>,
    pub latest: PathBuf,
    pub loss_csv: PathBuf,
}

pub const LOSS_CSV: &str = "losses.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:05}.ckpt")
}

/// Trains until `config.epochs`, writing checkpoints and the loss CSV under
/// `out_dir`. With `resume`, continues that run instead of starting fresh.
pub fn train(
    dataset: &Dataset,
    config: TrainingConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(dataset, ckpt, config)?,
        None => {
            let t = Trainer::new(dataset, config)?;
            t.checkpoint().save(&out_dir.join(epoch_checkpoint_name(0)))?;
            t
        }
    };
    let latest = out_dir.join(LATEST_CHECKPOINT);
    let csv_path = out_dir.join(LOSS_CSV);
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    for r in &trainer.history {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    trainer.checkpoint().save(&latest)?;

    info!(
        "training from epoch {} to {} ({} steps per epoch)",
        trainer.epoch,
        trainer.config.epochs,
        trainer.steps_per_epoch()
    );
    while trainer.epoch < trainer.config.epochs {
        let report = trainer.run_epoch()?;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        writeln!(f, "{}", report.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&latest)?;
        if report.epoch % trainer.config.checkpoint_every == 0 || report.epoch == trainer.config.epochs {
            ckpt.save(&out_dir.join(epoch_checkpoint_name(report.epoch)))?;
        }
        info!(
            "epoch {:>5}  critic {:+.6e}  adv {:+.6e}  recon {:.4}  total {:.6}",
            report.epoch, report.critic_estimate, report.gen_adv, report.recon, report.total
        );
    }
    Ok(TrainOutcome {
        history: trainer.history,
        latest,
        loss_csv: csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gan_reference_values() {
        let v = gan_loss_reference(&[0.5], &[0.5]).unwrap();
        assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let near_perfect = gan_loss_reference(&[1.0 - 1e-12], &[1e-12]).unwrap();
        assert!(near_perfect.abs() < 1e-10);
        assert!(matches!(gan_loss_reference(&[1.0], &[0.5]), Err(Error::Probability(_))));
        assert!(matches!(gan_loss_reference(&[0.5], &[0.0]), Err(Error::Probability(_))));
    }

    #[test]
    fn gan_reference_matches_formula_on_random_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let real: Vec<f64> = (0..4).map(|_| sigmoid(rng.gen_range(-5.0..5.0))).collect();
            let fake: Vec<f64> = (0..4).map(|_| sigmoid(rng.gen_range(-5.0..5.0))).collect();
            let mut expect = 0.0;
            for i in 0..4 {
                expect += (real[i].ln() + (1.0 - fake[i]).ln()) / 4.0;
            }
            let got = gan_loss_reference(&real, &fake).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_of_identical_blocks_is_zero() {
        let mut tape = Tape::new();
        let y = Tensor::full(&[2, 64, 64], 0.3);
        let a = tape.constant(&y);
        let b = tape.constant(&y);
        let r = reconstruction_on_tape(&mut tape, a, b, ReconNorm::L1).unwrap();
        assert_eq!(tape.scalar(r), 0.0);
    }

    #[test]
    fn l1_is_per_block_sum_averaged_over_batch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::full(&[2, 3, 4], 1.0));
        let b = tape.constant(&Tensor::full(&[2, 3, 4], 0.5));
        let r = reconstruction_on_tape(&mut tape, a, b, ReconNorm::L1).unwrap();
        assert_eq!(tape.scalar(r), 0.5 * 12.0);
    }
}
