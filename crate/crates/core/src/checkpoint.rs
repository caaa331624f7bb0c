//! Binary checkpoints holding everything needed to continue a run exactly:
//! both networks, both optimizer states, the RNG position, normalisation
//! statistics and the loss history. The byte layout is described in
//! `docs/formats.md`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::conditioning::ConditioningSpec;
use crate::config::{TrainingConfig, FEATURE_CHANNELS};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{architecture, Critic, Generator};
use crate::nn::{NetworkParams, RmsProp};
use crate::training::{LossReport, UpdateCounters};

pub const MAGIC: &[u8; 4] = b"BSYC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub generator: Generator,
    pub critic: Critic,
    pub generator_opt: RmsProp,
    pub critic_opt: RmsProp,
    pub rng: ChaCha8Rng,
    pub stats: NormStats,
    pub phoneme_symbols: Vec<String>,
    pub singer_symbols: Vec<String>,
    pub epoch: usize,
    pub counters: UpdateCounters,
    pub history: Vec<LossReport>,
}

impl Checkpoint {
    pub fn config(&self) -> &TrainingConfig {
        &self.generator.arch.config
    }

    pub fn conditioning(&self) -> ConditioningSpec {
        self.generator.arch.conditioning
    }

    /// Looks a singer up by symbol, falling back to a numeric index.
    pub fn singer_index(&self, singer: &str) -> Result<usize> {
        if let Some(i) = self.singer_symbols.iter().position(|s| s == singer) {
            return Ok(i);
        }
        match singer.parse::<usize>() {
            Ok(i) if i < self.singer_symbols.len() => Ok(i),
            _ => Err(Error::Config(format!(
                "unknown singer `{singer}`; known singers: {}",
                self.singer_symbols.join(", ")
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let config = self.config();
        w.u64(config.trajectory_hash());
        w.str(&config.to_text());
        let cond = self.conditioning();
        w.u64(cond.phonemes as u64);
        w.u64(cond.singers as u64);
        w.f64(cond.f0_min);
        w.f64(cond.f0_max);
        w.strings(&self.phoneme_symbols);
        w.strings(&self.singer_symbols);
        w.u64(self.epoch as u64);
        w.u64(self.counters.critic);
        w.u64(self.counters.generator);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());
        w.f64s(&self.stats.min);
        w.f64s(&self.stats.max);
        w.network(&self.generator.params);
        w.network(&self.critic.params);
        w.optimizer(&self.generator_opt);
        w.optimizer(&self.critic_opt);
        w.u64(self.history.len() as u64);
        for r in &self.history {
            w.u64(r.epoch as u64);
            for v in [r.critic_estimate, r.gen_adv, r.recon, r.total] {
                w.f64(v);
            }
        }
        let digest = Sha256::digest(&w.buf);
        w.bytes(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::format(path, message);
        if bytes.len() < 32 + MAGIC.len() {
            return Err(fail("file is too short to be a checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &bytes[..4] != MAGIC {
            return Err(fail("bad magic; not a checkpoint file".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch; the checkpoint is truncated or corrupted".into()));
        }
        let mut r = Reader { buf: body, pos: 4, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64()?;
        let config = TrainingConfig::parse(&r.str()?, path)?;
        if config.trajectory_hash() != hash {
            return Err(fail("stored config does not match its hash".into()));
        }
        let conditioning = ConditioningSpec {
            phonemes: r.usize()?,
            singers: r.usize()?,
            f0_min: r.f64()?,
            f0_max: r.f64()?,
        };
        let phoneme_symbols = r.strings()?;
        let singer_symbols = r.strings()?;
        let epoch = r.usize()?;
        let counters = UpdateCounters {
            critic: r.u64()?,
            generator: r.u64()?,
        };
        let seed: [u8; 32] = r.take(32)?.try_into().expect("took 32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("took 16 bytes"));
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let stats = NormStats {
            min: r.f64s()?,
            max: r.f64s()?,
        };
        if stats.min.len() != FEATURE_CHANNELS || stats.max.len() != FEATURE_CHANNELS {
            return Err(fail("normalisation statistics have the wrong channel count".into()));
        }
        let arch = architecture(&config, conditioning)?;
        let g_params = r.network(NetworkParams::zeros(&arch.generator_layers()))?;
        let d_params = r.network(NetworkParams::zeros(&arch.critic_layers()))?;
        let generator = Generator::from_params(arch.clone(), g_params)?;
        let critic = Critic::from_params(arch, d_params)?;
        let generator_opt = r.optimizer()?;
        let critic_opt = r.optimizer()?;
        let n = r.usize()?;
        let mut history = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            history.push(LossReport {
                epoch: r.usize()?,
                critic_estimate: r.f64()?,
                gen_adv: r.f64()?,
                recon: r.f64()?,
                total: r.f64()?,
            });
        }
        if r.pos != body.len() {
            return Err(fail(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            generator,
            critic,
            generator_opt,
            critic_opt,
            rng,
            stats,
            phoneme_symbols,
            singer_symbols,
            epoch,
            counters,
            history,
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Human-readable summary for `inspect-checkpoint`.
    pub fn describe(&self) -> String {
        let cfg = self.config();
        let cond = self.conditioning();
        let mut s = format!(
            "epoch: {}\ncritic updates: {}\ngenerator updates: {}\n\
             block size: {}\nwidth multiplier: {}\n\
             phonemes: {}\nsingers: {} ({})\nf0 range: {} - {} Hz\n\
             generator parameters: {}\ncritic parameters: {}\nconfig hash: {:016x}\n",
            self.epoch,
            self.counters.critic,
            self.counters.generator,
            cfg.block_size,
            cfg.width_multiplier,
            cond.phonemes,
            cond.singers,
            self.singer_symbols.join(", "),
            cond.f0_min,
            cond.f0_max,
            self.generator.params.param_count(),
            self.critic.params.param_count(),
            cfg.trajectory_hash(),
        );
        if let Some(last) = self.history.last() {
            s.push_str(&format!(
                "last losses: critic {:.6e}, adv {:.6e}, recon {:.6}, total {:.6}\n",
                last.critic_estimate, last.gen_adv, last.recon, last.total
            ));
        }
        s.push_str("config:\n");
        for line in cfg.to_text().lines() {
            s.push_str("  ");
            s.push_str(line);
            s.push('\n');
        }
        s
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }
    fn strings(&mut self, v: &[String]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|s| self.str(s));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn network(&mut self, p: &NetworkParams) {
        self.u64(p.layers.len() as u64);
        for layer in &p.layers {
            self.str(&layer.name);
            self.f64s(layer.weight.data());
            self.f64s(layer.bias.data());
        }
    }
    fn optimizer(&mut self, o: &RmsProp) {
        self.f64(o.learning_rate);
        self.f64(o.decay);
        self.f64(o.epsilon);
        self.u64(o.mean_square().len() as u64);
        o.mean_square().iter().for_each(|m| self.f64s(m));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("count {v} does not fit in memory")))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::format(self.path, format!("length {n} runs past the end of the file")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
    fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.str()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn network(&mut self, mut params: NetworkParams) -> Result<NetworkParams> {
        let n = self.usize()?;
        if n != params.layers.len() {
            return Err(Error::format(
                self.path,
                format!("expected {} layers, found {n}", params.layers.len()),
            ));
        }
        for layer in &mut params.layers {
            let name = self.str()?;
            if name != layer.name {
                return Err(Error::format(
                    self.path,
                    format!("expected layer `{}`, found `{name}`", layer.name),
                ));
            }
            for t in [&mut layer.weight, &mut layer.bias] {
                let v = self.f64s()?;
                if v.len() != t.len() {
                    return Err(Error::format(
                        self.path,
                        format!("layer `{name}` holds {} values, expected {}", v.len(), t.len()),
                    ));
                }
                t.data_mut().copy_from_slice(&v);
            }
        }
        Ok(params)
    }
    fn optimizer(&mut self) -> Result<RmsProp> {
        let (lr, decay, eps) = (self.f64()?, self.f64()?, self.f64()?);
        let n = self.len(8)?;
        let ms = (0..n).map(|_| self.f64s()).collect::<Result<Vec<_>>>()?;
        RmsProp::with_state(lr, decay, eps, ms)
    }
}
