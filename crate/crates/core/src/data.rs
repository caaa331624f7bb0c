//! Corpus files: feature containers, frame-wise annotations, vocabularies,
//! the manifest, per-channel normalisation, and a synthetic toy corpus.
//!
//! # Feature file layout
//!
//! All integers and reals are little-endian.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"BSYF"`                         |
//! | 4      | 4    | `u32` version, currently 1              |
//! | 8      | 4    | `u32` channel count, always 64          |
//! | 12     | 4    | `u32` harmonic channels, always 60      |
//! | 16     | 4    | `u32` aperiodic channels, always 4      |
//! | 20     | 8    | `f64` hop in milliseconds, 5.0          |
//! | 28     | 8    | `u64` frame count `T`                   |
//! | 36     | 8·64·T | `f64` payload, frame-major            |
//!
//! Channels `0..60` are harmonic (spectral envelope) coefficients, `60..64`
//! aperiodicity coefficients.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{normalize_f0, ConditioningSpec, FrameAnnotations};
use crate::config::{APERIODIC_CHANNELS, FEATURE_CHANNELS, HARMONIC_CHANNELS, HOP_MS};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"BSYF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

/// Writes a `64 x T` matrix in the binary feature format.
pub fn write_features(path: &Path, matrix: &Tensor) -> Result<()> {
    let (channels, frames) = feature_dims(matrix)?;
    if !matrix.is_finite() {
        return Err(Error::format(path, "refusing to write non-finite features"));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * channels * frames);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    buf.extend_from_slice(&(HARMONIC_CHANNELS as u32).to_le_bytes());
    buf.extend_from_slice(&(APERIODIC_CHANNELS as u32).to_le_bytes());
    buf.extend_from_slice(&HOP_MS.to_le_bytes());
    buf.extend_from_slice(&(frames as u64).to_le_bytes());
    for t in 0..frames {
        for c in 0..channels {
            buf.extend_from_slice(&matrix.at2(c, t).to_le_bytes());
        }
    }
    write_file(path, &buf)
}

fn feature_dims(matrix: &Tensor) -> Result<(usize, usize)> {
    let (channels, frames) = matrix
        .as_matrix_dims()
        .ok_or_else(|| Error::DegenerateInput(format!("feature matrix must be 2-D, got {:?}", matrix.shape())))?;
    if channels != FEATURE_CHANNELS {
        return Err(Error::Dimension {
            context: "feature matrix",
            axis: "channels",
            expected: FEATURE_CHANNELS,
            actual: channels,
        });
    }
    if frames == 0 {
        return Err(Error::DegenerateInput("feature matrix has no frames".into()));
    }
    Ok((channels, frames))
}

/// Header fields of a feature file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureHeader {
    pub version: u32,
    pub channels: usize,
    pub harmonic: usize,
    pub aperiodic: usize,
    pub hop_ms: f64,
    pub frames: usize,
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn read_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn parse_feature_header(path: &Path, bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated feature header"));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    let header = FeatureHeader {
        version: read_u32(bytes, 4),
        channels: read_u32(bytes, 8) as usize,
        harmonic: read_u32(bytes, 12) as usize,
        aperiodic: read_u32(bytes, 16) as usize,
        hop_ms: read_f64(bytes, 20),
        frames: read_u64(bytes, 28) as usize,
    };
    if header.version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature file version {}", header.version)));
    }
    if header.channels != FEATURE_CHANNELS
        || header.harmonic != HARMONIC_CHANNELS
        || header.aperiodic != APERIODIC_CHANNELS
    {
        return Err(Error::format(
            path,
            format!(
                "expected {FEATURE_CHANNELS} channels ({HARMONIC_CHANNELS} harmonic + {APERIODIC_CHANNELS} aperiodic), got {} ({} + {})",
                header.channels, header.harmonic, header.aperiodic
            ),
        ));
    }
    if header.frames == 0 {
        return Err(Error::format(path, "feature file has no frames"));
    }
    Ok(header)
}

/// Reads a binary feature file into a `64 x T` matrix.
pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_feature_header(path, &bytes)?;
    let expected = HEADER_LEN + 8 * header.channels * header.frames;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {}", bytes.len() - HEADER_LEN, expected - HEADER_LEN),
        ));
    }
    let (c, t) = (header.channels, header.frames);
    let mut data = vec![0.0; c * t];
    for frame in 0..t {
        for ch in 0..c {
            data[ch * t + frame] = read_f64(&bytes, HEADER_LEN + 8 * (frame * c + ch));
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "feature payload contains non-finite values"));
    }
    Tensor::new(&[c, t], data)
}

/// Debug export: one frame per line, tab-separated channels.
pub fn write_features_text(path: &Path, matrix: &Tensor) -> Result<()> {
    let (channels, frames) = feature_dims(matrix)?;
    let mut out = String::new();
    for t in 0..frames {
        let row: Vec<String> = (0..channels).map(|c| format!("{:?}", matrix.at2(c, t))).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses `phoneme_id<TAB>f0_hz` lines.
pub fn parse_annotations(path: &Path, singer_id: usize) -> Result<FrameAnnotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, path, singer_id)
}

pub fn parse_annotations_str(text: &str, path: &Path, singer_id: usize) -> Result<FrameAnnotations> {
    let mut phoneme_ids = Vec::new();
    let mut f0_hz = Vec::new();
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(p), Some(f), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err(i + 1, format!("expected `phoneme_id<TAB>f0_hz`, got `{line}`")));
        };
        let id: usize = p
            .trim()
            .parse()
            .map_err(|_| err(i + 1, format!("bad phoneme id `{p}`")))?;
        let f0: f64 = f
            .trim()
            .parse()
            .map_err(|_| err(i + 1, format!("bad f0 `{f}`")))?;
        if !f0.is_finite() || f0 < 0.0 {
            return Err(err(i + 1, format!("f0 must be finite and non-negative, got {f0}")));
        }
        phoneme_ids.push(id);
        f0_hz.push(f0);
    }
    Ok(FrameAnnotations {
        phoneme_ids,
        f0_hz,
        singer_id,
        frame_hop_ms: HOP_MS,
    })
}

pub fn write_annotations(path: &Path, ann: &FrameAnnotations) -> Result<()> {
    let mut out = String::new();
    for (p, f) in ann.phoneme_ids.iter().zip(&ann.f0_hz) {
        out.push_str(&format!("{p}\t{f:?}\n"));
    }
    write_file(path, out.as_bytes())
}

/// One symbol per line; the line index is the id.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let symbols: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if symbols.is_empty() {
        return Err(Error::format(path, "vocabulary is empty"));
    }
    Ok(symbols)
}

fn write_vocab(path: &Path, symbols: &[String]) -> Result<()> {
    write_file(path, (symbols.join("\n") + "\n").as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackEntry {
    pub id: String,
    pub singer: String,
    pub annotations: PathBuf,
    pub features: PathBuf,
    pub frames: usize,
}

/// Corpus manifest: `key = value` header lines, then a `[tracks]` table of
/// tab-separated `id singer annotations features frames` rows. Paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub phonemes: PathBuf,
    pub singers: PathBuf,
    pub f0_min: f64,
    pub f0_max: f64,
    pub hop_ms: f64,
    pub holdout: Vec<String>,
    pub tracks: Vec<TrackEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl CorpusManifest {
    /// Accepts the manifest file or the corpus directory containing it.
    pub fn resolve(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = Self::resolve(path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path, root)
    }

    pub fn parse(text: &str, path: &Path, root: PathBuf) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut keys: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut tracks = Vec::new();
        let mut in_tracks = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[tracks]" {
                in_tracks = true;
                continue;
            }
            if in_tracks {
                let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
                if cols.len() != 5 {
                    return Err(err(i + 1, format!("track rows need 5 tab-separated columns, got {}", cols.len())));
                }
                let frames = cols[4]
                    .parse()
                    .map_err(|_| err(i + 1, format!("bad frame count `{}`", cols[4])))?;
                tracks.push(TrackEntry {
                    id: cols[0].to_string(),
                    singer: cols[1].to_string(),
                    annotations: PathBuf::from(cols[2]),
                    features: PathBuf::from(cols[3]),
                    frames,
                });
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(i + 1, format!("expected key = value, got `{line}`")))?;
                keys.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
            }
        }
        let known = ["version", "phonemes", "singers", "f0_min", "f0_max", "hop_ms", "holdout"];
        if let Some((k, (line, _))) = keys.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(err(*line, format!("unknown manifest key `{k}`")));
        }
        let get = |k: &str| -> Result<&(usize, String)> {
            keys.get(k).ok_or_else(|| err(0, format!("missing manifest key `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            let (line, v) = get(k)?;
            v.parse().map_err(|_| err(*line, format!("bad number `{v}` for `{k}`")))
        };
        if let Some((line, v)) = keys.get("version") {
            if v != "1" {
                return Err(err(*line, format!("unsupported manifest version `{v}`")));
            }
        }
        let holdout = keys
            .get("holdout")
            .map(|(_, v)| {
                v.split([',', ' '])
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        let mut manifest = Self {
            root,
            phonemes: PathBuf::from(&get("phonemes")?.1),
            singers: PathBuf::from(&get("singers")?.1),
            f0_min: num("f0_min")?,
            f0_max: num("f0_max")?,
            hop_ms: keys.get("hop_ms").map(|_| num("hop_ms")).transpose()?.unwrap_or(HOP_MS),
            holdout,
            tracks,
        };
        manifest.tracks.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = manifest.tracks.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(err(0, format!("duplicate track id `{}`", w[0].id)));
        }
        if let Some(h) = manifest.holdout.iter().find(|h| !manifest.tracks.iter().any(|t| &&t.id == h)) {
            return Err(err(0, format!("holdout track `{h}` is not in the track table")));
        }
        Ok(manifest)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# blocksynth corpus manifest\nversion = 1\n");
        s.push_str(&format!("phonemes = {}\n", self.phonemes.display()));
        s.push_str(&format!("singers = {}\n", self.singers.display()));
        s.push_str(&format!("f0_min = {:?}\n", self.f0_min));
        s.push_str(&format!("f0_max = {:?}\n", self.f0_max));
        s.push_str(&format!("hop_ms = {:?}\n", self.hop_ms));
        s.push_str(&format!("holdout = {}\n", self.holdout.join(", ")));
        s.push_str("\n[tracks]\n# id\tsinger\tannotations\tfeatures\tframes\n");
        for t in &self.tracks {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                t.id,
                t.singer,
                t.annotations.display(),
                t.features.display(),
                t.frames
            ));
        }
        s
    }
}

/// Per-channel min/max used to map features into `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Channel-wise range over every frame of `matrices` (each `64 x T`).
    pub fn from_matrices<'a>(matrices: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut min = vec![f64::INFINITY; FEATURE_CHANNELS];
        let mut max = vec![f64::NEG_INFINITY; FEATURE_CHANNELS];
        let mut seen = false;
        for m in matrices {
            let (c, t) = feature_dims(m)?;
            for ch in 0..c {
                for &v in &m.data()[ch * t..(ch + 1) * t] {
                    min[ch] = min[ch].min(v);
                    max[ch] = max[ch].max(v);
                }
            }
            seen = true;
        }
        if !seen {
            return Err(Error::DegenerateInput("no training tracks to compute normalisation from".into()));
        }
        Ok(Self { min, max })
    }

    fn span(&self, ch: usize) -> f64 {
        let s = self.max[ch] - self.min[ch];
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize_value(&self, ch: usize, v: f64) -> f64 {
        2.0 * (v - self.min[ch]) / self.span(ch) - 1.0
    }

    pub fn denormalize_value(&self, ch: usize, v: f64) -> f64 {
        (v + 1.0) * 0.5 * self.span(ch) + self.min[ch]
    }

    fn map(&self, m: &Tensor, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
        let (c, t) = feature_dims(m)?;
        let mut data = m.data().to_vec();
        for ch in 0..c {
            for v in &mut data[ch * t..(ch + 1) * t] {
                *v = f(ch, *v);
            }
        }
        Tensor::new(&[c, t], data)
    }

    pub fn normalize(&self, m: &Tensor) -> Result<Tensor> {
        self.map(m, |ch, v| self.normalize_value(ch, v))
    }

    pub fn denormalize(&self, m: &Tensor) -> Result<Tensor> {
        self.map(m, |ch, v| self.denormalize_value(ch, v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: String,
    pub annotations: FrameAnnotations,
    /// Raw `64 x T` features.
    pub features: Tensor,
}

impl Track {
    pub fn frames(&self) -> usize {
        self.annotations.len()
    }
}

/// A loaded corpus with normalisation fitted on the training split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub conditioning: ConditioningSpec,
    pub phoneme_symbols: Vec<String>,
    pub singer_symbols: Vec<String>,
    /// Sorted by id.
    pub tracks: Vec<Track>,
    pub holdout: Vec<String>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn new(
        conditioning: ConditioningSpec,
        phoneme_symbols: Vec<String>,
        singer_symbols: Vec<String>,
        mut tracks: Vec<Track>,
        holdout: Vec<String>,
    ) -> Result<Self> {
        tracks.sort_by(|a, b| a.id.cmp(&b.id));
        let stats = training_stats(&tracks, &holdout)?;
        Ok(Self {
            conditioning,
            phoneme_symbols,
            singer_symbols,
            tracks,
            holdout,
            stats,
        })
    }

    pub fn is_holdout(&self, id: &str) -> bool {
        self.holdout.iter().any(|h| h == id)
    }

    pub fn training_tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| !self.is_holdout(&t.id))
    }

    pub fn holdout_tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| self.is_holdout(&t.id))
    }

    pub fn with_holdout(&self, holdout: Vec<String>) -> Result<Self> {
        Self::new(
            self.conditioning,
            self.phoneme_symbols.clone(),
            self.singer_symbols.clone(),
            self.tracks.clone(),
            holdout,
        )
    }
}

/// Normalisation fitted on every track not listed in `holdout`.
pub fn training_stats(tracks: &[Track], holdout: &[String]) -> Result<NormStats> {
    NormStats::from_matrices(
        tracks
            .iter()
            .filter(|t| !holdout.contains(&t.id))
            .map(|t| &t.features),
    )
}

/// Loads every track listed in the manifest, failing on the first bad file.
pub fn load_corpus(manifest_path: &Path) -> Result<Dataset> {
    let manifest = CorpusManifest::load(manifest_path)?;
    let root = &manifest.root;
    let phonemes = read_vocab(&root.join(&manifest.phonemes))?;
    let singers = read_vocab(&root.join(&manifest.singers))?;
    let spec = ConditioningSpec {
        phonemes: phonemes.len(),
        singers: singers.len(),
        f0_min: manifest.f0_min,
        f0_max: manifest.f0_max,
    };
    spec.validate()?;
    let mut tracks = Vec::with_capacity(manifest.tracks.len());
    for entry in &manifest.tracks {
        let singer_id = singers.iter().position(|s| s == &entry.singer).ok_or_else(|| {
            Error::format(
                CorpusManifest::resolve(manifest_path),
                format!("track `{}` names unknown singer `{}`", entry.id, entry.singer),
            )
        })?;
        let ann_path = root.join(&entry.annotations);
        let annotations = parse_annotations(&ann_path, singer_id)?;
        let features = read_features(&root.join(&entry.features))?;
        let feature_frames = features.shape()[1];
        if annotations.len() != feature_frames || annotations.len() != entry.frames {
            return Err(Error::Alignment {
                track: entry.id.clone(),
                annotation_frames: annotations.len(),
                feature_frames,
            });
        }
        for (frame, &id) in annotations.phoneme_ids.iter().enumerate() {
            if id >= spec.phonemes {
                return Err(Error::Vocabulary {
                    frame,
                    id,
                    size: spec.phonemes,
                });
            }
        }
        // surfaces out-of-range pitch at load time rather than mid-training
        normalize_f0(&annotations.f0_hz, spec.f0_min, spec.f0_max)?;
        tracks.push(Track {
            id: entry.id.clone(),
            annotations,
            features,
        });
    }
    if tracks.is_empty() {
        return Err(Error::DegenerateInput("corpus has no tracks".into()));
    }
    Dataset::new(spec, phonemes, singers, tracks, manifest.holdout)
}

/// Shape of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub seed: u64,
    pub singers: usize,
    pub phonemes: usize,
    pub tracks: usize,
    pub frames: usize,
    /// Trailing tracks held out for evaluation.
    pub holdout: usize,
    /// Amplitude of the uniform perturbation added to rendered features.
    pub noise_level: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            singers: 2,
            phonemes: 10,
            tracks: 8,
            frames: 512,
            holdout: 2,
            noise_level: 0.01,
        }
    }
}

pub const TOY_F0_MIN: f64 = 55.0;
pub const TOY_F0_MAX: f64 = 880.0;

/// The generative rule behind the toy corpus: every feature frame is a fixed
/// function of (phoneme, f0, singer).
#[derive(Clone, Debug)]
pub struct ToyVoiceModel {
    phoneme_shapes: Vec<[f64; FEATURE_CHANNELS]>,
    singer_shapes: Vec<[f64; FEATURE_CHANNELS]>,
    pitch_tilt: Vec<[f64; FEATURE_CHANNELS]>,
}

fn smooth_shape<R: Rng>(rng: &mut R) -> [f64; FEATURE_CHANNELS] {
    let terms: Vec<(f64, f64, f64)> = (1..=3)
        .map(|k| (rng.gen_range(-1.0..1.0) / k as f64, k as f64, rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    std::array::from_fn(|c| {
        let x = c as f64 / FEATURE_CHANNELS as f64;
        terms
            .iter()
            .map(|(a, k, phase)| a * (std::f64::consts::PI * k * x * 2.0 + phase).cos())
            .sum()
    })
}

impl ToyVoiceModel {
    pub fn new(seed: u64, singers: usize, phonemes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_70a1);
        let phoneme_shapes = (0..phonemes).map(|_| smooth_shape(&mut rng)).collect();
        let singer_shapes = (0..singers).map(|_| smooth_shape(&mut rng)).collect();
        let pitch_tilt = (0..singers).map(|_| smooth_shape(&mut rng)).collect();
        Self {
            phoneme_shapes,
            singer_shapes,
            pitch_tilt,
        }
    }

    /// Noiseless feature frame. Harmonic channels decay like cepstra; the
    /// aperiodic channels rise towards 0 on unvoiced frames.
    pub fn render(&self, phoneme: usize, f0_hz: f64, singer: usize) -> [f64; FEATURE_CHANNELS] {
        let pitch = if f0_hz > 0.0 {
            normalize_f0(&[f0_hz], TOY_F0_MIN, TOY_F0_MAX)
                .map(|t| t.data()[0])
                .unwrap_or(0.0)
        } else {
            -1.0
        };
        let voiced = if f0_hz > 0.0 { 1.0 } else { 0.0 };
        std::array::from_fn(|c| {
            let shape = self.phoneme_shapes[phoneme][c] + 0.5 * self.singer_shapes[singer][c]
                + 0.3 * pitch * self.pitch_tilt[singer][c];
            if c < HARMONIC_CHANNELS {
                let scale = 2.0 / (1.0 + c as f64 / 6.0);
                scale * shape + if c == 0 { 4.0 } else { 0.0 }
            } else {
                -1.5 * voiced + 0.25 * shape - 0.2
            }
        })
    }
}

/// Piecewise-constant phonemes (id 0 is silence and unvoiced) with a gliding,
/// vibrato-modulated pitch contour.
fn toy_annotations<R: Rng>(rng: &mut R, frames: usize, phonemes: usize, singer: usize) -> FrameAnnotations {
    let mut phoneme_ids = Vec::with_capacity(frames);
    let mut f0_hz = Vec::with_capacity(frames);
    let mut pitch = rng.gen_range(130.0..260.0f64);
    let vibrato_rate = rng.gen_range(0.02..0.04);
    while phoneme_ids.len() < frames {
        let len = rng.gen_range(16..48).min(frames - phoneme_ids.len());
        let id = if rng.gen_bool(0.15) { 0 } else { rng.gen_range(1..phonemes.max(2)) };
        let target = (pitch * 2f64.powf(rng.gen_range(-4i32..=4) as f64 / 12.0)).clamp(110.0, 330.0);
        for _ in 0..len {
            let t = phoneme_ids.len() as f64;
            pitch += 0.15 * (target - pitch);
            let f = pitch * (1.0 + 0.01 * (std::f64::consts::TAU * vibrato_rate * t).sin());
            phoneme_ids.push(id);
            f0_hz.push(if id == 0 { 0.0 } else { f });
        }
    }
    FrameAnnotations {
        phoneme_ids,
        f0_hz,
        singer_id: singer,
        frame_hop_ms: HOP_MS,
    }
}

/// Writes a synthetic corpus under `dir` and returns the manifest path.
pub fn make_toy_corpus(dir: &Path, spec: &ToyCorpusSpec) -> Result<PathBuf> {
    if spec.singers == 0 || spec.phonemes < 2 || spec.tracks == 0 || spec.frames == 0 {
        return Err(Error::Config(
            "toy corpus needs at least 1 singer, 2 phonemes, 1 track and 1 frame".into(),
        ));
    }
    if spec.holdout >= spec.tracks {
        return Err(Error::Config("toy corpus must keep at least one training track".into()));
    }
    let model = ToyVoiceModel::new(spec.seed, spec.singers, spec.phonemes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phoneme_symbols: Vec<String> = (0..spec.phonemes)
        .map(|p| if p == 0 { "sil".to_string() } else { format!("ph{p:02}") })
        .collect();
    let singer_symbols: Vec<String> = (0..spec.singers).map(|s| format!("singer{s:02}")).collect();
    write_vocab(&dir.join("phonemes.txt"), &phoneme_symbols)?;
    write_vocab(&dir.join("singers.txt"), &singer_symbols)?;

    let mut entries = Vec::with_capacity(spec.tracks);
    for i in 0..spec.tracks {
        let id = format!("track{i:03}");
        let singer = i % spec.singers;
        let ann = toy_annotations(&mut rng, spec.frames, spec.phonemes, singer);
        let features = toy_features(&model, &ann, &mut rng, spec.noise_level)?;
        let ann_rel = PathBuf::from("annotations").join(format!("{id}.tsv"));
        let feat_rel = PathBuf::from("features").join(format!("{id}.bsf"));
        write_annotations(&dir.join(&ann_rel), &ann)?;
        write_features(&dir.join(&feat_rel), &features)?;
        entries.push(TrackEntry {
            id,
            singer: singer_symbols[singer].clone(),
            annotations: ann_rel,
            features: feat_rel,
            frames: spec.frames,
        });
    }
    let holdout = entries[spec.tracks - spec.holdout..]
        .iter()
        .map(|e| e.id.clone())
        .collect();
    let manifest = CorpusManifest {
        root: dir.to_path_buf(),
        phonemes: PathBuf::from("phonemes.txt"),
        singers: PathBuf::from("singers.txt"),
        f0_min: TOY_F0_MIN,
        f0_max: TOY_F0_MAX,
        hop_ms: HOP_MS,
        holdout,
        tracks: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    write_file(&path, manifest.to_text().as_bytes())?;
    Ok(path)
}

/// Renders the features for an annotation track, adding uniform noise of
/// amplitude `noise_level` drawn from `rng`.
pub fn toy_features<R: Rng>(
    model: &ToyVoiceModel,
    ann: &FrameAnnotations,
    rng: &mut R,
    noise_level: f64,
) -> Result<Tensor> {
    let t = ann.len();
    let mut data = vec![0.0; FEATURE_CHANNELS * t];
    for frame in 0..t {
        let clean = model.render(ann.phoneme_ids[frame], ann.f0_hz[frame], ann.singer_id);
        for (c, v) in clean.iter().enumerate() {
            let noise = if noise_level > 0.0 {
                rng.gen_range(-noise_level..=noise_level)
            } else {
                0.0
            };
            data[c * t + frame] = v + noise;
        }
    }
    Tensor::new(&[FEATURE_CHANNELS, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(frames: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::nn::layers::uniform_tensor(&mut rng, &[FEATURE_CHANNELS, frames], 3.0)
    }

    #[test]
    fn feature_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bsf");
        let m = matrix(17, 3);
        write_features(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn header_declares_64_channels_and_5ms_hop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bsf");
        write_features(&path, &matrix(4, 1)).unwrap();
        let bytes = fs::read(&path).unwrap();
        let h = parse_feature_header(&path, &bytes).unwrap();
        assert_eq!((h.channels, h.harmonic, h.aperiodic), (64, 60, 4));
        assert_eq!(h.hop_ms, 5.0);
        assert_eq!(h.frames, 4);
        assert_eq!(bytes.len(), 36 + 8 * 64 * 4);
    }

    #[test]
    fn payload_is_frame_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bsf");
        let m = matrix(3, 2);
        write_features(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        // second value in the payload is channel 1 of frame 0
        assert_eq!(read_f64(&bytes, HEADER_LEN + 8), m.at2(1, 0));
        assert_eq!(read_f64(&bytes, HEADER_LEN + 8 * 64), m.at2(0, 1));
    }

    #[test]
    fn rejects_bad_feature_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bsf");
        assert!(write_features(&path, &Tensor::zeros(&[63, 4])).is_err());
        let mut bad = matrix(2, 0);
        bad.data_mut()[0] = f64::NAN;
        assert!(write_features(&path, &bad).is_err());
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
        write_features(&path, &matrix(2, 0)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn annotation_parsing() {
        let p = Path::new("a.tsv");
        let ann = parse_annotations_str("1\t100.5\n0\t0\n3\t220\n", p, 1).unwrap();
        assert_eq!(ann.len(), 3);
        assert_eq!(ann.f0_hz[1], 0.0);
        assert_eq!(ann.singer_id, 1);
        let err = parse_annotations_str("1\t100\n2\t-5\n", p, 0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_annotations_str("1 100\n", p, 0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_annotations_str("x\t100\n", p, 0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn manifest_round_trip_and_sorting() {
        let text = "phonemes = p.txt\nsingers = s.txt\nf0_min = 50\nf0_max = 800\nholdout = b\n[tracks]\nb\tx\tb.tsv\tb.bsf\t10\na\tx\ta.tsv\ta.bsf\t12\n";
        let m = CorpusManifest::parse(text, Path::new("m"), PathBuf::from("/r")).unwrap();
        assert_eq!(m.tracks[0].id, "a");
        assert_eq!(m.holdout, vec!["b".to_string()]);
        let again = CorpusManifest::parse(&m.to_text(), Path::new("m"), PathBuf::from("/r")).unwrap();
        assert_eq!(m, again);
        assert!(CorpusManifest::parse("bogus = 1\n", Path::new("m"), PathBuf::new()).is_err());
    }

    #[test]
    fn normalisation_inverts() {
        let m = matrix(20, 7);
        let stats = NormStats::from_matrices([&m]).unwrap();
        let n = stats.normalize(&m).unwrap();
        assert!(n.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        let back = stats.denormalize(&n).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_model_is_deterministic_and_singer_dependent() {
        let a = ToyVoiceModel::new(4, 2, 10);
        let b = ToyVoiceModel::new(4, 2, 10);
        assert_eq!(a.render(3, 200.0, 1), b.render(3, 200.0, 1));
        assert_ne!(a.render(3, 200.0, 0), a.render(3, 200.0, 1));
    }
}
