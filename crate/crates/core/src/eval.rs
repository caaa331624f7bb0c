//! Mel-cepstral distortion on held-out tracks, and loss-curve summaries.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::HARMONIC_CHANNELS;
use crate::data::{Dataset, Track};
use crate::error::{Error, Result};
use crate::inference::{synthesize_track, GeneratorPredictor};
use crate::nn::Tensor;
use crate::training::{LossReport, LOSS_CSV_HEADER};

/// `10 / ln 10`, the dB factor of the distortion.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Harmonic coefficients compared by default: everything but the energy term.
pub const DEFAULT_MCD_CHANNELS: Range<usize> = 1..HARMONIC_CHANNELS;

#[derive(Clone, Debug, PartialEq)]
pub struct McdOptions {
    pub channels: Range<usize>,
    /// Compare only frames whose reference f0 is non-zero.
    pub voiced_only: bool,
}

impl Default for McdOptions {
    fn default() -> Self {
        Self {
            channels: DEFAULT_MCD_CHANNELS,
            voiced_only: false,
        }
    }
}

impl McdOptions {
    pub fn with_energy(mut self, include: bool) -> Self {
        self.channels = if include { 0..HARMONIC_CHANNELS } else { DEFAULT_MCD_CHANNELS };
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McdResult {
    pub track: String,
    pub mcd_db: f64,
    pub frames_compared: usize,
    pub channels: Range<usize>,
}

/// Mean over frames of `(10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2)` over
/// `channels`. `mask`, when given, selects the frames to compare.
pub fn mcd(pred: &Tensor, reference: &Tensor, channels: Range<usize>, mask: Option<&[bool]>) -> Result<McdResult> {
    if pred.shape().len() != 2 || reference.shape().len() != 2 {
        return Err(Error::Dimension {
            context: "mcd",
            axis: "rank",
            expected: 2,
            actual: pred.shape().len().max(reference.shape().len()),
        });
    }
    for (axis, i) in [("channels", 0), ("frames", 1)] {
        if pred.shape()[i] != reference.shape()[i] {
            return Err(Error::Dimension {
                context: "mcd",
                axis,
                expected: reference.shape()[i],
                actual: pred.shape()[i],
            });
        }
    }
    let (c, t) = (reference.shape()[0], reference.shape()[1]);
    if channels.is_empty() || channels.end > c.min(HARMONIC_CHANNELS) {
        return Err(Error::Config(format!(
            "MCD channel range {channels:?} must be non-empty and lie within the {HARMONIC_CHANNELS} harmonic coefficients"
        )));
    }
    if let Some(m) = mask {
        if m.len() != t {
            return Err(Error::Dimension {
                context: "mcd",
                axis: "mask",
                expected: t,
                actual: m.len(),
            });
        }
    }
    let (p, r) = (pred.data(), reference.data());
    let mut dist = vec![0.0; t];
    for ch in channels.clone() {
        let row = ch * t;
        for (f, d) in dist.iter_mut().enumerate() {
            let diff = p[row + f] - r[row + f];
            *d += diff * diff;
        }
    }
    let mut total = 0.0;
    let mut frames = 0;
    for (f, d) in dist.iter().enumerate() {
        if mask.is_none_or(|m| m[f]) {
            total += MCD_SCALE * (2.0 * d).sqrt();
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::DegenerateInput("no frames selected for MCD".into()));
    }
    Ok(McdResult {
        track: String::new(),
        mcd_db: total / frames as f64,
        frames_compared: frames,
        channels,
    })
}

/// Outcome of scoring a checkpoint on the held-out split.
#[derive(Clone, Debug, PartialEq)]
pub enum HoldoutEvaluation {
    /// The corpus declares no held-out tracks.
    Empty,
    Tracks(Vec<McdResult>),
}

impl HoldoutEvaluation {
    pub fn results(&self) -> &[McdResult] {
        match self {
            HoldoutEvaluation::Empty => &[],
            HoldoutEvaluation::Tracks(r) => r,
        }
    }

    pub fn mean_mcd(&self) -> Option<f64> {
        let r = self.results();
        (!r.is_empty()).then(|| r.iter().map(|x| x.mcd_db).sum::<f64>() / r.len() as f64)
    }
}

/// Synthesises `track` from its own annotations and scores it against its
/// reference features.
pub fn evaluate_track(checkpoint: &Checkpoint, track: &Track, opts: &McdOptions, seed: u64) -> Result<McdResult> {
    let predictor = GeneratorPredictor {
        generator: &checkpoint.generator,
        seed,
        noise: checkpoint.config().inference_noise,
    };
    let pred = synthesize_track(&track.annotations, &predictor, &checkpoint.stats)?;
    let mask: Option<Vec<bool>> = opts
        .voiced_only
        .then(|| track.annotations.f0_hz.iter().map(|&f| f > 0.0).collect());
    let mut r = mcd(&pred, &track.features, opts.channels.clone(), mask.as_deref())?;
    r.track = track.id.clone();
    Ok(r)
}

/// Scores every held-out track, in track-id order.
pub fn evaluate_holdout(checkpoint: &Checkpoint, dataset: &Dataset, opts: &McdOptions) -> Result<HoldoutEvaluation> {
    check_compatible(checkpoint, dataset)?;
    let tracks: Vec<&Track> = dataset.holdout_tracks().collect();
    if tracks.is_empty() {
        return Ok(HoldoutEvaluation::Empty);
    }
    tracks
        .into_iter()
        .map(|t| evaluate_track(checkpoint, t, opts, 0))
        .collect::<Result<Vec<_>>>()
        .map(HoldoutEvaluation::Tracks)
}

fn check_compatible(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if checkpoint.conditioning() != dataset.conditioning {
        return Err(Error::Config(
            "corpus vocabularies or f0 range differ from the checkpoint".into(),
        ));
    }
    Ok(())
}

pub const MCD_CSV_HEADER: &str = "track,mcd_db,frames";

pub fn mcd_csv(results: &[McdResult]) -> String {
    let mut s = format!("{MCD_CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(s, "{},{:?},{}", r.track, r.mcd_db, r.frames_compared);
    }
    s
}

/// Side-by-side MCD per held-out track, one column per labelled run, with a
/// mean row at the bottom.
pub fn comparison_table(columns: &[(String, &[McdResult])]) -> Result<String> {
    let Some((_, first)) = columns.first() else {
        return Err(Error::DegenerateInput("comparison table needs at least one column".into()));
    };
    for (label, col) in columns {
        let same = col.len() == first.len() && col.iter().zip(first.iter()).all(|(a, b)| a.track == b.track);
        if !same {
            return Err(Error::Contract(format!("column `{label}` covers different tracks")));
        }
    }
    let width = first.iter().map(|r| r.track.len()).chain([5]).max().unwrap_or(5);
    let mut s = format!("{:<width$}", "track");
    for (label, _) in columns {
        let _ = write!(s, "  {label:>18}");
    }
    s.push('\n');
    for (i, r) in first.iter().enumerate() {
        let _ = write!(s, "{:<width$}", r.track);
        for (_, col) in columns {
            let _ = write!(s, "  {:>15.2} dB", col[i].mcd_db);
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<width$}", "mean");
    for (_, col) in columns {
        let mean = col.iter().map(|r| r.mcd_db).sum::<f64>() / col.len().max(1) as f64;
        let _ = write!(s, "  {mean:>15.2} dB");
    }
    s.push('\n');
    Ok(s)
}

/// Reads a loss CSV written during training.
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOSS_CSV_HEADER => {}
        _ => return Err(Error::format(path, format!("expected header `{LOSS_CSV_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(parse_err(format!("expected 5 columns, found {}", cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("`{s}`: {e}")));
        out.push(LossReport {
            epoch: cells[0].parse().map_err(|e| parse_err(format!("`{}`: {e}", cells[0])))?,
            critic_estimate: num(cells[1])?,
            gen_adv: num(cells[2])?,
            recon: num(cells[3])?,
            total: num(cells[4])?,
        });
    }
    Ok(out)
}

/// A few lines describing how the losses moved over a run.
pub fn loss_curve_summary(history: &[LossReport]) -> String {
    let (Some(first), Some(last)) = (history.first(), history.last()) else {
        return "no epochs recorded\n".into();
    };
    let best = history
        .iter()
        .min_by(|a, b| a.recon.total_cmp(&b.recon))
        .expect("history is non-empty");
    format!(
        "epochs {}..{}\nrecon: {:.4} -> {:.4} (best {:.4} at epoch {})\n\
         critic estimate: {:+.4e} -> {:+.4e}\ntotal: {:.6} -> {:.6}\n",
        first.epoch,
        last.epoch,
        first.recon,
        last.recon,
        best.recon,
        best.epoch,
        first.critic_estimate,
        last.critic_estimate,
        first.total,
        last.total
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(t: usize) -> (Tensor, Tensor) {
        let a = Tensor::new(&[64, t], (0..64 * t).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::new(&[64, t], (0..64 * t).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        (a, b)
    }

    #[test]
    fn identical_tracks_have_zero_distortion() {
        let (a, _) = pair(7);
        assert_eq!(mcd(&a, &a, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db, 0.0);
    }

    #[test]
    fn unit_difference_in_one_coefficient() {
        let a = Tensor::zeros(&[64, 5]);
        let mut b = Tensor::zeros(&[64, 5]);
        b.data_mut()[3 * 5..4 * 5].iter_mut().for_each(|v| *v = 1.0);
        let r = mcd(&a, &b, DEFAULT_MCD_CHANNELS, None).unwrap();
        assert!((r.mcd_db - MCD_SCALE * 2f64.sqrt()).abs() < 1e-12);
        assert!((r.mcd_db - 6.1419).abs() < 1e-4);
        assert_eq!(r.frames_compared, 5);
    }

    #[test]
    fn symmetric_and_linear_in_scale() {
        let (a, b) = pair(9);
        let ab = mcd(&a, &b, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db;
        let ba = mcd(&b, &a, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db;
        assert_eq!(ab, ba);
        let scaled = Tensor::new(
            &[64, 9],
            a.data().iter().zip(b.data()).map(|(x, y)| y + 3.0 * (x - y)).collect(),
        )
        .unwrap();
        let s = mcd(&scaled, &b, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db;
        assert!((s - 3.0 * ab).abs() < 1e-9 * ab);
    }

    #[test]
    fn excluded_channels_do_not_matter() {
        let (a, b) = pair(6);
        let base = mcd(&a, &b, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db;
        let mut shifted = a.clone();
        shifted.data_mut()[..6].iter_mut().for_each(|v| *v += 10.0);
        shifted.data_mut()[60 * 6..].iter_mut().for_each(|v| *v -= 4.0);
        assert_eq!(mcd(&shifted, &b, DEFAULT_MCD_CHANNELS, None).unwrap().mcd_db, base);
        assert_ne!(mcd(&shifted, &b, 0..60, None).unwrap().mcd_db, base);
    }

    #[test]
    fn mask_and_errors() {
        let (a, b) = pair(4);
        let r = mcd(&a, &b, DEFAULT_MCD_CHANNELS, Some(&[true, false, true, false])).unwrap();
        assert_eq!(r.frames_compared, 2);
        assert!(mcd(&a, &b, DEFAULT_MCD_CHANNELS, Some(&[false; 4])).is_err());
        assert!(matches!(
            mcd(&a, &Tensor::zeros(&[64, 5]), DEFAULT_MCD_CHANNELS, None),
            Err(Error::Dimension { axis: "frames", .. })
        ));
        assert!(mcd(&a, &b, 0..61, None).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let h = vec![
            LossReport { epoch: 1, critic_estimate: 1e-5, gen_adv: -0.25, recon: 12.5, total: 0.1 / 3.0 },
            LossReport { epoch: 2, critic_estimate: -0.0, gen_adv: 0.5, recon: 6.0, total: 0.003 },
        ];
        let mut text = format!("{LOSS_CSV_HEADER}\n");
        h.iter().for_each(|r| text.push_str(&format!("{}\n", r.csv_row())));
        fs::write(&path, text).unwrap();
        assert_eq!(read_loss_csv(&path).unwrap(), h);
        assert!(loss_curve_summary(&h).contains("best 6.0000 at epoch 2"));
    }

    #[test]
    fn table_lists_every_track_and_mean() {
        let r = |t: &str, v: f64| McdResult {
            track: t.into(),
            mcd_db: v,
            frames_compared: 10,
            channels: DEFAULT_MCD_CHANNELS,
        };
        let a = [r("song1", 4.5), r("song2", 4.7)];
        let b = [r("song1", 8.25), r("song2", 8.75)];
        let table = comparison_table(&[("with recon".into(), &a[..]), ("adversarial only".into(), &b[..])]).unwrap();
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("4.50 dB") && table.contains("8.75 dB"));
        assert!(table.lines().last().unwrap().contains("4.60 dB"));
        let c = [r("other", 1.0), r("song2", 1.0)];
        assert!(comparison_table(&[("a".into(), &a[..]), ("c".into(), &c[..])]).is_err());
    }
}
