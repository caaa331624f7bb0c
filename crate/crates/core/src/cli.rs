//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::checkpoint::Checkpoint;
use crate::config::TrainingConfig;
use crate::data::{load_corpus, make_toy_corpus, parse_annotations, write_features_text, ToyCorpusSpec};
use crate::error::{Error, Result};
use crate::eval::{comparison_table, evaluate_holdout, loss_curve_summary, mcd_csv, read_loss_csv, HoldoutEvaluation, McdOptions};
use crate::inference::{export_features, synthesize_track, GeneratorPredictor};
use crate::training::train;

/// Environment variable read for the log filter, e.g. `BLOCKSYNTH_LOG=debug`.
pub const LOG_ENV: &str = "BLOCKSYNTH_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "blocksynth", version, about = "Block-wise adversarial synthesis of singing-voice vocoder features")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Sequential, bit-reproducible execution. Every code path is already
    /// sequential, so this only records intent.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a small synthetic corpus with a known annotation-to-feature mapping.
    MakeToyCorpus(ToyArgs),
    /// Train a generator and critic on a corpus.
    Train(TrainArgs),
    /// Synthesise a feature track from an annotation file.
    Synthesize(SynthArgs),
    /// Score a checkpoint on the corpus's held-out tracks.
    Evaluate(EvalArgs),
    /// Print what a checkpoint contains.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub singers: usize,
    #[arg(long, default_value_t = 10)]
    pub phonemes: usize,
    #[arg(long, default_value_t = 8)]
    pub tracks: usize,
    #[arg(long, default_value_t = 512)]
    pub frames: usize,
    /// How many tracks to hold out for evaluation.
    #[arg(long, default_value_t = 2)]
    pub holdout: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory or manifest file.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set epochs=10`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from this checkpoint. Without `--config`, its stored config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame annotations: one `phoneme_id<TAB>f0_hz` line per 5 ms frame.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Singer symbol from the training corpus, or its index.
    #[arg(long)]
    pub singer: String,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub transpose_semitones: i32,
    /// Seed for the generator noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output feature file (binary corpus format).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a tab-separated text copy next to `--out`.
    #[arg(long)]
    pub text: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Per-track CSV: `track,mcd_db,frames`.
    #[arg(long)]
    pub out: PathBuf,
    /// Second checkpoint (typically trained without the reconstruction term)
    /// to tabulate alongside the first.
    #[arg(long)]
    pub baseline_checkpoint: Option<PathBuf>,
    /// Write the comparison table here as well as to stdout.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Include the energy coefficient 0 in the distortion.
    #[arg(long)]
    pub include_energy: bool,
    /// Compare voiced frames only.
    #[arg(long)]
    pub voiced_only: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also summarise a loss CSV.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USER
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let env = env_logger::Env::new().filter_or(LOG_ENV, default);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        info!("deterministic mode");
    }
    match cli.command {
        Command::MakeToyCorpus(a) => make_toy(a),
        Command::Train(a) => run_train(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn make_toy(a: ToyArgs) -> Result<()> {
    let spec = ToyCorpusSpec {
        seed: a.seed,
        singers: a.singers,
        phonemes: a.phonemes,
        tracks: a.tracks,
        frames: a.frames,
        holdout: a.holdout,
        ..ToyCorpusSpec::default()
    };
    let manifest = make_toy_corpus(&a.out, &spec)?;
    info!("wrote {}", manifest.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&a.config, &resume) {
        (Some(path), _) => TrainingConfig::load(path)?,
        (None, Some(ckpt)) => ckpt.config().clone(),
        (None, None) => TrainingConfig::default(),
    };
    for o in &a.overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    let dataset = load_corpus(&a.corpus)?;
    info!(
        "corpus: {} tracks ({} held out), {} phonemes, {} singers",
        dataset.tracks.len(),
        dataset.holdout.len(),
        dataset.conditioning.phonemes,
        dataset.conditioning.singers
    );
    let outcome = train(&dataset, config, &a.out, resume)?;
    info!(
        "finished after {} epochs; latest checkpoint {}",
        outcome.history.last().map_or(0, |r| r.epoch),
        outcome.latest.display()
    );
    Ok(())
}

fn synthesize(a: SynthArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let singer = ckpt.singer_index(&a.singer)?;
    let cond = ckpt.conditioning();
    let mut ann = parse_annotations(&a.annotations, singer)?;
    cond.check(&ann)?;
    if a.transpose_semitones != 0 {
        ann = ann.transposed(a.transpose_semitones as f64, cond.f0_min, cond.f0_max);
    }
    let predictor = GeneratorPredictor {
        generator: &ckpt.generator,
        seed: a.seed,
        noise: ckpt.config().inference_noise,
    };
    let features = synthesize_track(&ann, &predictor, &ckpt.stats)?;
    if !features.is_finite() {
        return Err(Error::NonFinite {
            what: "synthesised features",
            epoch: ckpt.epoch,
            step: 0,
            windows: Vec::new(),
        });
    }
    export_features(&features, &a.out)?;
    if a.text {
        write_features_text(&a.out.with_extension("txt"), &features)?;
    }
    info!("wrote {} frames to {}", ann.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let dataset = load_corpus(&a.corpus)?;
    let opts = McdOptions {
        voiced_only: a.voiced_only,
        ..McdOptions::default()
    }
    .with_energy(a.include_energy);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let HoldoutEvaluation::Tracks(primary) = evaluate_holdout(&ckpt, &dataset, &opts)? else {
        return Err(Error::DegenerateInput(format!(
            "corpus {} declares no held-out tracks; nothing to evaluate",
            a.corpus.display()
        )));
    };
    write_file(&a.out, &mcd_csv(&primary))?;
    let mut columns = vec![(run_label(&ckpt), primary.as_slice())];
    let baseline = match &a.baseline_checkpoint {
        Some(path) => {
            let b = Checkpoint::load(path)?;
            Some((run_label(&b), evaluate_holdout(&b, &dataset, &opts)?.results().to_vec()))
        }
        None => None,
    };
    if let Some((label, results)) = &baseline {
        let label = if *label == columns[0].0 { format!("{label} (baseline)") } else { label.clone() };
        columns.push((label, results.as_slice()));
    }
    let table = comparison_table(&columns)?;
    print!("{table}");
    if let Some(path) = &a.table {
        write_file(path, &table)?;
    }
    Ok(())
}

fn run_label(ckpt: &Checkpoint) -> String {
    let lambda = ckpt.config().lambda_recon;
    if lambda == 0.0 {
        "adversarial only".into()
    } else {
        format!("recon x {lambda}")
    }
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    print!("{}", ckpt.describe());
    if let Some(path) = &a.losses {
        let history = read_loss_csv(path)?;
        if history.len() != ckpt.history.len() {
            warn!(
                "{} lists {} epochs but the checkpoint records {}",
                path.display(),
                history.len(),
                ckpt.history.len()
            );
        }
        print!("{}", loss_curve_summary(&history));
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
