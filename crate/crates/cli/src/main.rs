//! `mtgan` command-line front end.
//!
//! Batch-mode subcommands covering the pipeline from features to metrics.
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtgan::checkpoint;
use mtgan::evalkit::{
    build_trials, choose_holdout, compute_accuracy, compute_eer, det_curve, embedding_dim_sweep, enroll_and_embed_tests, evaluate, format_sweep,
    split_enroll_test, DetCurve, EvalReport, EvalSplit, Protocol, TrialScoreSet,
};
use mtgan::featio::{load_features, read_wav, save_features, FbankConfig, FbankExtractor};
use mtgan::trainer::{Trainer, CHECKPOINT_FILE};
use mtgan::{FeatureSet, SyntheticCorpus, TrainConfig};

use report::{condition_label, print_report, ReportRow};

const SPLIT_FILE: &str = "split.json";

#[derive(Parser, Debug)]
#[command(name = "mtgan", version, about = "Speaker verification with multitask triplet/GAN training")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true, env = "MTGAN_SEED")]
    seed: Option<u64>,

    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature corpus.
    Synth(SynthArgs),
    /// Turn a directory of `<speaker>/<utt>.wav` files into a feature file.
    Extract(ExtractArgs),
    /// Train all networks and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Enroll speaker models from a trained encoder.
    Enroll(EvalArgs),
    /// Score enroll/test trials and print EER and accuracy.
    Score(EvalArgs),
    /// Write a DET curve and a gnuplot script for a trial file.
    Det(DetArgs),
    /// Train once per embedding dimension and tabulate EER.
    Sweep(SweepArgs),
    /// Train with modules removed and tabulate against the full model.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts: usize,
    #[arg(long, default_value_t = 128)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    mels: usize,
    /// Slices cut from each utterance.
    #[arg(long, default_value_t = 1)]
    slices_per_utt: usize,
    /// Speaker envelope strength relative to nuisance terms.
    #[arg(long)]
    speaker_strength: Option<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Directory with one subdirectory of WAV files per speaker.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 128)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    mels: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    input: PathBuf,
    /// Output directory for checkpoint, loss log and split.
    #[arg(short, long)]
    output: PathBuf,
    /// Speakers withheld from training for evaluation.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file or training output directory.
    #[arg(short = 'k', long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    input: PathBuf,
    /// Enroll/test split; defaults to the training directory's split, or all
    /// speakers of the input.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Where to write models (enroll) or the trial CSV (score).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Trial CSV output for `score`.
    #[arg(long)]
    trials: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetArgs {
    #[arg(short, long)]
    trials: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 200)]
    points: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    holdout: usize,
    /// Also write the table as CSV.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    input: PathBuf,
    /// Modules to remove one at a time: gan, softmax, triplet.
    #[arg(long, value_delimiter = ',', default_values_t = ["gan".to_string(), "softmax".into(), "triplet".into()])]
    drop: Vec<String>,
    #[arg(long, default_value_t = 5)]
    holdout: usize,
    /// Skip the full-model reference row.
    #[arg(long)]
    no_reference: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a, seed),
        Command::Enroll(a) => enroll(a, seed),
        Command::Score(a) => score(a, seed),
        Command::Det(a) => det(a),
        Command::Sweep(a) => sweep(a, seed),
        Command::Ablate(a) => ablate(a, seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn load_set(path: &Path) -> Result<FeatureSet> {
    load_features(path).with_context(|| format!("loading features {}", path.display()))
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let mut corpus = SyntheticCorpus::new(a.speakers, a.utts, seed);
    corpus.frames = a.frames;
    corpus.mels = a.mels;
    corpus.slices_per_utterance = a.slices_per_utt;
    if let Some(s) = a.speaker_strength {
        corpus.speaker_strength = s;
    }
    let set = corpus.generate()?;
    save_features(&set, &a.output)?;
    println!("wrote {} slices of {} speakers to {}", set.len(), set.num_classes(), a.output.display());
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let extractor = FbankExtractor::new(FbankConfig {
        n_frames: a.frames,
        n_mels: a.mels,
        ..FbankConfig::default()
    })?;
    let mut slices = Vec::new();
    for spk_dir in sorted_entries(&a.input)?.into_iter().filter(|p| p.is_dir()) {
        let speaker = spk_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for wav in sorted_entries(&spk_dir)? {
            if wav.extension().is_none_or(|e| !e.eq_ignore_ascii_case("wav")) {
                continue;
            }
            let stem = wav.file_stem().unwrap_or_default().to_string_lossy();
            let utt = read_wav(&wav, &speaker, &format!("{speaker}/{stem}"))?;
            let got = extractor.extract(&utt)?;
            if got.is_empty() {
                log::warn!("{}: shorter than one slice, skipped", wav.display());
            }
            slices.extend(got);
        }
    }
    if slices.is_empty() {
        bail!("no usable WAV files under {}", a.input.display());
    }
    let set = FeatureSet::from_slices(slices)?;
    save_features(&set, &a.output)?;
    println!("wrote {} slices of {} speakers to {}", set.len(), set.num_classes(), a.output.display());
    Ok(())
}

/// Split off `holdout` speakers; returns the training subset and the
/// evaluation split of the held-out speakers.
fn holdout_split(features: &FeatureSet, holdout: usize, seed: u64) -> Result<(FeatureSet, Option<EvalSplit>)> {
    if holdout == 0 {
        return Ok((features.clone(), None));
    }
    let (train_ids, held) = choose_holdout(features, holdout, seed)?;
    let split = split_enroll_test(features, &held, Protocol::default(), seed)?;
    Ok((features.subset(&train_ids)?, Some(split)))
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let features = load_set(&a.input)?;
    let (train_set, split) = holdout_split(&features, a.holdout, cfg.seed)?;
    std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    if let Some(split) = &split {
        std::fs::write(a.output.join(SPLIT_FILE), serde_json::to_string_pretty(split)?)?;
    }
    let mut trainer = if a.resume {
        Trainer::resume(&a.output.join(CHECKPOINT_FILE), cfg)?
    } else {
        Trainer::new(cfg, &train_set)?
    };
    let start = Instant::now();
    trainer.run(&train_set, Some(&a.output))?;
    println!(
        "trained {} steps ({} epochs) in {:.1}s; checkpoint in {}",
        trainer.step,
        trainer.epoch,
        start.elapsed().as_secs_f64(),
        a.output.display()
    );
    if let Some(split) = &split {
        println!("{}", evaluate(&trainer.nets.encoder, &features, split)?.summary());
    }
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn resolve_split(a: &EvalArgs, features: &FeatureSet, seed: u64) -> Result<EvalSplit> {
    let explicit = a.split.clone().or_else(|| {
        let p = a.checkpoint.join(SPLIT_FILE);
        (a.checkpoint.is_dir() && p.exists()).then_some(p)
    });
    match explicit {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(split_enroll_test(features, features.speakers(), Protocol::default(), seed)?),
    }
}

fn load_trainer(a: &EvalArgs) -> Result<Trainer> {
    let path = checkpoint_path(&a.checkpoint);
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn enroll(a: EvalArgs, seed: Option<u64>) -> Result<()> {
    let trainer = load_trainer(&a)?;
    let features = load_set(&a.input)?;
    let split = resolve_split(&a, &features, seed.unwrap_or(trainer.config.seed))?;
    let (models, _) = enroll_and_embed_tests(&trainer.nets.encoder, &features, &split)?;
    let json = serde_json::to_string_pretty(&models)?;
    match &a.output {
        Some(p) => {
            std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
            println!("enrolled {} speakers into {}", models.len(), p.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn score(a: EvalArgs, seed: Option<u64>) -> Result<()> {
    let trainer = load_trainer(&a)?;
    let features = load_set(&a.input)?;
    let split = resolve_split(&a, &features, seed.unwrap_or(trainer.config.seed))?;
    let (models, tests) = enroll_and_embed_tests(&trainer.nets.encoder, &features, &split)?;
    let trials = build_trials(&models, &tests);
    if let Some(p) = a.trials.as_ref().or(a.output.as_ref()) {
        trials.save(p)?;
    }
    let (eer, eer_threshold) = compute_eer(&trials)?;
    let (accuracy, accuracy_threshold) = compute_accuracy(&trials)?;
    let report = EvalReport {
        eer,
        eer_threshold,
        accuracy,
        accuracy_threshold,
        trials,
    };
    println!("{}", report.summary());
    Ok(())
}

fn det(a: DetArgs) -> Result<()> {
    let trials = TrialScoreSet::load(&a.trials)?;
    let curve = det_curve(&trials, a.points)?;
    std::fs::write(&a.output, curve.to_csv()).with_context(|| format!("writing {}", a.output.display()))?;
    let script = a.output.with_extension("gp");
    let csv_name = a.output.file_name().unwrap_or_default().to_string_lossy();
    std::fs::write(&script, DetCurve::gnuplot_script(&csv_name, "DET curve"))
        .with_context(|| format!("writing {}", script.display()))?;
    println!("wrote {} points to {} and {}", curve.points.len(), a.output.display(), script.display());
    Ok(())
}

fn sweep(a: SweepArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let features = load_set(&a.input)?;
    let rows = embedding_dim_sweep(&features, &a.dims, &cfg, a.holdout, Protocol::default())?;
    let table = format_sweep(&rows);
    if let Some(p) = &a.output {
        std::fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{table}");
    Ok(())
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    for m in &a.drop {
        if !matches!(m.as_str(), "gan" | "softmax" | "triplet") {
            bail!("unknown module `{m}` (expected gan, softmax or triplet)");
        }
    }
    let features = load_set(&a.input)?;
    let (train_set, split) = holdout_split(&features, a.holdout.max(1), cfg.seed)?;
    let split = split.expect("holdout >= 1");
    let mut conditions: Vec<(String, TrainConfig)> = Vec::new();
    if !a.no_reference {
        conditions.push(("MTGAN".into(), cfg.clone()));
    }
    for m in &a.drop {
        let mut c = cfg.clone();
        match m.as_str() {
            "gan" => c.use_gan = false,
            "softmax" => c.use_softmax = false,
            _ => c.use_triplet = false,
        }
        conditions.push((condition_label(m), c));
    }
    let mut rows = Vec::new();
    for (label, c) in conditions {
        log::info!("training condition {label}");
        let epochs = c.epochs;
        let mut trainer = Trainer::new(c, &train_set)?;
        trainer.run(&train_set, None)?;
        let report = evaluate(&trainer.nets.encoder, &features, &split)?;
        rows.push(ReportRow::new(label, &report, epochs));
    }
    print!("{}", print_report(&rows));
    Ok(())
}
