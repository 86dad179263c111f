//! Command-line surface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::bench::{find_max_duration, sweep_rtf};
use crate::config::RunConfig;
use crate::decoders::Vocab;
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::eval::{manifest_stats, read_manifest, wer, WerBreakdown};
use crate::frontend::read_wav;
use crate::pipeline::{DecoderKind, Pipeline, Transcription};
use crate::weights;

#[derive(Debug, Parser)]
#[command(name = "lfab", version, about = "Long-form ASR inference and benchmarking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transcribe one WAV file or every entry of a manifest.
    Transcribe(TranscribeArgs),
    /// Sweep synthetic audio durations and write an RTF report as CSV.
    Bench(BenchArgs),
    /// Longest audio (whole seconds) whose predicted activations fit a budget.
    MaxLength(MaxLengthArgs),
    /// Corpus WER of line-aligned reference and hypothesis files.
    Score(ScoreArgs),
    /// Write seeded random weights for a configuration.
    GenWeights(GenWeightsArgs),
    /// Count and duration statistics (minutes) of a manifest.
    ManifestStats(ManifestStatsArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Preset name or path to a JSON run configuration.
    #[arg(long)]
    pub config: String,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["audio", "manifest"])))]
pub struct TranscribeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub audio: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Comma-separated durations in seconds, ascending.
    #[arg(long, value_delimiter = ',', required = true)]
    pub durations: Vec<f64>,
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaxLengthArgs {
    #[arg(long)]
    pub config: String,
    /// Defaults to the configuration's budget.
    #[arg(long)]
    pub budget_bytes: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ref_file: PathBuf,
    #[arg(long)]
    pub hyp_file: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenWeightsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ManifestStatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

impl clap::ValueEnum for DecoderKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[DecoderKind::Ctc, DecoderKind::Rnnt]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            DecoderKind::Ctc => "ctc",
            DecoderKind::Rnnt => "rnnt",
        }))
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Builds the configured model with both heads, then optionally loads weights.
pub fn load_model(cfg: &RunConfig, seed: u64, weights_path: Option<&Path>) -> Result<EncoderModel> {
    let mut model = EncoderModel::build(&cfg.encoder, seed)?.attach_heads(cfg.heads, seed)?;
    if let Some(path) = weights_path {
        weights::load_into(&mut model, path)?;
    }
    Ok(model)
}

fn pipeline(args: &ModelArgs, weights_path: Option<&Path>) -> Result<(RunConfig, Pipeline)> {
    let cfg = RunConfig::resolve(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let model = load_model(&cfg, seed, weights_path)?;
    Ok((cfg, Pipeline::new(model, Vocab::characters())?))
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    audio_filepath: &'a str,
    text: &'a str,
    frontend_s: f64,
    encoder_s: f64,
    decoder_s: f64,
}

fn timing_line(t: &Transcription) -> String {
    format!(
        "timing frontend_s={:.6} encoder_s={:.6} decoder_s={:.6}",
        t.frontend_seconds, t.hypothesis.encoder_seconds, t.hypothesis.decode_seconds
    )
}

fn transcribe(args: &TranscribeArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, p) = pipeline(&args.model, args.weights.as_deref())?;
    let decoder = args.decoder.unwrap_or(cfg.decoder);
    if let Some(path) = &args.audio {
        let audio = read_wav(path)?;
        let t = p.transcribe(&audio, decoder)?;
        writeln!(out, "{}", t.hypothesis.text).map_err(stdout_err)?;
        writeln!(out, "{}", timing_line(&t)).map_err(stdout_err)?;
        return Ok(());
    }
    let manifest = args.manifest.as_deref().expect("clap requires audio or manifest");
    let base = manifest.parent().unwrap_or(Path::new(""));
    for entry in read_manifest(manifest)? {
        let audio = read_wav(base.join(&entry.audio_filepath))?;
        let t = p.transcribe(&audio, decoder)?;
        let line = ManifestLine {
            audio_filepath: &entry.audio_filepath,
            text: &t.hypothesis.text,
            frontend_s: t.frontend_seconds,
            encoder_s: t.hypothesis.encoder_seconds,
            decoder_s: t.hypothesis.decode_seconds,
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(out, "{json}").map_err(stdout_err)?;
    }
    Ok(())
}

fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, p) = pipeline(&args.model, args.weights.as_deref())?;
    let decoder = args.decoder.unwrap_or(cfg.decoder);
    let seed = args.model.seed.unwrap_or(cfg.seed);
    let report = sweep_rtf(&p, decoder, &args.durations, seed)?;
    weights::write_atomic(&args.out, report.to_csv().as_bytes())?;
    info!("wrote {} rows to {}", report.samples.len(), args.out.display());
    writeln!(out, "{} rows -> {}", report.samples.len(), args.out.display()).map_err(stdout_err)
}

fn max_length(args: &MaxLengthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::resolve(&args.config)?;
    let budget = args.budget_bytes.unwrap_or(cfg.budget_bytes);
    let seconds = find_max_duration(&cfg.encoder, budget)?;
    writeln!(out, "{seconds} {:.2}", seconds as f64 / 60.0).map_err(stdout_err)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Pooled WER over line pairs; pairs where both lines are blank are skipped.
pub fn score_lines(refs: &[String], hyps: &[String]) -> Result<WerBreakdown> {
    if refs.len() != hyps.len() {
        return Err(Error::Input(format!(
            "reference has {} lines, hypothesis has {}",
            refs.len(),
            hyps.len()
        )));
    }
    let parts = refs
        .iter()
        .zip(hyps)
        .filter(|(r, h)| !(r.trim().is_empty() && h.trim().is_empty()))
        .map(|(r, h)| wer(r, h))
        .collect::<Result<Vec<_>>>()?;
    WerBreakdown::combine(&parts)
}

fn score(args: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let b = score_lines(&read_lines(&args.ref_file)?, &read_lines(&args.hyp_file)?)?;
    writeln!(out, "{:.2}", b.wer * 100.0).map_err(stdout_err)
}

fn gen_weights(args: &GenWeightsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::resolve(&args.model.config)?;
    let model = load_model(&cfg, args.model.seed.unwrap_or(cfg.seed), None)?;
    weights::save(&model, &args.out)?;
    writeln!(out, "{} parameters -> {}", model.parameter_count(), args.out.display()).map_err(stdout_err)
}

fn stats(args: &ManifestStatsArgs, out: &mut dyn Write) -> Result<()> {
    let s = manifest_stats(&read_manifest(&args.manifest)?)?;
    writeln!(
        out,
        "{} {:.2} {:.2} {:.2}",
        s.count, s.min_minutes, s.max_minutes, s.mean_minutes
    )
    .map_err(stdout_err)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Transcribe(a) => transcribe(a, out),
        Command::Bench(a) => bench(a, out),
        Command::MaxLength(a) => max_length(a, out),
        Command::Score(a) => score(a, out),
        Command::GenWeights(a) => gen_weights(a, out),
        Command::ManifestStats(a) => stats(a, out),
    }
}
