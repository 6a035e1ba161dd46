use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use promptvc_core::audio::AudioClip;
use promptvc_core::eval::{evaluate, EvalConfig};
use promptvc_core::melfile::save_mel;
use promptvc_core::model::Model;
use promptvc_core::pipeline::{train, Checkpoint, Manifest, TrainConfig};
use promptvc_core::sampler::{ConversionRequest, Converter, SamplerConfig};
use promptvc_core::synth::write_corpus;

#[derive(Parser)]
#[command(name = "promptvc", version, about = "Zero-shot voice conversion with voice prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a source utterance to the voice of a target prompt.
    Convert {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `.wav` writes a phase-reconstructed preview; anything else the
        /// binary mel container.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Speaker-similarity and reconstruction report over a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6")]
        steps: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        sources_per_pair: usize,
    },
    /// Write the synthetic two-speaker corpus and its manifest.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        clips_per_speaker: usize,
        #[arg(long, default_value_t = 2)]
        dev_per_speaker: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { manifest, config, out } => {
            let manifest = Manifest::load(&manifest)?;
            let cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            let ck = train(&manifest, cfg, &out)?;
            println!("trained to step {}; checkpoint in {}", ck.step, out.display());
        }
        Command::Convert { source, target, steps, checkpoint, out, seed } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = Model::new(ck.config.model)?;
            let converter = Converter::new(&model, &ck.params, Default::default())?;
            let req = ConversionRequest {
                source: AudioClip::load_wav(&source)?,
                target: AudioClip::load_wav(&target)?,
                sampler: SamplerConfig::new(steps, seed)?,
            };
            let conv = converter.convert(&req)?;
            let is_wav = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if is_wav {
                converter.demo_waveform(&conv.mel)?.save_wav(&out)?;
            } else {
                save_mel(&conv.mel, &out)?;
            }
            println!("wrote {} frames to {}", conv.mel.frames(), out.display());
        }
        Command::Evaluate { manifest, checkpoint, steps, out, seed, sources_per_pair } => {
            if steps.is_empty() {
                bail!("--steps needs at least one value");
            }
            let manifest = Manifest::load(&manifest)?;
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let report = evaluate(&manifest, &ck, &EvalConfig { steps, seed, sources_per_pair })?;
            report.save(&out)?;
            for row in &report.rows {
                println!(
                    "steps {:>3}  mel_l1 {}  self_secs {}  cross_margin {}  win {}  failures {}",
                    row.steps,
                    fmt(row.mel_l1),
                    fmt(row.self_secs),
                    fmt(row.cross_margin),
                    fmt(row.cross_win_rate),
                    row.failures
                );
            }
        }
        Command::SynthCorpus { out, clips_per_speaker, dev_per_speaker, seed } => {
            let manifest = write_corpus(&out, clips_per_speaker, dev_per_speaker, seed)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}
