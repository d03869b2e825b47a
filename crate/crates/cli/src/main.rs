//! Reproducible pipeline runs: synthesize a corpus, build vocabularies,
//! train the augmentation model, generate augmented data, train the
//! translation model, and evaluate. All randomness flows from --seed; every
//! artifact records the resolved config hash.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use docaug_core::corpus::Unit;
use docaug_core::latent::{Direction, Mode};

use config::{Overrides, RunConfig};

/// Exit codes: 0 success, 1 validation error, 2 runtime fault.
pub enum CmdError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

#[derive(Parser)]
#[command(
    name = "docaug",
    version,
    about = "Target-side data augmentation pipeline for document translation"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random decision of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap (0 or absent: library default).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Translation unit: sentence | document.
    #[arg(long, global = true)]
    unit: Option<String>,

    /// Generation conditioning: posterior | prior.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Augmented side: target | source | both.
    #[arg(long, global = true)]
    direction: Option<String>,

    /// Generated translations per instance (M).
    #[arg(long, global = true)]
    m: Option<usize>,

    /// Beam size for generation.
    #[arg(long, global = true)]
    beam: Option<usize>,

    /// Observed-ratio Beta parameters as "a,b".
    #[arg(long, global = true)]
    beta: Option<String>,

    /// Latent n-gram length range as "lo,hi".
    #[arg(long, global = true)]
    ngram: Option<String>,

    /// Train the translation model on generated pairs only.
    #[arg(long, global = true)]
    drop_gold: bool,

    /// Draw fresh latents at augmentation time instead of reusing the
    /// training draws.
    #[arg(long, global = true)]
    resample_z: bool,

    /// Re-hash inputs and refuse to run on any provenance mismatch.
    #[arg(long, global = true)]
    verify: bool,

    /// Rebase default artifact paths under this directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Suppress per-epoch progress lines.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic synonym corpus (train/dev/test + multiref).
    MakeSynth,
    /// Build vocabulary file(s) from the training corpus.
    BuildVocab,
    /// Train the augmentation model and write its checkpoint.
    TrainDa,
    /// Generate the augmented corpus with the trained augmentation model.
    Augment,
    /// Train the translation model on an augmented corpus.
    TrainMt,
    /// Score translations: s-BLEU/d-BLEU, and deviation/diversity of an
    /// augmented corpus.
    Evaluate {
        /// Hypothesis corpus (JSONL); defaults to translating with the MT
        /// checkpoint.
        #[arg(long)]
        hyp: Option<PathBuf>,
        /// Reference corpus (JSONL); defaults to paths.test.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Augmented corpus to score for deviation/diversity.
        #[arg(long)]
        augmented: Option<PathBuf>,
        /// Write the (translated) hypothesis corpus here.
        #[arg(long)]
        save_hyp: Option<PathBuf>,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated Monte-Carlo perplexity on the multi-reference set.
    PplEval {
        /// Latent samples per (observed reference, test reference) cell.
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn parse_pair<T: std::str::FromStr>(text: &str, what: &str) -> Result<(T, T), anyhow::Error> {
    let mut parts = text.split(',');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) => {
            let a = a.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what}: {text}"))?;
            let b = b.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what}: {text}"))?;
            Ok((a, b))
        }
        _ => Err(anyhow::anyhow!("{what} expects two comma-separated values, got {text}")),
    }
}

fn overrides_from(args: &CommonArgs) -> Result<Overrides, anyhow::Error> {
    let unit = match args.unit.as_deref() {
        None => None,
        Some("sentence") => Some(Unit::Sentence),
        Some("document") => Some(Unit::Document),
        Some(other) => anyhow::bail!("--unit must be sentence|document, got {other}"),
    };
    let mode = match args.mode.as_deref() {
        None => None,
        Some("posterior") => Some(Mode::Posterior),
        Some("prior") => Some(Mode::Prior),
        Some(other) => anyhow::bail!("--mode must be posterior|prior, got {other}"),
    };
    let direction = match args.direction.as_deref() {
        None => None,
        Some("target") => Some(Direction::Target),
        Some("source") => Some(Direction::Source),
        Some("both") => Some(Direction::Both),
        Some(other) => anyhow::bail!("--direction must be target|source|both, got {other}"),
    };
    Ok(Overrides {
        seed: args.seed,
        threads: args.threads,
        unit,
        mode,
        direction,
        m: args.m,
        beam: args.beam,
        beta: args.beta.as_deref().map(|t| parse_pair(t, "--beta")).transpose()?,
        ngram: args.ngram.as_deref().map(|t| parse_pair(t, "--ngram")).transpose()?,
        drop_gold: args.drop_gold,
        resample_z: args.resample_z,
        out_dir: args.out_dir.clone(),
    })
}

fn run(cli: &Cli) -> Result<(), CmdError> {
    let overrides = overrides_from(&cli.common).map_err(CmdError::Validation)?;
    let cfg =
        RunConfig::load(cli.common.config.as_deref(), &overrides).map_err(CmdError::Validation)?;
    if cfg.threads > 0 {
        // ignore failure: the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let verbose = !cli.common.quiet;
    match &cli.command {
        Command::MakeSynth => commands::cmd_make_synth(&cfg),
        Command::BuildVocab => commands::cmd_build_vocab(&cfg),
        Command::TrainDa => commands::cmd_train_da(&cfg, verbose),
        Command::Augment => commands::cmd_augment(&cfg, cli.common.verify),
        Command::TrainMt => commands::cmd_train_mt(&cfg, cli.common.verify, verbose),
        Command::Evaluate { hyp, reference, augmented, save_hyp, out } => commands::cmd_evaluate(
            &cfg,
            &commands::EvaluateArgs {
                hyp: hyp.clone(),
                reference: reference.clone(),
                augmented: augmented.clone(),
                save_hyp: save_hyp.clone(),
                out: out.clone(),
            },
        ),
        Command::PplEval { samples } => commands::cmd_ppl_eval(&cfg, *samples),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes; anything else is a
            // validation failure
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CmdError::Runtime(e)) => {
            eprintln!("runtime fault: {e:#}");
            ExitCode::from(2)
        }
    }
}
