use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rarelab_cli::store::ROOT_ENV;
use rarelab_cli::{Pipeline, RunConfig, StageOut, Store};

/// One-shot rare-entity synthesis on a procedural lesion corpus.
///
/// Every stage runs its upstream stages first unless their artifacts already
/// exist for the same configuration.
#[derive(Parser, Debug)]
#[command(name = "rarelab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact store root.
    #[arg(long, global = true, env = ROOT_ENV, default_value = "rarelab-runs")]
    root: PathBuf,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the image-report corpus and the rare exemplars.
    Corpus,
    /// Train the denoiser and text encoder on the corpus.
    Pretrain,
    /// Joint denoising and attribute-alignment training.
    Align,
    /// Learn prototype embeddings for the rare classes.
    Invert {
        /// Rare class name; repeat for several (default: all).
        #[arg(long = "class")]
        classes: Vec<String>,
    },
    /// Generate images for each ablation and replicate seed.
    Synthesize {
        /// Images per class and replicate.
        #[arg(long)]
        n: Option<usize>,
        /// Ablation name (pse_only, tle_only, pse_tle, full); repeat or comma-separate.
        #[arg(long = "ablation", value_delimiter = ',')]
        ablations: Vec<String>,
        #[arg(long = "class")]
        classes: Vec<String>,
    },
    /// Identity recovery, diversity, consistency and FID per generated set.
    Eval,
    /// Train and score the downstream classifier per augmentation strategy.
    Bench {
        /// Comma-separated: real, traditional, or an ablation name.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
    /// Reader-study statistics.
    Stats {
        /// Reader records CSV (default: the built-in table).
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Reader statistics plus the ablation diversity ordering.
    Reproduce,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn report(out: &StageOut) {
    println!("{} {} -> {}", out.manifest.stage, out.fingerprint(), out.dir.display());
    if !out.manifest.metrics.is_null() {
        println!("{}", serde_json::to_string_pretty(&out.manifest.metrics).unwrap_or_default());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let mut classes = Vec::new();
    match &cli.command {
        Command::Invert { classes: c } => classes = c.clone(),
        Command::Synthesize { n, ablations, classes: c } => {
            if let Some(n) = n {
                cfg.synthesize.n = *n;
            }
            if !ablations.is_empty() {
                cfg.synthesize.ablations = ablations.clone();
            }
            classes = c.clone();
        }
        Command::Bench { strategies } if !strategies.is_empty() => cfg.bench.strategies = strategies.clone(),
        _ => {}
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut p = Pipeline::new(cfg, Store::new(&cli.common.root))?;
    p.classes = classes;
    match cli.command {
        Command::Corpus => report(&p.corpus()?),
        Command::Pretrain => report(&p.pretrain()?),
        Command::Align => report(&p.align()?),
        Command::Invert { .. } => report(&p.invert()?),
        Command::Synthesize { .. } => report(&p.synthesize()?),
        Command::Eval => {
            let ev = p.evaluate()?;
            report(&ev);
            print!("{}", std::fs::read_to_string(ev.dir.join("metrics.csv"))?);
        }
        Command::Bench { .. } => report(&p.bench()?),
        Command::Stats { records } => {
            let st = p.stats(records.as_deref())?;
            report(&st);
            print!("{}", std::fs::read_to_string(st.dir.join("reader_report.txt"))?);
        }
        Command::Reproduce => {
            let (_, _, text) = p.reproduce()?;
            print!("{text}");
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
