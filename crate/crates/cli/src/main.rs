use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cfsum::data::{load_manifest, load_sample, synth_generate, SynthConfig};
use cfsum::gradcheck::{run_suite, TOLERANCE};
use cfsum::model::ModalitySet;
use cfsum::run::{load_checkpoint, parse_config, run_eval, run_train, RunConfig};

#[derive(Parser)]
#[command(name = "cfsum", version, about = "Multi-modal clip saliency: train, evaluate and inspect models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal synthetic dataset.
    Synth {
        /// SynthConfig JSON; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoint, epoch log and report to output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Evaluate a checkpoint on the configured validation data.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print per-clip scores for one sample of a manifest.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest containing the sample.
        #[arg(long)]
        sample: PathBuf,
        /// Sample id; the first record when omitted.
        #[arg(long)]
        id: Option<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Ablation {
    /// Enabled modalities: v, va, vt or vat.
    #[arg(long)]
    modalities: Option<ModalitySet>,
    #[arg(long)]
    no_fusion_module: bool,
    #[arg(long)]
    no_interaction_module: bool,
    #[arg(long)]
    no_autoencoder: bool,
}

impl Ablation {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.modalities {
            cfg.model.enabled_modalities = m;
        }
        cfg.model.use_fusion &= !self.no_fusion_module;
        cfg.model.use_interaction &= !self.no_interaction_module;
        cfg.model.use_autoencoder &= !self.no_autoencoder;
    }
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Runtime(anyhow::Error),
    Config(anyhow::Error),
    Gradcheck(usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let is_config = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<cfsum::Error>(),
                Some(cfsum::Error::Config(_) | cfsum::Error::Json { .. })
            )
        });
        if is_config {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<cfsum::Error> for Failure {
    fn from(e: cfsum::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn init_logging() {
    let level = match std::env::var("CFSUM_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn load_run_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(Failure::from)
}

fn cmd_synth(config: Option<&Path>, out: &Path, force: bool) -> Result<(), Failure> {
    let cfg: SynthConfig = match config {
        None => SynthConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config(&text).with_context(|| format!("parsing {}", path.display()))?
        }
    };
    cfg.validate()?;
    if !force && out.is_dir() && fs::read_dir(out).context("listing --out")?.next().is_some() {
        return Err(Failure::Config(anyhow::anyhow!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let ds = synth_generate(&cfg)?;
    let n = ds.write(out)?;
    println!("wrote {n} files to {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, ablation: &Ablation) -> Result<(), Failure> {
    let mut cfg = load_run_config(config)?;
    ablation.apply(&mut cfg);
    cfg.validate()?;
    log::info!(
        "training {} ({} epochs, config {})",
        cfg.model.enabled_modalities.letters(),
        cfg.train.epochs,
        cfg.config_hash()
    );
    let outcome = run_train(&cfg)?;
    if let Some(last) = outcome.history.last() {
        println!("final train_loss {:.6}", last.train_loss);
    }
    if let Some(report) = &outcome.report {
        print!("{}", report.table());
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let cfg = load_run_config(config)?;
    let report = run_eval(&cfg, checkpoint)?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_predict(checkpoint: &Path, manifest: &Path, id: Option<&str>) -> Result<(), Failure> {
    let model = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest)?;
    let record = match id {
        Some(id) => manifest.records.iter().find(|r| r.sample_id == id),
        None => manifest.records.first(),
    };
    let Some(record) = record else {
        return Err(Failure::Runtime(anyhow::anyhow!("no matching sample in {}", manifest.root.display())));
    };
    let sample = load_sample(&manifest, record)?;
    let active = model.config().enabled_modalities.intersect(ModalitySet {
        video: true,
        audio: sample.audio.is_some(),
        text: sample.text.is_some(),
    });
    let pred = model.predict_with(&sample, active)?;
    println!("# {} ({})", sample.sample_id, active.letters());
    println!("clip\tscore\tvalid");
    for (i, (s, v)) in pred.scores.iter().zip(&pred.valid).enumerate() {
        println!("{i}\t{s:.6}\t{}", u8::from(*v));
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), Failure> {
    let results = run_suite(seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:4} {:<34} max_rel_err {:.3e} ({} coords)", r.name, r.max_rel_error, r.n_coords);
        failed += usize::from(!r.passed());
    }
    println!("{} checks, {failed} failed (tolerance {TOLERANCE:e})", results.len());
    if failed > 0 {
        return Err(Failure::Gradcheck(failed));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Synth { config, out, force } => cmd_synth(config.as_deref(), out, *force),
        Command::Train { config, ablation } => cmd_train(config, ablation),
        Command::Eval { config, checkpoint } => cmd_eval(config, checkpoint),
        Command::Predict { checkpoint, sample, id } => cmd_predict(checkpoint, sample, id.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Gradcheck(n)) => {
            eprintln!("gradcheck: {n} checks failed");
            ExitCode::from(3)
        }
    }
}
