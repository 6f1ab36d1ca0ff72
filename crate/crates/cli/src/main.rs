mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use speakerssl::trainers::{Framework, LossKind};
use speakerssl::Error;

use crate::commands::{EvalPaths, HELDOUT_MANIFEST, TRAIN_MANIFEST, TRIALS};
use crate::config::{key_reference, RunConfig, CONFIG_ENV};

#[derive(Parser, Debug)]
#[command(
    name = "speakerssl",
    version,
    about = "Self-supervised speaker embeddings with additive-margin contrastive losses",
    after_long_help = key_reference()
)]
struct Cli {
    /// TOML run configuration [env: SPEAKERSSL_CONFIG]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for feature extraction and scoring, 0 = all cores
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, manifests and a balanced trial list
    GenData(GenDataArgs),
    /// Train an encoder with SimCLR or MoCo
    Train(TrainArgs),
    /// Score a trial list and report EER and minDCF
    Evaluate(EvalArgs),
    /// Print the effective configuration as TOML
    ShowConfig,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory (overrides `paths.data_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_speakers: Option<usize>,
    #[arg(long)]
    heldout_speakers: Option<usize>,
    #[arg(long)]
    utts_per_speaker: Option<usize>,
    #[arg(long)]
    n_trials: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training manifest (default: <data_dir>/train_manifest.txt)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (overrides `paths.run_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_parser = parse_framework)]
    framework: Option<Framework>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    margin: Option<f64>,
    /// Symmetric loss over all 2N views (`--symmetric false` for the plain form)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    symmetric: Option<bool>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    queue_size: Option<usize>,
    #[arg(long)]
    ema: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    prevent_collisions: Option<bool>,
    #[arg(long)]
    cap_per_speaker: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint (default: <run_dir>/last.ckpt)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest of the trial utterances (default: <data_dir>/heldout_manifest.txt)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Trial list (default: <data_dir>/trials.txt)
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Report directory (overrides `paths.eval_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write `<score> <enroll> <test>` per trial
    #[arg(long)]
    export_scores: Option<PathBuf>,
    /// Write a score histogram CSV with class means
    #[arg(long)]
    export_dist: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

fn parse_framework(s: &str) -> Result<Framework, String> {
    match s {
        "simclr" => Ok(Framework::Simclr),
        "moco" => Ok(Framework::Moco),
        _ => Err("expected `simclr` or `moco`".into()),
    }
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "nt-xent" => Ok(LossKind::NtXent),
        "nt-xent-am" => Ok(LossKind::NtXentAm),
        _ => Err("expected `nt-xent` or `nt-xent-am`".into()),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    macro_rules! set {
        ($($src:expr => $dst:expr),* $(,)?) => {
            {$(if let Some(v) = $src.clone() { $dst = v; })*}
        };
    }
    match &cli.command {
        Command::GenData(a) => set!(
            a.out => cfg.paths.data_dir,
            a.train_speakers => cfg.data.train_speakers,
            a.heldout_speakers => cfg.data.heldout_speakers,
            a.utts_per_speaker => cfg.data.utts_per_speaker,
            a.n_trials => cfg.data.n_trials,
        ),
        Command::Train(a) => {
            set!(
                a.out => cfg.paths.run_dir,
                a.framework => cfg.train.framework,
                a.loss => cfg.train.loss,
                a.margin => cfg.train.margin,
                a.symmetric => cfg.train.symmetric,
                a.tau => cfg.train.tau,
                a.batch_size => cfg.train.batch_size,
                a.epochs => cfg.train.epochs,
                a.lr => cfg.train.lr,
                a.queue_size => cfg.train.queue_size,
                a.ema => cfg.train.ema,
                a.hidden => cfg.train.hidden,
                a.embed_dim => cfg.train.embed_dim,
                a.prevent_collisions => cfg.train.prevent_collisions,
            );
            if a.cap_per_speaker.is_some() {
                cfg.train.cap_per_speaker = a.cap_per_speaker;
            }
        }
        Command::Evaluate(a) => set!(a.out => cfg.paths.eval_dir),
        Command::ShowConfig => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| Error::Config(format!("workers: {e}")))?;
    let data = cfg.paths.data_dir.clone();
    let or = |p: &Option<PathBuf>, d: PathBuf| p.clone().unwrap_or(d);
    match &cli.command {
        Command::GenData(_) => {
            commands::gen_data(&cfg, &data)?;
            println!("wrote corpus to {}", data.display());
        }
        Command::Train(a) => {
            let manifest = or(&a.manifest, data.join(TRAIN_MANIFEST));
            let last = commands::train(&cfg, &manifest, &cfg.paths.run_dir, a.resume.as_deref())?;
            println!("checkpoint: {}", last.display());
        }
        Command::Evaluate(a) => {
            let checkpoint = or(&a.checkpoint, cfg.paths.run_dir.join("last.ckpt"));
            let manifest = or(&a.manifest, data.join(HELDOUT_MANIFEST));
            let trials = or(&a.trials, data.join(TRIALS));
            let report = commands::run_evaluate(
                &cfg,
                &EvalPaths {
                    checkpoint: &checkpoint,
                    manifest: &manifest,
                    trials: &trials,
                    out: &cfg.paths.eval_dir,
                    export_scores: a.export_scores.as_deref(),
                    export_dist: a.export_dist.as_deref(),
                    bins: a.bins,
                },
            )?;
            print!("{}", report.summary());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
