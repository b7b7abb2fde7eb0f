use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soundssl::config::{ConfigError, ExperimentConfig};
use soundssl::dataset::{synth_corpus, DatasetError, SynthConfig};
use soundssl::experiment::{ExperimentError, Failure};
use soundssl::pipeline;

#[derive(Parser)]
#[command(name = "soundssl", version, about = "Self-supervised pretraining and evaluation for sound classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment TOML (synth: corpus TOML, optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (synth: corpus directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tone/chirp/pulse corpus and its manifest.
    Synth(Common),
    /// Cache spectrograms and write the train/test/fold split.
    Prepare(Common),
    /// SSL pretraining per fold (no-op unless init is ssl-*).
    Pretrain(Common),
    /// Supervised fine-tuning per fold.
    Finetune(Common),
    /// Test metrics, silhouette and feature dump.
    Evaluate(Common),
    /// Run prepare, pretrain, finetune and evaluate in order.
    Run(Common),
    /// Paired t-test between two evaluated configs.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Second experiment TOML.
        #[arg(long)]
        against: PathBuf,
    },
}

enum CliError {
    Config(String),
    Data(String),
    Experiment(ExperimentError),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Experiment(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    load_config_at(path, common.seed)
}

fn load_config_at(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn synth(common: &Common) -> Result<(), CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("synth_corpus"));
    let manifest = synth_corpus(&cfg, &out).map_err(|e| match e {
        DatasetError::InvalidArgument(m) => CliError::Config(m),
        e => CliError::Data(e.to_string()),
    })?;
    println!("{} clips in {} classes -> {}", manifest.len(), manifest.classes.len(), out.join("manifest.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => synth(&c)?,
        Command::Prepare(c) => {
            let s = pipeline::cmd_prepare(&load_config(&c)?, &out_dir(&c))?;
            println!(
                "{} clips ({} cached, {} computed) -> {}",
                s.clips,
                s.cache.hits,
                s.cache.misses,
                s.run_dir.display()
            );
        }
        Command::Pretrain(c) => {
            let run = pipeline::cmd_pretrain(&load_config(&c)?, &out_dir(&c))?;
            println!("pretrain -> {}", run.display());
        }
        Command::Finetune(c) => {
            let run = pipeline::cmd_finetune(&load_config(&c)?, &out_dir(&c))?;
            println!("finetune -> {}", run.display());
        }
        Command::Evaluate(c) => print_report(&pipeline::cmd_evaluate(&load_config(&c)?, &out_dir(&c))?),
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let out = out_dir(&c);
            pipeline::cmd_prepare(&cfg, &out)?;
            pipeline::cmd_pretrain(&cfg, &out)?;
            pipeline::cmd_finetune(&cfg, &out)?;
            print_report(&pipeline::cmd_evaluate(&cfg, &out)?);
        }
        Command::Compare { common, against } => {
            let a = load_config(&common)?;
            let b = load_config_at(&against, common.seed)?;
            let r = pipeline::cmd_compare(&a, &b, &out_dir(&common))?;
            println!(
                "{} vs {}: mean difference {:+.4}, t = {:.4}, p = {:.4} ({})",
                r.a.init.name(),
                r.b.init.name(),
                r.a_mean_minus_b_mean,
                r.ttest.t,
                r.ttest.p_value,
                if r.ttest.reject { "reject at 0.05" } else { "no rejection at 0.05" }
            );
        }
    }
    Ok(())
}

fn print_report(r: &soundssl::experiment::MetricsReport) {
    for f in &r.folds {
        match (f.test_balanced_accuracy, &f.error) {
            (Some(b), _) => println!("fold {}: balanced accuracy {b:.4}", f.fold),
            (None, Some(e)) => println!("fold {}: failed ({e})", f.fold),
            (None, None) => println!("fold {}: not evaluated", f.fold),
        }
    }
    if let Some(s) = &r.balanced_accuracy {
        println!("balanced accuracy {:.4} ± {:.4} over {} folds", s.mean, s.std, s.n);
    }
    if let Some(s) = r.silhouette {
        println!("silhouette {s:.4}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Config(m) => (Failure::Config, m),
                CliError::Data(m) => (Failure::Data, m),
                CliError::Experiment(e) => (e.failure(), e.to_string()),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
