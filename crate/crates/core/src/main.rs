use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use enflow::config::{Overrides, RunConfig};
use enflow::pipeline::{
    run_ablation, run_certify, run_eval, run_gen, run_sample, run_train, CHECKPOINT_FILE,
    GENERATED_FILE,
};
use enflow::sampling::CertMode;

#[derive(Parser)]
#[command(name = "enflow", version, about = "Energy-guided flow matching for conformer ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen(Common),
    /// Train the vector-field and energy networks.
    Train(Common),
    /// Sample ensembles for the configured split.
    Sample(Common),
    /// Predict ground-state conformations.
    Certify(Common),
    /// Score generated ensembles against the references.
    Eval(Common),
    /// Coverage and AMR over step counts, amplitudes and thresholds.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Sampler steps for sample, certify and eval.
    #[arg(long)]
    steps: Option<usize>,
    /// Constant guidance amplitude.
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    mode: Option<CertMode>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    /// RMSD threshold for coverage.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    guided: Option<bool>,
    /// Dataset file (defaults to dataset.jsonl in the output directory).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint file (defaults to checkpoint.json in the output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generated ensembles to evaluate (defaults to generated.jsonl in the output directory).
    #[arg(long)]
    generated: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> enflow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            workers: self.workers,
            dataset: self.dataset.clone(),
            steps: self.steps,
            amplitude: self.amplitude,
            mode: self.mode,
            ensemble_size: self.ensemble_size,
            delta: self.delta,
            guided: self.guided,
        });
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
    }
}

fn run(cli: Cli) -> enflow::Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let path = run_gen(&c.resolve()?)?;
            println!("{}", path.display());
        }
        Command::Train(c) => {
            let art = run_train(&c.resolve()?)?;
            println!("{}\n{}", art.checkpoint.display(), art.history.display());
        }
        Command::Sample(c) => {
            let cfg = c.resolve()?;
            println!("{}", run_sample(&cfg, &c.checkpoint(&cfg))?.display());
        }
        Command::Certify(c) => {
            let cfg = c.resolve()?;
            let art = run_certify(&cfg, &c.checkpoint(&cfg))?;
            println!("{}\n{}", art.predictions.display(), art.report.display());
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let generated = c
                .generated
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(GENERATED_FILE));
            let art = run_eval(&cfg, &cfg.dataset_path(), &generated)?;
            println!("{}\n{}", art.csv.display(), art.json.display());
        }
        Command::Ablate(c) => {
            let cfg = c.resolve()?;
            println!("{}", run_ablation(&cfg, &c.checkpoint(&cfg))?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ENFLOW_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
