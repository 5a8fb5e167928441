use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egohdm::pipeline::{run_eval, run_pipeline, run_sim, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "egohdm", version, about = "Egocentric human localization and dense mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Sim(Common),
    /// Run the pipeline on a dataset; outputs go to --out.
    Run {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the outputs in --out against the dataset's ground truth.
    Eval {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// sim, run and eval in one go: --out/dataset and --out/output.
    All(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    no_mocap_constraints: bool,
    #[arg(long)]
    no_physics: bool,
    #[arg(long)]
    no_plane_term: bool,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.ablation.mocap_constraints &= !self.no_mocap_constraints;
        cfg.ablation.physics &= !self.no_physics;
        cfg.ablation.plane_term &= !self.no_plane_term;
        Ok(cfg)
    }
}

fn make_dir(p: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(p).map_err(|source| PipelineError::Output { path: p.to_path_buf(), source })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Sim(c) => {
            let cfg = c.config()?;
            make_dir(&c.out)?;
            run_sim(&cfg, &c.out)
        }
        Command::Run { dataset, common } => {
            let cfg = common.config()?;
            make_dir(&common.out)?;
            let out = run_pipeline(&dataset, &cfg, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&out.stats).expect("plain struct"));
            Ok(())
        }
        Command::Eval { dataset, common } => {
            let report = run_eval(&common.out, &dataset)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("plain struct"));
            Ok(())
        }
        Command::All(c) => {
            let cfg = c.config()?;
            let (data, output) = (c.out.join("dataset"), c.out.join("output"));
            make_dir(&data)?;
            make_dir(&output)?;
            run_sim(&cfg, &data)?;
            run_pipeline(&data, &cfg, &output)?;
            let report = run_eval(&output, &data)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("plain struct"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("EGOHDM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("cannot limit workers to {n}: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
