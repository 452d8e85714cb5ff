use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use golo_core::data::{generate_dataset, load_dataset, save_dataset, DatasetSpec};
use golo_core::harness::{evaluate_ap, gradcheck_module, load_checkpoint, run_checks, train, Config, Suite};
use golo_core::Error;

#[derive(Parser)]
#[command(name = "golo", version, about = "Two-stage query detector on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, writing metrics.jsonl and checkpoint.golo.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint; its stored config takes precedence.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        score_thresh: f64,
    },
    /// Write a synthetic dataset described by a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a self-check suite and print a JSON report.
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient check of one module.
    Gradcheck {
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const CHECK_FAILED: u8 = 1;
const CONFIG_ERROR: u8 = 2;
const RUNTIME_ABORT: u8 = 3;

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Parse { .. } => ExitCode::from(CONFIG_ERROR),
        _ => ExitCode::from(RUNTIME_ABORT),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let mut cfg = Config::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir));
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let summary = train(&cfg, &out, resume)?;
            println!(
                "trained {} steps; log {}; checkpoint {}",
                summary.steps,
                summary.log_path.display(),
                summary.checkpoint_path.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            score_thresh,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            if dataset.scenes.is_empty() {
                return Err(Error::Input(format!("dataset {} has no images", data.display())));
            }
            let detector = ckpt.detector()?;
            let result = evaluate_ap(&detector, &ckpt.params, &dataset.scenes, score_thresh)?;
            println!("{}", serde_json::to_string_pretty(&result).expect("plain struct"));
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
            let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            spec.scene.validate()?;
            let scenes = generate_dataset(&spec)?;
            let manifest = save_dataset(&out, &scenes)?;
            println!(
                "wrote {} images and {} annotations to {}",
                manifest.images.len(),
                manifest.annotations.len(),
                out.display()
            );
        }
        Command::Check { suite, seed } => {
            let report = run_checks(suite.parse::<Suite>()?, seed);
            println!("{}", report.to_json());
            if !report.passed {
                return Ok(ExitCode::from(CHECK_FAILED));
            }
        }
        Command::Gradcheck { module, seed } => {
            let result = gradcheck_module(&module, seed)?;
            println!("{}", serde_json::to_string_pretty(&result).expect("plain struct"));
            if !result.passed {
                return Ok(ExitCode::from(CHECK_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => fail(e),
    }
}
