//! Command-line entry point: training, demo collection, evaluation, the
//! view-subset robustness matrix, and cross-architecture comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvq::arch::load_checkpoint;
use mvq::cem::CemConfig;
use mvq::config::TrainConfig;
use mvq::eval::{compare_architectures, evaluate, robustness_matrix, subset_from_label, EvalReport};
use mvq::render::DEFAULT_RESOLUTION;
use mvq::replay::EpisodeLogWriter;
use mvq::sim::Task;
use mvq::trainer::{collect_episode, mix, run_training, PolicySource};
use mvq::Error;

#[derive(Parser)]
#[command(name = "mvq", about = "Multi-view Q-learning for block manipulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override config keys, e.g. --set learning_rate=0.01
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Roll out scripted demonstrations into an episode log.
    CollectDemos {
        #[arg(long)]
        task: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
    },
    /// Measure a checkpoint's greedy success rate.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        episodes: usize,
        /// View subset label, e.g. "Shoulder+Left" (default: all views).
        #[arg(long)]
        views: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every view subset of a multi-view checkpoint.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare saved eval reports against the first one as baseline.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&PathBuf>) -> mvq::error::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn checkpoint_id(path: &PathBuf) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run(cli: Cli) -> mvq::error::Result<()> {
    match cli.command {
        Command::Train { config, set } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            for pair in &set {
                cfg.apply_set(pair)?;
            }
            cfg.validate()?;
            let summary = run_training(&cfg)?;
            println!(
                "trained {} steps over {} episodes; checkpoint {}, metrics {}",
                summary.steps_completed,
                summary.episodes_collected,
                summary.checkpoint_path.display(),
                summary.metrics_path.display(),
            );
        }
        Command::CollectDemos {
            task,
            episodes,
            out,
            seed,
            resolution,
        } => {
            if episodes == 0 {
                return Err(Error::Config("--episodes must be positive".into()));
            }
            let task_cfg = mvq::sim::TaskConfig::new(Task::from_tag(&task)?);
            let cem = CemConfig::default();
            let mut writer = EpisodeLogWriter::create(&out)?;
            let mut wins = 0usize;
            for i in 0..episodes {
                let ep = collect_episode(
                    PolicySource::Scripted,
                    &task_cfg,
                    &cem,
                    resolution,
                    false,
                    mix(seed, i as u64),
                )?;
                wins += ep.success as usize;
                writer.write_episode(&ep)?;
            }
            writer.finish()?;
            println!(
                "wrote {} episodes to {} ({} successes, {:.1}%)",
                episodes,
                out.display(),
                wins,
                wins as f64 / episodes as f64 * 100.0,
            );
        }
        Command::Eval {
            checkpoint,
            task,
            episodes,
            views,
            seed,
            out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let subset = views
                .map(|v| subset_from_label(&v, params.n_views))
                .transpose()?;
            let report = evaluate(
                &params,
                Task::from_tag(&task)?,
                episodes,
                subset.as_ref(),
                seed,
                &CemConfig::default(),
                &checkpoint_id(&checkpoint),
            )?;
            emit(&report.to_csv(), out.as_ref())?;
        }
        Command::Robustness {
            checkpoint,
            task,
            episodes,
            seed,
            out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let report = robustness_matrix(
                &params,
                Task::from_tag(&task)?,
                episodes,
                seed,
                &CemConfig::default(),
                &checkpoint_id(&checkpoint),
            )?;
            emit(&report.to_csv(), out.as_ref())?;
        }
        Command::Compare { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| EvalReport::load(p))
                .collect::<mvq::error::Result<Vec<_>>>()?;
            emit(&compare_architectures(&loaded)?, out.as_ref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
