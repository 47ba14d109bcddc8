use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use camtl::analysis::{parameter_report, CovSimForm, TruncationRule};
use camtl::harness::{self, checkpoint, ExperimentConfig, HarnessError, Split};
use camtl::sampler::Policy;

#[derive(Parser)]
#[command(name = "camtl", version, about = "Train and inspect task-conditioned multi-task transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its tasks.
    Eval(EvalArgs),
    /// Pairwise task covariance similarity of a checkpoint.
    Covsim(CovsimArgs),
    /// Parameter accounting of the configured model.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// mt_uncertainty, random or task_size.
    #[arg(long)]
    sampler: Option<Policy>,
    /// Also log every sampler step.
    #[arg(long)]
    policy_trace: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tasks to evaluate; defaults to the checkpoint's own config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    split: Split,
}

#[derive(Args)]
struct CovsimArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    split: Split,
    /// Keep 99% of the non-zero directions by count instead of by
    /// spectral mass.
    #[arg(long)]
    count_rule: bool,
    /// Use the unnormalized factor-norm form.
    #[arg(long)]
    factor_norm: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment config or checkpoint.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn read_config(path: &Path) -> harness::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ExperimentConfig::from_json(&text)
}

fn write_out(path: Option<&Path>, body: &str) -> harness::Result<()> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| HarnessError::Io {
            path: p.to_path_buf(),
            message: e.to_string(),
        }),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn run(cli: Cli) -> harness::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = read_config(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(d) = a.out_dir {
                cfg.out_dir = Some(d);
            }
            if let Some(p) = a.sampler {
                cfg.sampler.policy = p;
            }
            cfg.policy_trace |= a.policy_trace;
            let out = harness::train(&cfg)?;
            let last = out.final_record();
            log::info!(
                "finished {} steps: mean dev score {:.2}, {:.1}% of drawn examples used",
                cfg.steps,
                last.mean_score,
                last.data_used_pct
            );
            print!("{}", json(last));
        }
        Command::Eval(a) => {
            let (own, model) = checkpoint::load(&a.checkpoint)?;
            let cfg = match a.config {
                Some(p) => read_config(&p)?,
                None => own,
            };
            let tasks = harness::load_tasks(&cfg)?;
            print!("{}", json(&harness::evaluate(&model, &tasks, a.split)?));
        }
        Command::Covsim(a) => {
            let (own, model) = checkpoint::load(&a.checkpoint)?;
            let cfg = match a.config {
                Some(p) => read_config(&p)?,
                None => own,
            };
            let tasks = harness::load_tasks(&cfg)?;
            let rule = if a.count_rule { TruncationRule::Count } else { TruncationRule::Mass };
            let form = if a.factor_norm { CovSimForm::FactorNorm } else { CovSimForm::Cosine };
            let report = harness::task_covsim(&model, &tasks, a.split, rule, form)?;
            write_out(a.out.as_deref(), &report.to_csv())?;
        }
        Command::Report(a) => {
            let model = match (a.config, a.checkpoint) {
                (_, Some(p)) => checkpoint::load(&p)?.1,
                (Some(p), None) => {
                    let cfg = read_config(&p)?;
                    let seed = a.seed.unwrap_or(cfg.seed);
                    camtl::model::CaMtlModel::new(cfg.model.clone(), &cfg.task_kinds(), seed)?
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            print!("{}", json(&parameter_report(&model)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
