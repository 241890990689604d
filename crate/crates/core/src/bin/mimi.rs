use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mimi::analysis::{compare, compare_kl, identity_regime_case, write_comparison_csv, write_kl_csv};
use mimi::checkpoint::{load_checkpoint, read_manifest};
use mimi::config::RunConfig;
use mimi::cost::{allocation_report, cost_report, write_allocation_csv, write_cost_csv};
use mimi::runner::{reproducible_from_env, train, Mode, TrainOptions};
use mimi::scoring::{ScorerKind, SelectionMode};
use mimi::verify::{checkpoint_roundtrip_suite, cycle_formula_suite, gradcheck_suite, prune_equivalence_suite};
use mimi::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "mimi", version, about = "Adapter training and neuron pruning for a toy vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters as described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "mimi")]
        mode: ModeArg,
        #[arg(long, default_value = "mimi")]
        scorer: ScorerKind,
        #[arg(long, value_enum, default_value = "global")]
        selection: SelectionArg,
    },
    /// Cost and allocation tables of a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokens: Option<usize>,
        /// Write cost.csv and allocation.csv here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a self-check suite; exits non-zero on failure.
    Verify {
        #[arg(value_enum, default_value = "all")]
        suite: Suite,
    },
    /// Closed-form Gaussian statistics and KL against Monte-Carlo sampling.
    Gaussian {
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Neuron importance scores of a checkpoint as CSV.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "mimi")]
        scorer: ScorerKind,
        /// Run config supplying data for the grad and act scorers.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mimi,
    Vanilla,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Global,
    Local,
    LocalDw,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    All,
    Gradcheck,
    PruneEquiv,
    CycleFormula,
    CheckpointRoundtrip,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            seed,
            mode,
            scorer,
            selection,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let opts = TrainOptions {
                mode: match mode {
                    ModeArg::Mimi => Mode::Mimi,
                    ModeArg::Vanilla => Mode::Vanilla,
                },
                scorer,
                selection: match selection {
                    SelectionArg::Global => SelectionMode::Global,
                    SelectionArg::Local => SelectionMode::Local,
                    SelectionArg::LocalDw => SelectionMode::LocalDw,
                },
                seed,
                reproducible: reproducible_from_env(),
            };
            let outcome = train(&cfg, &opts)?;
            if let Some(last) = outcome.cycles.last() {
                println!(
                    "{} cycles, sigma {}, test accuracy {:.4}, output in {}",
                    outcome.cycles.len(),
                    last.sigma_after,
                    last.test_acc,
                    outcome.output_dir.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { checkpoint, tokens, out } => {
            match read_manifest(&checkpoint)?.dtype.as_str() {
                "f64" => report::<f64>(&checkpoint, tokens, out.as_deref())?,
                _ => report::<f32>(&checkpoint, tokens, out.as_deref())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite } => verify(suite),
        Command::Gaussian { m, n, seed, samples } => {
            let (adapter, input) = identity_regime_case(m, n, seed)?;
            let mut stdout = io::stdout().lock();
            write_comparison_csv(&compare(&adapter, &input, samples, seed)?, &mut stdout)?;
            writeln!(stdout).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })?;
            write_kl_csv(&compare_kl(&adapter, &input, samples, seed)?, &mut stdout)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Score {
            checkpoint,
            scorer,
            config,
            seed,
        } => {
            let model = load_checkpoint::<f64>(&checkpoint)?.model;
            let batches = match (scorer, config) {
                (ScorerKind::Grad | ScorerKind::Act, None) => {
                    return Err(Error::InvalidArgument(format!(
                        "the {} scorer needs --config for data",
                        scorer.name()
                    )))
                }
                (_, Some(c)) => {
                    let cfg = RunConfig::from_path(&c)?;
                    cfg.dataset.load()?.train.batches(cfg.train.batch_size, None)
                }
                (_, None) => Vec::new(),
            };
            let table = scorer.score(&model, &batches, seed)?;
            table.write_csv(io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn report<T: Scalar>(checkpoint: &Path, tokens: Option<usize>, out: Option<&Path>) -> Result<()> {
    let model = load_checkpoint::<T>(checkpoint)?.model;
    let cost = cost_report(&model, tokens);
    let rows = [("adapters", &cost), ("full_finetuning", &cost.full_finetuning())];
    let alloc = allocation_report(&model);
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            let file = |name: &str| {
                let p = dir.join(name);
                std::fs::File::create(&p).map_err(|e| Error::Io { path: p, source: e })
            };
            write_cost_csv(&rows, file("cost.csv")?)?;
            write_allocation_csv(&alloc, file("allocation.csv")?)?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            write_cost_csv(&rows, &mut stdout)?;
            writeln!(stdout).ok();
            write_allocation_csv(&alloc, &mut stdout)?;
        }
    }
    Ok(())
}

fn verify(suite: Suite) -> Result<ExitCode> {
    let want = |s: Suite| matches!(suite, Suite::All) || std::mem::discriminant(&suite) == std::mem::discriminant(&s);
    let mut results = Vec::new();
    if want(Suite::Gradcheck) {
        results.push(gradcheck_suite(110, 0)?);
    }
    if want(Suite::PruneEquiv) {
        results.push(prune_equivalence_suite(100, 100, 0)?);
    }
    if want(Suite::CycleFormula) {
        results.push(cycle_formula_suite());
    }
    if want(Suite::CheckpointRoundtrip) {
        let dir = std::env::temp_dir().join(format!("mimi-verify-{}", std::process::id()));
        let r = checkpoint_roundtrip_suite(&dir);
        let _ = std::fs::remove_dir_all(&dir);
        results.push(r?);
    }
    for r in &results {
        println!("{r}");
    }
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
