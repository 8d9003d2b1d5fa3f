//! `ibnl`: train, reproduce and sweep imbalanced-MNIST experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ibnl_core::data::{load_mnist_train, Dataset};
use ibnl_core::experiment::{
    comparison_table, execute_plan, load_config, to_toml, write_outputs, ExperimentError, Plan,
    Preset, PresetOptions, RunCache, SweepAxis, SweepSpec, DEFAULT_BATCH_GRID, DEFAULT_RATIO_GRID,
};
use ibnl_core::metrics::{
    brier_score, confidence_profile, expected_calibration_error, read_confidence_dump, ECE_BINS,
};
use ibnl_core::nn::checkpoint;
use ibnl_core::tensor::Tensor;
use ibnl_core::train::{ExperimentConfig, RunResult};

const MNIST_ENV: &str = "IBNL_MNIST_DIR";

#[derive(Parser)]
#[command(
    name = "ibnl",
    version,
    about = "Final batch-norm experiments on imbalanced MNIST"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration from a TOML file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Write the first run's trained model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a named preset and compare against the published numbers.
    Reproduce {
        preset: String,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Vary the imbalance ratio or batch size, with and without a final batch norm.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// Comma-separated, strictly increasing grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Base configuration; defaults to the fully connected setup.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Remove the final batch norm from a saved model.
    StripBn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<checkpoint stem>.stripped.ibnl` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibration summary of a confidence dump.
    Calibration {
        #[arg(long)]
        dump: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Directory with the MNIST IDX files; falls back to $IBNL_MNIST_DIR.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    repeats: Option<usize>,
    /// Parallel runs; defaults to the number of available cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    majority_count: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: ExperimentError| e.to_string())
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            run,
            checkpoint,
        } => cmd_train(&config, &run, checkpoint.as_deref()),
        Command::Reproduce {
            preset,
            run,
            overrides,
        } => {
            let preset: Preset = preset.parse()?;
            let opts = options(&run, &overrides, None);
            let plan = preset.plan(&opts)?;
            execute(&plan, &run)
        }
        Command::Sweep {
            axis,
            values,
            config,
            run,
            overrides,
        } => {
            let preset = match axis {
                SweepAxis::ImbalanceRatio => Preset::RatioSweep,
                SweepAxis::BatchSize => Preset::BatchSweep,
            };
            let opts = options(&run, &overrides, values);
            let plan = match config {
                None => preset.plan(&opts)?,
                Some(path) => {
                    let mut base = load_config(&path)?;
                    apply_overrides(&mut base, &overrides);
                    let grid = match axis {
                        SweepAxis::ImbalanceRatio => DEFAULT_RATIO_GRID,
                        SweepAxis::BatchSize => DEFAULT_BATCH_GRID,
                    };
                    SweepSpec {
                        base,
                        axis,
                        values: opts.values.unwrap_or_else(|| grid.to_vec()),
                        repeats: opts.repeats.unwrap_or(preset.default_repeats()),
                    }
                    .expand(preset.name())?
                }
            };
            execute(&plan, &run)
        }
        Command::StripBn { checkpoint, out } => cmd_strip(&checkpoint, out),
        Command::Calibration { dump } => cmd_calibration(&dump),
    }
}

fn options(run: &RunArgs, o: &Overrides, values: Option<Vec<f64>>) -> PresetOptions {
    PresetOptions {
        repeats: run.repeats,
        epochs: o.epochs,
        majority_count: o.majority_count,
        test_per_class: o.test_per_class,
        seed: o.seed,
        values,
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) {
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(n) = o.majority_count {
        cfg.imbalance.majority_train_count = n;
    }
    if let Some(n) = o.test_per_class {
        cfg.imbalance.test_per_class = n;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
}

fn mnist_source(run: &RunArgs) -> Result<Dataset, Failure> {
    let dir = match &run.mnist_dir {
        Some(d) => d.clone(),
        None => std::env::var_os(MNIST_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                usage(anyhow!(
                    "no MNIST directory: pass --mnist-dir or set {MNIST_ENV}"
                ))
            })?,
    };
    load_mnist_train(&dir)
        .with_context(|| format!("loading MNIST from {}", dir.display()))
        .map_err(Failure::from)
}

fn workers(run: &RunArgs) -> usize {
    run.workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn run_plan(plan: &Plan, run: &RunArgs) -> Result<ibnl_core::experiment::ExecutedPlan, Failure> {
    let source = mnist_source(run)?;
    let total = plan.entries.len() * plan.repeats;
    eprintln!(
        "{}: {} configurations x {} repeats ({total} runs)",
        plan.name,
        plan.entries.len(),
        plan.repeats
    );
    let start = Instant::now();
    let log = |r: &RunResult| {
        eprintln!(
            "  done seed {} ({}, final_bn={}) in {:.1}s",
            r.seed,
            r.config.arch.name(),
            r.config.final_bn,
            r.wall_seconds
        );
    };
    let done = execute_plan(plan, &source, workers(run), &mut RunCache::new(), &log)?;
    eprintln!("finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(done)
}

fn execute(plan: &Plan, run: &RunArgs) -> Result<(), Failure> {
    let done = run_plan(plan, run)?;
    let summaries = write_outputs(&done, &run.out)?;
    print!("{}", comparison_table(&plan.name, &summaries));
    eprintln!("wrote results to {}", run.out.display());
    Ok(())
}

fn cmd_train(config: &Path, run: &RunArgs, checkpoint_path: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    println!("# resolved configuration\n{}", to_toml(&cfg));
    let plan = Plan::single("train", cfg, run.repeats.unwrap_or(1))?;
    let done = run_plan(&plan, run)?;
    let summaries = write_outputs(&done, &run.out)?;
    std::fs::write(
        run.out.join("config.toml"),
        to_toml(&plan.entries[0].config),
    )
    .with_context(|| format!("writing {}", run.out.display()))?;
    print!("{}", comparison_table(&plan.name, &summaries));
    if let Some(path) = checkpoint_path {
        checkpoint::save(&done.runs[0][0].model, path)
            .with_context(|| format!("saving {}", path.display()))?;
        eprintln!("saved model to {}", path.display());
    }
    Ok(())
}

fn cmd_strip(input: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let model = checkpoint::load(input).with_context(|| format!("reading {}", input.display()))?;
    let stripped = model
        .strip_final_bn()
        .map_err(|e| usage(anyhow!("{}: {e}", input.display())))?;
    let out = out.unwrap_or_else(|| {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model");
        input.with_file_name(format!("{stem}.stripped.ibnl"))
    });
    checkpoint::save(&stripped, &out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "parameters {} -> {}; wrote {}",
        model.parameter_count(),
        stripped.parameter_count(),
        out.display()
    );
    Ok(())
}

fn cmd_calibration(dump: &Path) -> Result<(), Failure> {
    let file = std::fs::File::open(dump).with_context(|| format!("opening {}", dump.display()))?;
    let records = read_confidence_dump(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", dump.display()))?;
    if records.is_empty() {
        return Err(usage(anyhow!("{} holds no predictions", dump.display())));
    }
    let c = records[0].probs.len();
    let probs = Tensor::from_vec(
        &[records.len(), c],
        records
            .iter()
            .flat_map(|r| r.probs.iter().copied())
            .collect(),
    )
    .map_err(|e| anyhow!("{e}"))?;
    let truths: Vec<usize> = records.iter().map(|r| r.true_class).collect();
    let ece = expected_calibration_error(&probs, &truths, ECE_BINS).map_err(|e| anyhow!("{e}"))?;
    let brier = brier_score(&probs, &truths).map_err(|e| anyhow!("{e}"))?;
    let correct = records
        .iter()
        .filter(|r| r.true_class == r.predicted_class)
        .count();
    println!(
        "samples {}  accuracy {:.4}  ece {:.4}  brier {:.4}",
        records.len(),
        correct as f64 / records.len() as f64,
        ece,
        brier
    );
    println!("class  count  p_true min / median / max  correct median  [0,.5) [.5,.75) [.75,1]");
    for p in confidence_profile(&records) {
        let cm = p
            .correct_median
            .map_or("-".to_string(), |m| format!("{m:.4}"));
        println!(
            "{:>5}  {:>5}  {:.4} / {:.4} / {:.4}  {:>14}  {:>6} {:>8} {:>7}",
            p.class, p.count, p.min, p.median, p.max, cm, p.bands[0], p.bands[1], p.bands[2]
        );
    }
    Ok(())
}
