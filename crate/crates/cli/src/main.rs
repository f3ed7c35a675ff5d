use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use heatlab_core::config::{Algo, ConfigError, ExperimentConfig};
use heatlab_core::mdp_env::ReplayBuffer;
use heatlab_core::phy_link::{orthogonality_csv, sf_table_csv};
use heatlab_core::runner::{self, Cell, CSV_HEADER};
use heatlab_core::sim_engine::trace_csv;

#[derive(Parser)]
#[command(name = "heatlab", version, about = "LoRaWAN single-gateway simulator and resource-allocation learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one deployment (first N and delta of the config) and print its CSV row
    Simulate(RunArgs),
    /// Record a random-policy replay buffer as JSON lines
    CollectOffline(RunArgs),
    /// Pretrain and run a learning agent, then save its checkpoint
    Train(TrainArgs),
    /// Run the full grid and emit one CSV row per cell and seed
    Sweep(SweepArgs),
    /// Print the spreading-factor and orthogonality tables as CSV
    DumpTables(DumpArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-reception trace CSV here
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use this offline buffer instead of collecting a fresh one
    #[arg(long)]
    buffer: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    /// Directory for sf_table.csv and orthogonality.csv; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let config = match path {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

/// The single cell selected by the run flags.
fn pick_cell(config: &ExperimentConfig, args: &RunArgs) -> Result<Cell, Failure> {
    let algo = match &args.algo {
        Some(name) => name.parse::<Algo>().map_err(|e| Failure::Config(anyhow::anyhow!("--algo: {e}")))?,
        None => config.algos[0],
    };
    Ok(Cell {
        algo,
        n_nodes: config.nodes[0],
        delta: config.deltas[0],
        seed: args.seed.unwrap_or(config.seeds[0]),
    })
}

fn ensure_parent(p: &Path) -> anyhow::Result<()> {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())),
        None => Ok(()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            ensure_parent(p)?;
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => stdout(text),
    }
}

/// Writes to stdout, treating a closed pipe as success.
fn stdout(text: &str) -> anyhow::Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing stdout"),
        _ => Ok(()),
    }
}

fn cell_stem(cell: &Cell) -> String {
    format!("{}-N{}-d{}-seed{}", cell.algo.as_str(), cell.n_nodes, cell.delta, cell.seed)
}

/// `--trace`, else a file under `output.trace_dir`.
fn trace_path(config: &ExperimentConfig, args: &RunArgs, cell: &Cell) -> Option<PathBuf> {
    args.trace.clone().or_else(|| config.output.trace_dir.as_ref().map(|d| d.join(format!("{}.trace.csv", cell_stem(cell)))))
}

fn simulate(mut args: RunArgs) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref())?;
    let cell = pick_cell(&config, &args)?;
    args.trace = trace_path(&config, &args, &cell);
    let result = runner::run_cell(&config, cell, args.trace.is_some());
    let (trace, result) = match result {
        Ok((mut out, updates)) => (out.trace.take(), Ok((out, updates))),
        Err(e) => (None, Err(e)),
    };
    let row = runner::row_from(0, &config, cell, result);
    emit(args.out.as_deref(), &runner::sweep_csv(std::slice::from_ref(&row)))?;
    if let (Some(path), Some(trace)) = (&args.trace, trace) {
        emit(Some(path), &trace_csv(&trace))?;
    }
    if !row.is_ok() {
        return Err(Failure::Runtime(anyhow::anyhow!("{}", row.status)));
    }
    Ok(())
}

fn collect(args: RunArgs) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref())?;
    let cell = pick_cell(&config, &args)?;
    let buffer = runner::collect_offline(&config, cell.n_nodes, cell.delta, cell.seed).map_err(anyhow::Error::from)?;
    let out = args.out.or_else(|| {
        config.output.buffer_dir.as_ref().map(|d| d.join(format!("N{}-d{}-seed{}.jsonl", cell.n_nodes, cell.delta, cell.seed)))
    });
    match out {
        Some(p) => {
            ensure_parent(&p)?;
            buffer.save_jsonl(&p).with_context(|| format!("writing {}", p.display()))?
        }
        None => buffer.write_jsonl(&mut std::io::stdout().lock()).context("writing buffer")?,
    }
    eprintln!("{} transitions from {} nodes", buffer.len(), buffer.n_nodes());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let TrainArgs { mut run, buffer } = args;
    let config = load_config(run.config.as_deref())?;
    let cell = pick_cell(&config, &run)?;
    run.trace = trace_path(&config, &run, &cell);
    if !cell.algo.is_learning() {
        return Err(Failure::Config(anyhow::anyhow!("--algo {} has nothing to train", cell.algo.as_str())));
    }
    let offline = match buffer {
        Some(p) => Some(ReplayBuffer::load_jsonl(&p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut agent = runner::prepare_heat(&config, cell.algo, cell.n_nodes, cell.delta, cell.seed, offline)
        .map_err(anyhow::Error::from)?;
    let out = runner::run_agent(&config, &mut agent, cell.n_nodes, cell.delta, cell.seed, run.trace.is_some())
        .map_err(anyhow::Error::from)?;
    if let Some(e) = agent.failure() {
        return Err(Failure::Runtime(anyhow::anyhow!("training stopped: {e}")));
    }
    let checkpoint = run
        .out
        .clone()
        .or_else(|| config.output.checkpoint_dir.as_ref().map(|d| d.join(format!("{}-seed{}.ckpt", cell.algo.as_str(), cell.seed))))
        .unwrap_or_else(|| PathBuf::from(format!("{}-seed{}.ckpt", cell.algo.as_str(), cell.seed)));
    ensure_parent(&checkpoint)?;
    agent.save_checkpoint(&checkpoint).with_context(|| format!("writing {}", checkpoint.display()))?;
    if let (Some(path), Some(trace)) = (&run.trace, &out.trace) {
        emit(Some(path), &trace_csv(trace))?;
    }
    let updates = heatlab_core::mdp_env::Agent::train_updates(&agent);
    let row = runner::row_from(0, &config, cell, Ok((out, updates)));
    stdout(&format!("{CSV_HEADER}\n{}\n", row.to_csv()))?;
    eprintln!("checkpoint written to {}", checkpoint.display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let config = load_config(args.config.as_deref())?;
    let rows = runner::run_sweep(&config);
    let out = args.out.or_else(|| config.output.csv.clone());
    emit(out.as_deref(), &runner::sweep_csv(&rows))?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see the status column", rows.len());
    }
    Ok(())
}

fn dump_tables(args: DumpArgs) -> Result<(), Failure> {
    match args.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            emit(Some(&dir.join("sf_table.csv")), &sf_table_csv())?;
            emit(Some(&dir.join("orthogonality.csv")), &orthogonality_csv())?;
        }
        None => stdout(&format!("{}\n{}", sf_table_csv(), orthogonality_csv()))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::CollectOffline(a) => collect(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::DumpTables(a) => dump_tables(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
