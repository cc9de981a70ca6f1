use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use streamdcim::config::ExperimentConfig;
use streamdcim::energy::report_static;
use streamdcim::harness::{emit_report, report_rows, run_experiment, summary, HarnessError, ReportFormat};
use streamdcim::operands::OperandSet;
use streamdcim::reference::derive_keep_sets;
use streamdcim::schedule::{schedule_workload, validate, ExecMode};
use streamdcim::trancim::trancim_example;
use streamdcim::workload::build_vilbert_workload;

const CONFIG_ERROR: u8 = 2;
const VERIFY_ERROR: u8 = 3;
const IO_ERROR: u8 = 4;

#[derive(Parser)]
#[command(name = "streamdcim", version, about = "Streaming digital CIM attention simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every configured mode and write the comparison report.
    Run(Common),
    /// Parse and check a config, then print its canonical form.
    ValidateConfig(Common),
    /// Replay the 2048x512 INT8 rewrite-latency example.
    TrancimExample,
    /// Write the event trace of each configured workload and mode.
    DumpSchedule(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated modes, overriding the config.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// csv or json
    #[arg(long, default_value = "csv")]
    format: String,
}

struct Failure(u8, String);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure(e.exit_code() as u8, e.to_string())
    }
}

fn load(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure(IO_ERROR, format!("{}: {e}", path.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| Failure(CONFIG_ERROR, format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(modes) = &c.mode {
        cfg.modes = modes
            .split(',')
            .map(|m| ExecMode::parse(m).ok_or_else(|| Failure(CONFIG_ERROR, format!("unknown mode `{m}`"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure(CONFIG_ERROR, e.to_string()))?;
    Ok(cfg)
}

fn format_of(c: &Common) -> Result<ReportFormat, Failure> {
    ReportFormat::parse(&c.format).ok_or_else(|| Failure(CONFIG_ERROR, format!("unknown format `{}`", c.format)))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure(IO_ERROR, format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

fn run(c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    let format = format_of(c)?;
    let results = run_experiment(&cfg)?;
    let rows = report_rows(&results);
    let path = emit_report(&rows, format, &cfg.out_dir)?;
    print!("{}", summary(&rows));
    println!("\n{}", report_static(&cfg.layout, &cfg.calibration.statics));
    println!("report: {}", path.display());
    Ok(())
}

fn dump_schedule(c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    for name in &cfg.models {
        let full = build_vilbert_workload(&cfg.table, name, cfg.n_x, cfg.n_y, cfg.precision)
            .map_err(|e| Failure(CONFIG_ERROR, e.to_string()))?;
        let graph = if cfg.pruning.is_active() {
            let ops = OperandSet::synthetic(&full, cfg.seed);
            derive_keep_sets(&full, &ops, &cfg.pruning).map_err(|e| Failure(VERIFY_ERROR, e.to_string()))?
        } else {
            full
        };
        for &mode in &cfg.modes {
            let s = schedule_workload(&graph, mode, &cfg.layout, &cfg.schedule)
                .map_err(|e| Failure(CONFIG_ERROR, format!("{name}/{mode}: {e}")))?;
            if let Err(violations) = validate(&s) {
                return Err(Failure(VERIFY_ERROR, format!("{name}/{mode}: {}", violations[0])));
            }
            let path = cfg.out_dir.join(format!("{name}.{mode}.trace"));
            write(&path, &s.to_trace())?;
            println!("{}: {} events, {} cycles", path.display(), s.len(), s.makespan());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(c) => run(c),
        Command::ValidateConfig(c) => load(c).map(|cfg| print!("{}", cfg.to_text())),
        Command::TrancimExample => trancim_example()
            .map(|t| println!("{t}"))
            .map_err(|e| Failure(VERIFY_ERROR, e.to_string())),
        Command::DumpSchedule(c) => dump_schedule(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
