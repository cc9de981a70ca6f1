//! The full comparison: every desk workload in every mode, simulated,
//! verified and summarised, with the report written as CSV.

use streamdcim::config::ExperimentConfig;
use streamdcim::energy::report_static;
use streamdcim::harness::{emit_report, report_rows, run_experiment, summary, ReportFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = "\
models = desk-base, desk-large
n_x = 256
n_y = 256
seed = 11
";
    let cfg = ExperimentConfig::parse(text)?;
    let results = run_experiment(&cfg)?;
    let rows = report_rows(&results);
    print!("{}", summary(&rows));
    println!("\n{}", report_static(&cfg.layout, &cfg.calibration.statics));
    let dir = std::env::temp_dir().join("streamdcim-example");
    println!("\nreport: {}", emit_report(&rows, ReportFormat::Csv, &dir)?.display());
    Ok(())
}
