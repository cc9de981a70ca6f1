//! The same workload lowered three ways; where the cycles go in each.

use streamdcim::config::ExperimentConfig;
use streamdcim::fixed::Precision;
use streamdcim::schedule::{schedule_workload, validate, EventKind, ExecMode};
use streamdcim::workload::build_vilbert_workload;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::default();
    let g = build_vilbert_workload(&cfg.table, "desk-base", 256, 256, Precision::Int16)?;
    println!("{:<13}{:>9}{:>9}{:>9}{:>10}{:>9}", "mode", "cycles", "events", "compute", "rewrite", "offchip");
    for mode in ExecMode::ALL {
        let s = schedule_workload(&g, mode, &cfg.layout, &cfg.schedule)?;
        validate(&s).map_err(|v| v[0].to_string())?;
        let offchip = s.busy(EventKind::OffchipRead, None) + s.busy(EventKind::OffchipWrite, None);
        println!(
            "{:<13}{:>9}{:>9}{:>9}{:>10}{:>9}",
            mode.name(),
            s.makespan(),
            s.len(),
            s.busy(EventKind::Compute, None),
            s.busy(EventKind::Rewrite, None),
            offchip
        );
    }
    Ok(())
}
