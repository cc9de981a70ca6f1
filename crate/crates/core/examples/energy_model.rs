//! Event-based dynamic energy, leakage, and the static area/power table.

use streamdcim::config::ExperimentConfig;
use streamdcim::energy::{accumulate, report_static, Calibration};
use streamdcim::fixed::Precision;
use streamdcim::schedule::{schedule_workload, EventKind, ExecMode};
use streamdcim::workload::build_vilbert_workload;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::default();
    let c = cfg.calibration.energy;
    let g = build_vilbert_workload(&cfg.table, "desk-base", 256, 256, Precision::Int16)?;
    for mode in ExecMode::ALL {
        let s = schedule_workload(&g, mode, &cfg.layout, &cfg.schedule)?;
        let e = accumulate(&s.events, g.precision, &c).with_leakage(s.makespan(), &c);
        let parts: Vec<String> = EventKind::ALL
            .iter()
            .filter(|&&k| e.of(k) > 0.0)
            .map(|&k| format!("{} {:.0}%", k.name(), 100.0 * e.of(k) / e.total()))
            .collect();
        println!("{:<13} {:.3e}  leakage {:.0}%  {}", mode.name(), e.total(), 100.0 * e.leakage / e.total(), parts.join(", "));
    }

    println!("\n{}", report_static(&cfg.layout, &cfg.calibration.statics));

    // calibration files round-trip; override one coefficient
    let mut text = Calibration::default().to_text();
    text.push_str("e_offchip = 50\n");
    let cal = Calibration::parse(&text)?;
    println!("\ne_offchip overridden to {}", cal.energy.e_offchip);
    Ok(())
}
