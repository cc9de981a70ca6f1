//! Attention-driven token pruning between layers and what it buys each mode.

use num_rational::Ratio;
use streamdcim::config::ExperimentConfig;
use streamdcim::harness::run_experiment;
use streamdcim::operands::OperandSet;
use streamdcim::reference::derive_keep_sets;
use streamdcim::workload::{build_vilbert_workload, OpKind, PruningPolicy, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::default();
    let g = build_vilbert_workload(&cfg.table, "desk-base", 256, 256, cfg.precision)?;
    let ops = OperandSet::synthetic(&g, cfg.seed);
    let half = PruningPolicy::uniform(1, Ratio::new(1, 2));
    let pruned = derive_keep_sets(&g, &ops, &half)?;
    let keep = pruned.keep_set(0, Stream::Y).unwrap();
    println!("layer 0 keeps {} of 256 Y tokens, first {:?}", keep.len(), &keep[..8]);
    let qkt = |g: &streamdcim::workload::WorkloadGraph| g.op(1, Stream::X, OpKind::QKt).macs();
    println!("layer 1 QK^T: {} -> {} MACs", qkt(&g), qkt(&pruned));

    let base = run_experiment(&cfg)?;
    let pruned_runs = run_experiment(&ExperimentConfig { pruning: half, ..cfg.clone() })?;
    for (a, b) in base.iter().zip(&pruned_runs) {
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            let (x, y) = (ra.report.total_cycles, rb.report.total_cycles);
            println!("{:<11} {:<13} {x:>6} -> {y:>6} cycles ({:.2}x)", a.workload, ra.mode.name(), x as f64 / y as f64);
        }
    }
    Ok(())
}
