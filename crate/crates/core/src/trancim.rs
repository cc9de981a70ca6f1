//! The rewrite-latency example of a layer-streaming CIM design: a
//! 2048-token, 512-wide INT8 attention layer whose K matrix must be written
//! into CIM before QK^T can start.

use std::fmt;

use num_rational::Ratio;

use crate::cim::CoreLayout;
use crate::fixed::Precision;
use crate::operands::OperandSet;
use crate::schedule::{schedule_workload, EventKind, ExecMode, ScheduleOptions};
use crate::sim::{rewrite_fraction, simulate, SimError, SimMode};
use crate::workload::{build_workload, AttentionKind, ModelConfig, OpKind, Stream, WorkloadGraph};

pub const TOKENS: usize = 2048;
pub const WIDTH: usize = 512;

/// One self-attention layer, one head, N = 2048, d = 512, INT8.
pub fn trancim_workload() -> WorkloadGraph {
    let model = ModelConfig::new("trancim", WIDTH, 1, vec![AttentionKind::SelfModal]);
    build_workload(model, TOKENS, TOKENS, Precision::Int8).expect("fixed dimensions are valid")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrancimNumbers {
    /// MACs(QK^T) / MACs(GenQ + GenK + QK^T).
    pub qkt_mac_share: Ratio<u64>,
    pub k_rewrite_cycles: u64,
    pub qkt_compute_cycles: u64,
    pub genq_compute_cycles: u64,
    pub genk_compute_cycles: u64,
    /// Exposed rewrite over the QK^T stage span.
    pub qkt_rewrite_fraction: Ratio<u64>,
    /// K rewrite cycles over the compute cycles of GenQ, GenK and QK^T.
    pub rewrite_share_with_generation: Ratio<u64>,
}

fn pct(r: Ratio<u64>) -> f64 {
    100.0 * *r.numer() as f64 / *r.denom() as f64
}

impl fmt::Display for TrancimNumbers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "workload: N={TOKENS}, d={WIDTH}, INT8, layer streaming, 8/3 vectors/cycle")?;
        writeln!(
            f,
            "QK^T share of MACs       {}/{} = {:.1}%",
            self.qkt_mac_share.numer(),
            self.qkt_mac_share.denom(),
            pct(self.qkt_mac_share)
        )?;
        writeln!(f, "K rewrite cycles         {}", self.k_rewrite_cycles)?;
        writeln!(f, "QK^T compute cycles      {}", self.qkt_compute_cycles)?;
        writeln!(
            f,
            "GenQ/GenK compute cycles {} / {}",
            self.genq_compute_cycles, self.genk_compute_cycles
        )?;
        writeln!(f, "QK^T rewrite fraction    {:.1}%", pct(self.qkt_rewrite_fraction))?;
        write!(f, "rewrite share with Q/K generation {:.1}%", pct(self.rewrite_share_with_generation))
    }
}

/// Schedules and replays the scenario (timing only) under
/// [`CoreLayout::trancim_profile`].
pub fn trancim_example() -> Result<TrancimNumbers, SimError> {
    let g = trancim_workload();
    let layout = CoreLayout::trancim_profile();
    let schedule = schedule_workload(&g, ExecMode::LayerStream, &layout, &ScheduleOptions::default())
        .map_err(|e| SimError::Dataflow(e.to_string()))?;
    let ops = OperandSet::default();
    let (_, report) = simulate(&schedule, &layout, &g, &ops, SimMode::Timing)?;
    let node = |k| g.node_id(0, Stream::X, k);
    let macs = |k| g.node(node(k)).macs();
    // the graph carries two streams; the example is the X stream's attention
    let qkt = [node(OpKind::QKt)];
    let compute = |k: OpKind| report.stage_busy(EventKind::Compute, &[node(k)]);
    let k_rewrite = report.stage_busy(EventKind::Rewrite, &qkt);
    let generation_and_qkt = compute(OpKind::GenQ) + compute(OpKind::GenK) + compute(OpKind::QKt);
    Ok(TrancimNumbers {
        qkt_mac_share: Ratio::new(
            macs(OpKind::QKt),
            macs(OpKind::GenQ) + macs(OpKind::GenK) + macs(OpKind::QKt),
        ),
        k_rewrite_cycles: k_rewrite,
        qkt_compute_cycles: compute(OpKind::QKt),
        genq_compute_cycles: compute(OpKind::GenQ),
        genk_compute_cycles: compute(OpKind::GenK),
        qkt_rewrite_fraction: rewrite_fraction(&report, &qkt)?,
        rewrite_share_with_generation: Ratio::new(k_rewrite, generation_and_qkt),
    })
}
