//! Mixed-stationary QK^T on the hybrid core: each macro holds a row block
//! of Q and a column block of K^T, and neighbours forward their operands.

use std::collections::BTreeMap;

use streamdcim::cim::{CoreId, CoreLayout, MacroId, MacroMode};
use streamdcim::fixed::Precision;
use streamdcim::schedule::{schedule_cross_forwarding, validate, Builder, ExecMode, Operand, XfwdOrder, XfwdRequest};
use streamdcim::workload::{MatrixKey, NodeId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layout = CoreLayout::default();
    let macros: Vec<MacroId> = (0..8).map(|i| MacroId::new(CoreId::Tbr, i)).collect();
    for order in [XfwdOrder::ReleaseEarly, XfwdOrder::AcquireLate] {
        let mut b = Builder::new(&layout, ExecMode::TileStream);
        for &m in &macros {
            b.reconfigure(m, MacroMode::Hybrid, None);
        }
        let q = MatrixKey::Result { node: NodeId(0), head: 0 };
        let k = MatrixKey::Result { node: NodeId(7), head: 0 };
        let req = XfwdRequest {
            core: CoreId::Tbr,
            precision: Precision::Int16,
            a: Operand::plain(q),
            b: Operand::transposed(k),
            m: 64,
            k: 32,
            n: 64,
            out: MatrixKey::Result { node: NodeId(2), head: 0 },
            macros: macros.clone(),
            order,
            a_deps: Vec::new(),
            b_deps: Vec::new(),
            stage: Some(NodeId(2)),
        };
        let frag = schedule_cross_forwarding(&mut b, &req)?;
        let s = b.finish();
        validate(&s).map_err(|v| v[0].to_string())?;
        let mut per_step: BTreeMap<usize, usize> = BTreeMap::new();
        for &(_, step, _) in &frag.steps {
            *per_step.entry(step).or_default() += 1;
        }
        let first = s.event(frag.steps[0].2).start;
        println!("{order:?}: {} rewrites, broadcasts per step {:?}, first compute @{first}, makespan {}", frag.rewrites.len(), per_step.values().collect::<Vec<_>>(), s.makespan());
    }
    Ok(())
}
