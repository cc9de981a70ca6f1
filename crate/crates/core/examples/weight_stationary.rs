//! Pinning a weight matrix across a core and streaming input rows through it.

use streamdcim::cim::{CoreId, CoreLayout, MacroId, Region};
use streamdcim::fixed::Precision;
use streamdcim::schedule::{schedule_weight_stationary, validate, Builder, EventKind, ExecMode, Operand, WsGroup, WsRequest};
use streamdcim::workload::{MatrixKey, NodeId, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layout = CoreLayout::default();
    let node = NodeId(0);
    for row_blocks in [1, 4] {
        let mut b = Builder::new(&layout, ExecMode::TileStream);
        let req = WsRequest {
            core: CoreId::Q,
            region: Region::Whole,
            precision: Precision::Int16,
            input: Operand::plain(MatrixKey::Input { layer: 0, stream: Stream::X }),
            rows: 0..256,
            row_blocks,
            groups: vec![WsGroup {
                weights: Operand::plain(MatrixKey::Weight { node, head: 0 }),
                k: 128,
                n: 64,
                out: MatrixKey::Result { node, head: 0 },
                macros: (0..8).map(|i| MacroId::new(CoreId::Q, i)).collect(),
                stage: Some(node),
            }],
            rewrite_deps: Vec::new(),
            compute_deps: Vec::new(),
        };
        let frag = schedule_weight_stationary(&mut b, &req)?;
        let s = b.finish();
        validate(&s).map_err(|v| v[0].to_string())?;
        println!(
            "{row_blocks} row block(s): {} rewrites, {} broadcasts, {} compute cycles, makespan {}",
            frag.rewrites.len(),
            frag.computes.len(),
            s.busy(EventKind::Compute, None),
            s.makespan()
        );
    }
    Ok(())
}
