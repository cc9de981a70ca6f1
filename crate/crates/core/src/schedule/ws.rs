//! Weight-stationary dataflow: weight tiles pinned in macros, input rows
//! broadcast to every macro holding a tile of the current pass.

use std::ops::Range;

use crate::cim::{CoreId, MacroId, MacroMode, Region, Side};
use crate::fixed::Precision;
use crate::workload::{MatrixKey, NodeId};

use super::tiling::{tile_partition, Orientation, TilePlan, TileTarget};
use super::{Builder, EventId, Feed, MacPart, Operand, Resource, ScheduleError};

/// One weight matrix and the macros it is pinned in. Several groups in one
/// request share the input broadcast.
#[derive(Debug, Clone)]
pub struct WsGroup {
    /// `k x n` view of the stationary operand.
    pub weights: Operand,
    pub k: usize,
    pub n: usize,
    pub out: MatrixKey,
    pub macros: Vec<MacroId>,
    pub stage: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct WsRequest {
    pub core: CoreId,
    pub region: Region,
    pub precision: Precision,
    /// Streamed operand; its rows are broadcast, its columns index `k`.
    pub input: Operand,
    pub rows: Range<usize>,
    /// Input rows are streamed in this many blocks per pass.
    pub row_blocks: usize,
    pub groups: Vec<WsGroup>,
    /// Extra deps of every weight rewrite.
    pub rewrite_deps: Vec<EventId>,
    /// Extra deps of every compute broadcast.
    pub compute_deps: Vec<EventId>,
}

#[derive(Debug, Clone, Default)]
pub struct WsFragment {
    pub rewrites: Vec<EventId>,
    /// `(pass, rows, event)` for every broadcast.
    pub computes: Vec<(usize, Range<usize>, EventId)>,
}

impl WsFragment {
    pub fn all(&self) -> impl Iterator<Item = EventId> + '_ {
        self.rewrites.iter().copied().chain(self.computes.iter().map(|c| c.2))
    }
}

pub(crate) fn row_blocks(rows: Range<usize>, blocks: usize) -> Vec<Range<usize>> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.div_ceil(blocks.clamp(1, n));
    (rows.start..rows.end)
        .step_by(size)
        .map(|s| s..(s + size).min(rows.end))
        .collect()
}

/// Pins each group's weights pass by pass and streams the input rows through
/// them. Multi-pass weights interleave rewrite and compute passes.
pub fn schedule_weight_stationary(b: &mut Builder<'_>, req: &WsRequest) -> Result<WsFragment, ScheduleError> {
    let mut frag = WsFragment::default();
    if req.rows.is_empty() {
        return Ok(frag);
    }
    let mode = match req.region {
        Region::Whole => MacroMode::Normal,
        _ => MacroMode::Hybrid,
    };
    let mut plans: Vec<TilePlan> = Vec::with_capacity(req.groups.len());
    for g in &req.groups {
        if g.k == 0 || g.n == 0 {
            return Err(ScheduleError::Shape(format!("weight-stationary operand {}x{}", g.k, g.n)));
        }
        if g.macros.is_empty() || g.macros.iter().any(|m| m.core != req.core) {
            return Err(ScheduleError::Scheduling(format!("group for {} has no macros in core {:?}", g.out, req.core)));
        }
        let target = TileTarget::new(b.layout(), mode, req.region, req.precision, g.macros.len());
        plans.push(tile_partition(g.k, g.n, req.precision, &target, Orientation::RowWise)?);
    }
    let passes = plans.iter().map(TilePlan::passes).max().unwrap_or(0);
    let blocks = row_blocks(req.rows.clone(), req.row_blocks);
    for pass in 0..passes {
        let mut resident = Vec::new();
        for (g, plan) in req.groups.iter().zip(&plans) {
            for t in plan.pass(pass) {
                let target = g.macros[t.slot];
                let tile = g.weights.tile(t.rows.clone(), t.cols.clone(), req.precision);
                frag.rewrites.push(b.rewrite(target, req.region, tile, &req.rewrite_deps, g.stage)?);
                resident.push((target, g.out, g.stage));
            }
        }
        for rows in &blocks {
            let parts = resident
                .iter()
                .map(|&(target, out, _)| MacPart {
                    target,
                    region: req.region,
                    side: Side::Right,
                    streamed: req.input,
                    lines: rows.clone(),
                    out,
                })
                .collect();
            let stage = resident.first().and_then(|r| r.2);
            let id = b.compute(parts, Resource::RowBus(req.core), Feed::Buffer, &req.compute_deps, stage)?;
            frag.computes.push((pass, rows.clone(), id));
        }
    }
    Ok(frag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cim::CoreLayout;
    use crate::schedule::{EventKind, ExecMode};
    use crate::workload::Stream;

    fn group(k: usize, n: usize, macros: usize) -> WsGroup {
        WsGroup {
            weights: Operand::plain(MatrixKey::Weight { node: NodeId(0), head: 0 }),
            k,
            n,
            out: MatrixKey::Result { node: NodeId(0), head: 0 },
            macros: (0..macros).map(|i| MacroId::new(CoreId::Q, i)).collect(),
            stage: Some(NodeId(0)),
        }
    }

    fn request(rows: usize, groups: Vec<WsGroup>, precision: Precision) -> WsRequest {
        WsRequest {
            core: CoreId::Q,
            region: Region::Whole,
            precision,
            input: Operand::plain(MatrixKey::Input { layer: 0, stream: Stream::X }),
            rows: 0..rows,
            row_blocks: 1,
            groups,
            rewrite_deps: Vec::new(),
            compute_deps: Vec::new(),
        }
    }

    #[test]
    fn resident_weights_take_one_step_per_row() {
        let layout = CoreLayout::default();
        let mut b = Builder::new(&layout, ExecMode::LayerStream);
        let frag = schedule_weight_stationary(&mut b, &request(300, vec![group(256, 64, 8)], Precision::Int16)).unwrap();
        assert_eq!(frag.computes.len(), 1);
        let s = b.finish();
        let compute = s.events.iter().find(|e| e.kind == EventKind::Compute).unwrap();
        assert_eq!(compute.duration, 300);
        assert_eq!(compute.macs, 300 * 256 * 64);
        // the input row reaches all eight macros in one broadcast
        assert_eq!(compute.resources.len(), 9);
    }

    #[test]
    fn no_rows_no_events() {
        let layout = CoreLayout::default();
        let mut b = Builder::new(&layout, ExecMode::LayerStream);
        let frag = schedule_weight_stationary(&mut b, &request(0, vec![group(256, 64, 8)], Precision::Int16)).unwrap();
        assert!(frag.rewrites.is_empty() && frag.computes.is_empty());
        assert!(b.is_empty());
    }

    #[test]
    fn oversized_weights_interleave_rewrite_passes() {
        let layout = CoreLayout::default();
        let mut b = Builder::new(&layout, ExecMode::LayerStream);
        let frag = schedule_weight_stationary(&mut b, &request(64, vec![group(512, 2048, 8)], Precision::Int8)).unwrap();
        let s = b.finish();
        assert_eq!(frag.computes.len(), 16);
        assert_eq!(s.busy(EventKind::Rewrite, None), 512 * 2048 * 8 / 512);
        assert_eq!(s.busy(EventKind::Compute, None), 16 * 64);
        // every pass's broadcast follows that pass's rewrites
        let mut last_compute_end = 0;
        for (pass, _, id) in &frag.computes {
            let e = s.event(*id);
            assert!(e.start >= last_compute_end);
            let rewrites_of_pass = &frag.rewrites[pass * 8..pass * 8 + 8];
            assert!(rewrites_of_pass.iter().all(|r| s.event(*r).end() <= e.start));
            last_compute_end = e.end();
        }
    }

    #[test]
    fn row_blocks_cover_rows() {
        assert_eq!(row_blocks(0..10, 4), vec![0..3, 3..6, 6..9, 9..10]);
        assert_eq!(row_blocks(0..3, 8), vec![0..1, 1..2, 2..3]);
        assert!(row_blocks(5..5, 8).is_empty());
    }
}
