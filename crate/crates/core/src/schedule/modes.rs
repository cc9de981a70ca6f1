//! Lowering of a workload graph to a schedule in each execution mode.

use std::ops::Range;

use crate::cim::{CoreId, CoreLayout, MacroId, MacroMode, Region};
use crate::fixed::Precision;
use crate::workload::{MatrixKey, NodeId, OpKind, Stream, WorkloadGraph};

use super::ws::row_blocks;
use super::{
    schedule_cross_forwarding, schedule_weight_stationary, Builder, EventId, EventKind, ExecMode, Operand, Payload,
    Resource, Schedule, ScheduleError, WsGroup, WsRequest, XfwdOrder, XfwdRequest,
};

/// Where tile-stream mode computes `V = I * W_V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GenvPlacement {
    /// Shares the key core's input broadcast with `K` generation.
    #[default]
    Fused,
    /// Mixed-stationary on the hybrid core, ahead of `Q K^T`.
    CrossForward,
    /// Per instance, `Fused` or weight-stationary in the hybrid core's weight
    /// halves, whichever leaves the busier write port less loaded.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    /// Row blocks a tile-stream operator is pipelined in.
    pub row_blocks: usize,
    pub genv: GenvPlacement,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            row_blocks: 8,
            genv: GenvPlacement::Balanced,
        }
    }
}

fn bits(rows: usize, cols: usize, precision: Precision) -> u64 {
    (rows * cols) as u64 * precision.bits() as u64
}

fn macros(core: CoreId, range: Range<usize>) -> Vec<MacroId> {
    range.map(|i| MacroId::new(core, i)).collect()
}

struct Lowering<'a> {
    graph: &'a WorkloadGraph,
    b: Builder<'a>,
    opts: ScheduleOptions,
    mode: ExecMode,
}

impl<'a> Lowering<'a> {
    fn result(&self, layer: usize, stream: Stream, kind: OpKind, head: usize) -> MatrixKey {
        MatrixKey::Result {
            node: self.graph.node_id(layer, stream, kind),
            head,
        }
    }

    fn tokens(&self, layer: usize, s: Stream) -> usize {
        self.graph.tokens[layer].get(s)
    }

    /// Reads a whole matrix from off-chip memory; consumers then depend on
    /// the read.
    fn read(&mut self, key: MatrixKey, rows: usize, cols: usize, precision: Precision, stage: Option<NodeId>) -> EventId {
        let deps = self.b.producers(&key, &(0..rows), &(0..cols));
        let id = self.b.offchip(EventKind::OffchipRead, key, bits(rows, cols, precision), deps, stage);
        self.b.republish(key, 0..rows, 0..cols, id);
        id
    }

    fn write_back(&mut self, key: MatrixKey, rows: usize, cols: usize, precision: Precision, stage: Option<NodeId>) {
        let deps = self.b.producers(&key, &(0..rows), &(0..cols));
        let id = self.b.offchip(EventKind::OffchipWrite, key, bits(rows, cols, precision), deps, stage);
        self.b.republish(key, 0..rows, 0..cols, id);
    }

    fn read_weight(&mut self, layer: usize, s: Stream, kind: OpKind, head: usize) -> MatrixKey {
        let node = self.graph.node_id(layer, s, kind);
        let key = MatrixKey::Weight { node, head };
        let (d, dh) = (self.graph.model.d_model, self.graph.d_head());
        self.read(key, d, dh, self.graph.precision, Some(node));
        key
    }

    #[allow(clippy::too_many_arguments)]
    fn ws(
        &mut self,
        core: CoreId,
        input: Operand,
        rows: usize,
        row_blocks: usize,
        groups: Vec<WsGroup>,
    ) -> Result<(), ScheduleError> {
        self.ws_in(core, Region::Whole, input, rows, row_blocks, groups)
    }

    fn ws_in(
        &mut self,
        core: CoreId,
        region: Region,
        input: Operand,
        rows: usize,
        row_blocks: usize,
        groups: Vec<WsGroup>,
    ) -> Result<(), ScheduleError> {
        let req = WsRequest {
            core,
            region,
            precision: self.graph.precision,
            input,
            rows: 0..rows,
            row_blocks,
            groups,
            rewrite_deps: Vec::new(),
            compute_deps: Vec::new(),
        };
        schedule_weight_stationary(&mut self.b, &req)?;
        Ok(())
    }

    fn gen_group(&self, layer: usize, s: Stream, kind: OpKind, head: usize, on: Vec<MacroId>) -> WsGroup {
        let node = self.graph.node_id(layer, s, kind);
        WsGroup {
            weights: Operand::plain(MatrixKey::Weight { node, head }),
            k: self.graph.model.d_model,
            n: self.graph.d_head(),
            out: MatrixKey::Result { node, head },
            macros: on,
            stage: Some(node),
        }
    }

    fn core_macros(&self, core: CoreId) -> Vec<MacroId> {
        macros(core, 0..self.b.layout().macros_per_core)
    }

    fn halves(&self, core: CoreId) -> (Vec<MacroId>, Vec<MacroId>) {
        let n = self.b.layout().macros_per_core;
        (macros(core, 0..n / 2), macros(core, n / 2..n))
    }

    /// `A = Q_c K_kv^T` with `K^T` pinned whole in the key core.
    fn qkt_ws(&mut self, layer: usize, c: Stream, head: usize, blocks: usize) -> Result<(), ScheduleError> {
        let kv = self.graph.kind(layer).kv_stream(c);
        let node = self.graph.node_id(layer, c, OpKind::QKt);
        let group = WsGroup {
            weights: Operand::transposed(self.result(layer, kv, OpKind::GenK, head)),
            k: self.graph.d_head(),
            n: self.tokens(layer, kv),
            out: MatrixKey::Result { node, head },
            macros: self.core_macros(CoreId::K),
            stage: Some(node),
        };
        let q = Operand::plain(self.result(layer, c, OpKind::GenQ, head));
        self.ws(CoreId::K, q, self.tokens(layer, c), blocks, vec![group])
    }

    /// `O = P V_kv` with `V` pinned in `on`.
    fn pv_ws(&mut self, layer: usize, c: Stream, head: usize, core: CoreId, on: Vec<MacroId>, blocks: usize) -> Result<(), ScheduleError> {
        let kv = self.graph.kind(layer).kv_stream(c);
        let node = self.graph.node_id(layer, c, OpKind::PV);
        let group = WsGroup {
            weights: Operand::plain(self.result(layer, kv, OpKind::GenV, head)),
            k: self.tokens(layer, kv),
            n: self.graph.d_head(),
            out: MatrixKey::Result { node, head },
            macros: on,
            stage: Some(node),
        };
        let p = Operand::plain(self.result(layer, c, OpKind::Softmax, head));
        self.ws(core, p, self.tokens(layer, c), blocks, vec![group])
    }

    fn softmax(&mut self, layer: usize, c: Stream, head: usize, blocks: usize) {
        let kv = self.graph.kind(layer).kv_stream(c);
        let node = self.graph.node_id(layer, c, OpKind::Softmax);
        let input = self.result(layer, c, OpKind::QKt, head);
        let output = MatrixKey::Result { node, head };
        let cols = self.tokens(layer, kv);
        for rows in row_blocks(0..self.tokens(layer, c), blocks) {
            self.b.softmax(input, output, rows, cols, &[], Some(node));
        }
    }

    fn non_stream_instance(&mut self, layer: usize, c: Stream, head: usize) -> Result<(), ScheduleError> {
        let g = self.graph;
        let p = g.precision;
        let kv = g.kind(layer).kv_stream(c);
        let (d, dh) = (g.model.d_model, g.d_head());
        let (nq, nk) = (self.tokens(layer, c), self.tokens(layer, kv));
        for (s, kind, core) in [(c, OpKind::GenQ, CoreId::Q), (kv, OpKind::GenK, CoreId::K), (kv, OpKind::GenV, CoreId::Tbr)] {
            let n = self.tokens(layer, s);
            let input = MatrixKey::Input { layer, stream: s };
            let node = g.node_id(layer, s, kind);
            self.read(input, n, d, p, Some(node));
            self.read_weight(layer, s, kind, head);
            let group = self.gen_group(layer, s, kind, head, self.core_macros(core));
            self.ws(core, Operand::plain(input), n, 1, vec![group])?;
            self.write_back(MatrixKey::Result { node, head }, n, dh, p, Some(node));
        }
        let qk = g.node_id(layer, c, OpKind::QKt);
        self.read(self.result(layer, c, OpKind::GenQ, head), nq, dh, p, Some(qk));
        self.read(self.result(layer, kv, OpKind::GenK, head), nk, dh, p, Some(qk));
        self.qkt_ws(layer, c, head, 1)?;
        self.write_back(MatrixKey::Result { node: qk, head }, nq, nk, p, Some(qk));
        let sm = g.node_id(layer, c, OpKind::Softmax);
        let prob = g.result_precision(OpKind::Softmax);
        self.read(MatrixKey::Result { node: qk, head }, nq, nk, p, Some(sm));
        self.softmax(layer, c, head, 1);
        self.write_back(MatrixKey::Result { node: sm, head }, nq, nk, prob, Some(sm));
        let pv = g.node_id(layer, c, OpKind::PV);
        self.read(MatrixKey::Result { node: sm, head }, nq, nk, prob, Some(pv));
        self.read(self.result(layer, kv, OpKind::GenV, head), nk, dh, p, Some(pv));
        self.pv_ws(layer, c, head, CoreId::Tbr, self.core_macros(CoreId::Tbr), 1)?;
        self.write_back(MatrixKey::Result { node: pv, head }, nq, dh, p, Some(pv));
        Ok(())
    }

    fn layer_stream_instance(&mut self, layer: usize, c: Stream, head: usize) -> Result<(), ScheduleError> {
        let kv = self.graph.kind(layer).kv_stream(c);
        for (s, kind, core) in [(c, OpKind::GenQ, CoreId::Q), (kv, OpKind::GenK, CoreId::K), (kv, OpKind::GenV, CoreId::Tbr)] {
            self.read_weight(layer, s, kind, head);
            let group = self.gen_group(layer, s, kind, head, self.core_macros(core));
            let input = Operand::plain(MatrixKey::Input { layer, stream: s });
            self.ws(core, input, self.tokens(layer, s), 1, vec![group])?;
        }
        self.qkt_ws(layer, c, head, 1)?;
        self.softmax(layer, c, head, 1);
        self.pv_ws(layer, c, head, CoreId::Tbr, self.core_macros(CoreId::Tbr), 1)
    }

    fn tile_stream_instance(&mut self, layer: usize, c: Stream, head: usize) -> Result<(), ScheduleError> {
        let g = self.graph;
        let kv = g.kind(layer).kv_stream(c);
        let blocks = self.opts.row_blocks;
        let (lo, hi) = self.halves(CoreId::Q);
        self.read_weight(layer, c, OpKind::GenQ, head);
        let q = self.gen_group(layer, c, OpKind::GenQ, head, lo);
        self.ws(CoreId::Q, Operand::plain(MatrixKey::Input { layer, stream: c }), self.tokens(layer, c), blocks, vec![q])?;
        let kv_input = Operand::plain(MatrixKey::Input { layer, stream: kv });
        let nk = self.tokens(layer, kv);
        let tbr = self.core_macros(CoreId::Tbr);
        let (d, dh) = (g.model.d_model, g.d_head());
        let genv = match self.opts.genv {
            GenvPlacement::Balanced => {
                // write-port load of the key and hybrid cores per placement
                let w = d * dh;
                let scores = (self.tokens(layer, c) + nk) * dh;
                if (w + scores).max(w) < (2 * w).max(scores) {
                    GenvPlacement::Balanced
                } else {
                    GenvPlacement::Fused
                }
            }
            other => other,
        };
        match genv {
            GenvPlacement::Balanced => {
                self.read_weight(layer, kv, OpKind::GenK, head);
                self.read_weight(layer, kv, OpKind::GenV, head);
                let k = self.gen_group(layer, kv, OpKind::GenK, head, self.core_macros(CoreId::K));
                self.ws(CoreId::K, kv_input, nk, blocks, vec![k])?;
                let v = self.gen_group(layer, kv, OpKind::GenV, head, tbr.clone());
                self.ws_in(CoreId::Tbr, Region::Weight, kv_input, nk, blocks, vec![v])?;
            }
            GenvPlacement::Fused => {
                let (k_on, v_on) = self.halves(CoreId::K);
                self.read_weight(layer, kv, OpKind::GenK, head);
                self.read_weight(layer, kv, OpKind::GenV, head);
                let k = self.gen_group(layer, kv, OpKind::GenK, head, k_on);
                let v = self.gen_group(layer, kv, OpKind::GenV, head, v_on);
                self.ws(CoreId::K, kv_input, nk, blocks, vec![k, v])?;
            }
            GenvPlacement::CrossForward => {
                self.read_weight(layer, kv, OpKind::GenK, head);
                let k = self.gen_group(layer, kv, OpKind::GenK, head, self.core_macros(CoreId::K));
                self.ws(CoreId::K, kv_input, nk, blocks, vec![k])?;
                let w = self.read_weight(layer, kv, OpKind::GenV, head);
                let node = g.node_id(layer, kv, OpKind::GenV);
                let req = XfwdRequest {
                    core: CoreId::Tbr,
                    precision: g.precision,
                    a: kv_input,
                    b: Operand::plain(w),
                    m: nk,
                    k: d,
                    n: dh,
                    out: MatrixKey::Result { node, head },
                    macros: tbr.clone(),
                    order: XfwdOrder::ReleaseEarly,
                    a_deps: Vec::new(),
                    b_deps: Vec::new(),
                    stage: Some(node),
                };
                schedule_cross_forwarding(&mut self.b, &req)?;
            }
        }
        let node = g.node_id(layer, c, OpKind::QKt);
        let req = XfwdRequest {
            core: CoreId::Tbr,
            precision: g.precision,
            a: Operand::plain(self.result(layer, c, OpKind::GenQ, head)),
            b: Operand::transposed(self.result(layer, kv, OpKind::GenK, head)),
            m: self.tokens(layer, c),
            k: g.d_head(),
            n: nk,
            out: MatrixKey::Result { node, head },
            macros: tbr,
            order: XfwdOrder::AcquireLate,
            a_deps: Vec::new(),
            b_deps: Vec::new(),
            stage: Some(node),
        };
        schedule_cross_forwarding(&mut self.b, &req)?;
        self.softmax(layer, c, head, blocks);
        match genv {
            GenvPlacement::Fused | GenvPlacement::Balanced => self.pv_ws(layer, c, head, CoreId::Q, hi, blocks),
            GenvPlacement::CrossForward => {
                let on = self.core_macros(CoreId::K);
                self.pv_ws(layer, c, head, CoreId::K, on, blocks)
            }
        }
    }

    /// Token ranking and head concatenation that hand a layer's output to
    /// the next layer.
    fn finish_layer(&mut self, layer: usize) {
        let g = self.graph;
        let last = layer + 1 == g.layers();
        for s in Stream::BOTH {
            let n = self.tokens(layer, s);
            let mut deps = Vec::new();
            if g.keep_set(layer, s).is_some() {
                let c = g.ranking_consumer(layer, s);
                let node = g.node_id(layer, c, OpKind::Softmax);
                let rows = self.tokens(layer, c);
                let mut rank_deps = Vec::new();
                for head in 0..g.model.heads {
                    rank_deps.extend(self.b.producers(&MatrixKey::Result { node, head }, &(0..rows), &(0..n)));
                }
                let rate = self.b.layout().dtpu_cols_per_cycle.max(1);
                let rank = self.b.place(
                    EventKind::DtpuRank,
                    vec![Resource::Dtpu],
                    (n as u64).div_ceil(rate),
                    rank_deps,
                    Payload::Rank { layer, stream: s },
                    None,
                    0,
                );
                deps.push(rank);
            }
            let pv = g.node_id(layer, s, OpKind::PV);
            for head in 0..g.model.heads {
                deps.extend(self.b.producers(&MatrixKey::Result { node: pv, head }, &(0..n), &(0..g.d_head())));
            }
            let kept = self.tokens(layer + 1, s);
            let out_bits = bits(kept, g.model.d_model, g.precision);
            let payload = Payload::Assemble {
                layer,
                stream: s,
                bits: out_bits,
            };
            let layout = self.b.layout();
            let (kind, resource, duration) = match (self.mode, last) {
                (ExecMode::NonStream, _) => (EventKind::StreamOut, Resource::Tbsn, 0),
                (_, true) => (EventKind::OffchipWrite, Resource::Offchip, layout.offchip_cycles(out_bits)),
                (_, false) => (EventKind::StreamOut, Resource::Tbsn, out_bits.div_ceil(layout.bus_bits_per_cycle)),
            };
            let id = self.b.place(kind, vec![resource], duration, deps, payload, None, 0);
            self.b
                .republish(MatrixKey::Input { layer: layer + 1, stream: s }, 0..kept, 0..g.model.d_model, id);
        }
    }
}

/// Lowers `graph` to a schedule in `mode`.
pub fn schedule_workload(
    graph: &WorkloadGraph,
    mode: ExecMode,
    layout: &CoreLayout,
    opts: &ScheduleOptions,
) -> Result<Schedule, ScheduleError> {
    layout.validate()?;
    if opts.row_blocks == 0 {
        return Err(ScheduleError::Config("row_blocks must be positive".into()));
    }
    if mode == ExecMode::TileStream && layout.macros_per_core < 2 {
        return Err(ScheduleError::Config(
            "tile-stream mode splits cores in halves and needs at least 2 macros per core".into(),
        ));
    }
    let mut lw = Lowering {
        graph,
        b: Builder::new(layout, mode),
        opts: *opts,
        mode,
    };
    let d = graph.model.d_model;
    if mode != ExecMode::NonStream {
        for s in Stream::BOTH {
            lw.read(MatrixKey::Input { layer: 0, stream: s }, lw.tokens(0, s), d, graph.precision, None);
        }
    }
    if mode == ExecMode::TileStream {
        for m in lw.core_macros(CoreId::Tbr) {
            lw.b.reconfigure(m, MacroMode::Hybrid, None);
        }
    }
    for layer in 0..graph.layers() {
        for c in Stream::BOTH {
            for head in 0..graph.model.heads {
                match mode {
                    ExecMode::NonStream => lw.non_stream_instance(layer, c, head)?,
                    ExecMode::LayerStream => lw.layer_stream_instance(layer, c, head)?,
                    ExecMode::TileStream => lw.tile_stream_instance(layer, c, head)?,
                }
            }
        }
        lw.finish_layer(layer);
    }
    Ok(lw.b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::validate;
    use crate::workload::{build_vilbert_workload, ModelTable};

    fn desk(n: usize) -> WorkloadGraph {
        build_vilbert_workload(&ModelTable::default(), "desk-base", n, n, Precision::Int16).unwrap()
    }

    #[test]
    fn every_mode_yields_a_valid_schedule() {
        let g = desk(64);
        let layout = CoreLayout::default();
        for mode in ExecMode::ALL {
            for genv in [GenvPlacement::Fused, GenvPlacement::CrossForward] {
                let opts = ScheduleOptions { genv, ..ScheduleOptions::default() };
                let s = schedule_workload(&g, mode, &layout, &opts).unwrap();
                assert_eq!(validate(&s), Ok(()), "{mode}");
                let macs: u64 = s.events.iter().map(|e| e.macs).sum();
                assert_eq!(macs, g.total_macs(), "{mode}");
            }
        }
    }

    #[test]
    fn streaming_modes_read_inputs_once() {
        let g = desk(32);
        let layout = CoreLayout::default();
        let s = schedule_workload(&g, ExecMode::LayerStream, &layout, &ScheduleOptions::default()).unwrap();
        let input_reads = s
            .events
            .iter()
            .filter(|e| matches!(e.payload, Payload::Transfer { key: MatrixKey::Input { .. }, .. }))
            .count();
        assert_eq!(input_reads, 2);
        assert_eq!(s.count(EventKind::Reconfigure), 0);
        let t = schedule_workload(&g, ExecMode::TileStream, &layout, &ScheduleOptions::default()).unwrap();
        assert_eq!(t.count(EventKind::Reconfigure), 8);
    }

    #[test]
    fn tile_stream_needs_two_macros() {
        let g = desk(8);
        let layout = CoreLayout {
            macros_per_core: 1,
            ..CoreLayout::default()
        };
        assert!(matches!(
            schedule_workload(&g, ExecMode::TileStream, &layout, &ScheduleOptions::default()),
            Err(ScheduleError::Config(_))
        ));
        assert!(schedule_workload(&g, ExecMode::LayerStream, &layout, &ScheduleOptions::default()).is_ok());
    }

    #[test]
    fn schedules_are_deterministic() {
        let g = desk(48);
        let layout = CoreLayout::default();
        for mode in ExecMode::ALL {
            let a = schedule_workload(&g, mode, &layout, &ScheduleOptions::default()).unwrap();
            let b = schedule_workload(&g, mode, &layout, &ScheduleOptions::default()).unwrap();
            assert_eq!(a.to_trace(), b.to_trace());
        }
    }
}
