//! Replays a schedule against the macro, bus and SFU models: dispatches each
//! event once its dependencies have completed, performs the integer
//! arithmetic of every compute step, and measures utilization.

mod stats;
mod store;
mod verify;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::cim::{CimError, CoreLayout, MacroId, MacroMode, MacroState, ResidentTile, Side, TileDescriptor};
use crate::fixed::{softmax_rows, FixedMatrix, ProbMatrix};
use crate::operands::OperandSet;
use crate::reference::head_averaged_scores;
use crate::schedule::{EventId, EventKind, Lane, MacPart, Operand, Payload, Schedule, ScheduleEvent};
use crate::workload::{select_tokens, MatrixKey, OpKind, WorkloadGraph};

pub use stats::{rewrite_fraction, LogEntry, SimReport};
pub use verify::{verify_functional, Mismatch, Verification};

use store::Store;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("deadlock at cycle {cycle}: {} events waiting, first {waiting:?}", waiting.len())]
    Deadlock { cycle: u64, waiting: Vec<EventId> },
    #[error("legality violation: {event} needs {lane} held by {holder} at cycle {cycle}")]
    Conflict { event: EventId, holder: EventId, lane: String, cycle: u64 },
    #[error("{event}: {source}")]
    Cim { event: EventId, source: CimError },
    #[error("dataflow error: {0}")]
    Dataflow(String),
    #[error("stage filter selects no events")]
    EmptyStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Timing only; payloads are not executed.
    Timing,
    /// Timing plus bit-exact execution of every payload.
    Functional,
}

/// Matrices the simulated hardware produced, keyed like the reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimOutputs {
    pub values: BTreeMap<MatrixKey, FixedMatrix>,
}

impl SimOutputs {
    pub fn get(&self, key: &MatrixKey) -> Option<&FixedMatrix> {
        self.values.get(key)
    }
}

fn view(store: &Store<'_>, op: &Operand, r: usize, c: usize) -> Result<i32, SimError> {
    let (sr, sc) = if op.transposed { (c, r) } else { (r, c) };
    store.slot(&op.key)?.get(&op.key, sr, sc)
}

fn load_tile(store: &Store<'_>, desc: &TileDescriptor) -> Result<ResidentTile, SimError> {
    let op = Operand {
        key: desc.key,
        transposed: desc.transposed,
    };
    let mut data = Vec::with_capacity(desc.words());
    for r in desc.rows.clone() {
        for c in desc.cols.clone() {
            data.push(view(store, &op, r, c)?);
        }
    }
    Ok(ResidentTile { desc: desc.clone(), data })
}

/// A compute part's partial products, committed when the event completes.
struct PartialBlock {
    out: MatrixKey,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    sums: Vec<i64>,
    contrib: usize,
}

struct Machine<'a> {
    layout: &'a CoreLayout,
    graph: &'a WorkloadGraph,
    store: Store<'a>,
    macros: HashMap<MacroId, MacroState>,
    inflight: HashMap<EventId, Vec<PartialBlock>>,
    macs: u64,
}

impl<'a> Machine<'a> {
    fn state(&mut self, m: MacroId) -> &mut MacroState {
        self.macros.entry(m).or_insert_with(|| MacroState::new(m, MacroMode::Normal))
    }

    fn compute_part(&mut self, id: EventId, part: &MacPart) -> Result<PartialBlock, SimError> {
        let cim = |source| SimError::Cim { event: id, source };
        let state = self.macros.entry(part.target).or_insert_with(|| MacroState::new(part.target, MacroMode::Normal));
        let desc = state
            .tile(part.region)
            .map(|t| t.desc.clone())
            .ok_or_else(|| cim(CimError::Dataflow(format!("{}: empty region {:?}", part.target, part.region))))?;
        let mut sums = Vec::new();
        let mut vector = Vec::new();
        for line in part.lines.clone() {
            vector.clear();
            match part.side {
                Side::Right => {
                    for k in desc.rows.clone() {
                        vector.push(view(&self.store, &part.streamed, line, k)?);
                    }
                }
                Side::Left => {
                    for k in desc.cols.clone() {
                        vector.push(view(&self.store, &part.streamed, k, line)?);
                    }
                }
            }
            let state = self.macros.get_mut(&part.target).expect("state created above");
            sums.push(state.compute_step(part.region, part.side, &vector).map_err(cim)?);
        }
        let (rows, cols, contrib) = match part.side {
            Side::Right => (part.lines.clone(), desc.cols.clone(), desc.rows.len()),
            Side::Left => (desc.rows.clone(), part.lines.clone(), desc.cols.len()),
        };
        // lay the per-line results out row-major over `rows x cols`
        let flat = match part.side {
            Side::Right => sums.concat(),
            Side::Left => {
                let mut flat = vec![0i64; rows.len() * cols.len()];
                for (j, col) in sums.iter().enumerate() {
                    for (i, v) in col.iter().enumerate() {
                        flat[i * cols.len() + j] = *v;
                    }
                }
                flat
            }
        };
        self.macs += (part.lines.len() * desc.words()) as u64;
        Ok(PartialBlock {
            out: part.out,
            rows,
            cols,
            sums: flat,
            contrib,
        })
    }

    fn dispatch(&mut self, e: &ScheduleEvent) -> Result<(), SimError> {
        let cim = |source| SimError::Cim { event: e.id, source };
        match &e.payload {
            Payload::Write { target, region, tile } => {
                let data = load_tile(&self.store, tile)?;
                let layout = self.layout;
                self.state(*target).write_tile(*region, data, layout).map_err(cim)?;
            }
            Payload::Compute { parts, .. } => {
                for part in parts {
                    self.state(part.target).begin_compute().map_err(cim)?;
                }
                let mut blocks = Vec::with_capacity(parts.len());
                for part in parts {
                    blocks.push(self.compute_part(e.id, part)?);
                }
                self.inflight.insert(e.id, blocks);
            }
            Payload::Mode { target, mode } => {
                let layout = self.layout;
                self.state(*target).configure_mode(*mode, layout).map_err(cim)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn complete(&mut self, e: &ScheduleEvent) -> Result<(), SimError> {
        match &e.payload {
            Payload::Write { target, .. } => self.state(*target).end_rewrite(),
            Payload::Compute { parts, .. } => {
                for part in parts {
                    self.state(part.target).end_compute();
                }
                for b in self.inflight.remove(&e.id).unwrap_or_default() {
                    self.store.accumulate(b.out, b.rows, b.cols, &b.sums, b.contrib)?;
                }
            }
            Payload::Softmax { input, output, rows, .. } => {
                let block = self.store.rows(input, rows.clone())?;
                let probs = softmax_rows(&block, self.graph.scale).map_err(|err| SimError::Dataflow(err.to_string()))?;
                let total = self.store.slot(input)?.rows;
                self.store.put_rows(*output, rows.clone(), &probs.as_fixed(), total);
            }
            Payload::Rank { layer, stream } => self.check_rank(*layer, *stream)?,
            Payload::Assemble { layer, stream, .. } => {
                let g = self.graph;
                let pv = g.node_id(*layer, *stream, OpKind::PV);
                let heads = (0..g.model.heads)
                    .map(|head| self.store.matrix(&MatrixKey::Result { node: pv, head }))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut out = FixedMatrix::hconcat(&heads).map_err(|err| SimError::Dataflow(err.to_string()))?;
                if let Some(keep) = g.keep_set(*layer, *stream) {
                    out = out.gather_rows(keep);
                }
                self.store.insert(MatrixKey::Input { layer: layer + 1, stream: *stream }, &out);
            }
            _ => {}
        }
        Ok(())
    }

    /// The DTPU recomputes the ranking from the simulated probabilities; it
    /// must select the keep set the graph was built with.
    fn check_rank(&self, layer: usize, stream: crate::workload::Stream) -> Result<(), SimError> {
        let g = self.graph;
        let Some(expected) = g.keep_set(layer, stream) else {
            return Ok(());
        };
        let node = g.node_id(layer, g.ranking_consumer(layer, stream), OpKind::Softmax);
        let probs = (0..g.model.heads)
            .map(|head| {
                let m = self.store.matrix(&MatrixKey::Result { node, head })?;
                ProbMatrix::from_codes(m.rows(), m.cols(), m.data().to_vec())
                    .map_err(|err| SimError::Dataflow(err.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&ProbMatrix> = probs.iter().collect();
        let chosen = select_tokens(&head_averaged_scores(&refs), g.pruning.ratio(layer));
        if chosen != *expected {
            return Err(SimError::Dataflow(format!(
                "layer {layer} stream {stream}: ranked keep set differs from the scheduled one"
            )));
        }
        Ok(())
    }
}

fn completion_order(kind: EventKind) -> u8 {
    match kind {
        EventKind::Rewrite => 0,
        _ => 1,
    }
}

/// Replays `schedule`. Events dispatch at their scheduled start or, if a
/// dependency is late, as soon as it completes; completions at a cycle
/// commit before dispatches at that cycle, rewrites first.
pub fn simulate(
    schedule: &Schedule,
    layout: &CoreLayout,
    graph: &WorkloadGraph,
    operands: &OperandSet,
    mode: SimMode,
) -> Result<(SimOutputs, SimReport), SimError> {
    let events = &schedule.events;
    let n = events.len();
    let mut machine = (mode == SimMode::Functional).then(|| Machine {
        layout,
        graph,
        store: Store::new(graph, operands),
        macros: HashMap::new(),
        inflight: HashMap::new(),
        macs: 0,
    });
    let mut pending: BTreeSet<(u64, usize)> = events.iter().map(|e| (e.start, e.id.0)).collect();
    let mut active: BTreeSet<(u64, u8, usize)> = BTreeSet::new();
    let mut done = vec![false; n];
    let mut started = vec![None::<u64>; n];
    let mut lane_holder: HashMap<Lane, (u64, EventId)> = HashMap::new();
    let mut t = 0u64;
    loop {
        loop {
            let mut progress = false;
            while let Some(&(end, prio, id)) = active.first() {
                if end > t {
                    break;
                }
                active.remove(&(end, prio, id));
                if let Some(m) = machine.as_mut() {
                    m.complete(&events[id])?;
                }
                done[id] = true;
                progress = true;
            }
            let ready: Vec<(u64, usize)> = pending
                .range(..(t + 1, 0))
                .filter(|&&(_, id)| events[id].deps.iter().all(|d| d.0 < n && done[d.0]))
                .copied()
                .collect();
            for (start, id) in ready {
                let e = &events[id];
                pending.remove(&(start, id));
                if e.duration > 0 {
                    for lane in e.lanes() {
                        if let Some(&(until, holder)) = lane_holder.get(&lane) {
                            if until > t {
                                return Err(SimError::Conflict {
                                    event: e.id,
                                    holder,
                                    lane: format!("{lane:?}"),
                                    cycle: t,
                                });
                            }
                        }
                        lane_holder.insert(lane, (t + e.duration, e.id));
                    }
                }
                if let Some(m) = machine.as_mut() {
                    m.dispatch(e)?;
                }
                started[id] = Some(t);
                active.insert((t + e.duration, completion_order(e.kind), id));
                progress = true;
            }
            if !progress {
                break;
            }
        }
        if pending.is_empty() && active.is_empty() {
            break;
        }
        let next_end = active.first().map(|a| a.0);
        let next_start = pending.range((t + 1, 0)..).next().map(|p| p.0);
        t = match (next_end, next_start) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(SimError::Deadlock {
                    cycle: t,
                    waiting: pending.iter().take(8).map(|&(_, id)| EventId(id)).collect(),
                })
            }
        };
    }
    let log: Vec<LogEntry> = events
        .iter()
        .map(|e| {
            let start = started[e.id.0].expect("every event dispatched");
            LogEntry {
                id: e.id,
                start,
                end: start + e.duration,
                kind: e.kind,
                stage: e.stage,
                macros: e
                    .resources
                    .iter()
                    .filter_map(|r| match r {
                        crate::schedule::Resource::Macro(m, _) => Some(*m),
                        _ => None,
                    })
                    .collect(),
            }
        })
        .collect();
    let mut report = SimReport::from_log(schedule, log);
    let outputs = match machine {
        Some(m) => {
            report.mac_total = m.macs;
            SimOutputs {
                values: m.store.outputs(),
            }
        }
        None => SimOutputs::default(),
    };
    Ok((outputs, report))
}

/// Nodes of `graph` whose kind is one of `kinds`; a stage filter for
/// [`rewrite_fraction`].
pub fn stages(graph: &WorkloadGraph, kinds: &[OpKind]) -> Vec<crate::workload::NodeId> {
    graph.nodes.iter().filter(|n| kinds.contains(&n.kind)).map(|n| n.id).collect()
}
