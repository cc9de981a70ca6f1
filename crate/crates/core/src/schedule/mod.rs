//! Tiling and cycle-level schedule generation for the three execution modes.

mod builder;
mod modes;
pub mod tiling;
mod trace;
mod validate;
mod ws;
mod xfwd;

use std::fmt;
use std::ops::Range;

use crate::cim::{CimError, CoreId, MacroId, MacroMode, Region, Side, TileDescriptor};
use crate::workload::{MatrixKey, NodeId, Stream};

pub use builder::Builder;
pub use modes::{schedule_workload, GenvPlacement, ScheduleOptions};
pub use tiling::{tile_partition, Orientation, PlannedTile, TilePlan};
pub use trace::{parse_trace_line, TraceLine};
pub use validate::{validate, Violation};
pub use ws::{schedule_weight_stationary, WsGroup, WsRequest, WsFragment};
pub use xfwd::{schedule_cross_forwarding, xfwd_plan, XfwdOrder, XfwdPass, XfwdRequest, XfwdFragment};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("scheduling error: {0}")]
    Scheduling(String),
    #[error(transparent)]
    Cim(#[from] CimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExecMode {
    NonStream,
    LayerStream,
    TileStream,
}

impl ExecMode {
    pub const ALL: [ExecMode; 3] = [ExecMode::NonStream, ExecMode::LayerStream, ExecMode::TileStream];

    pub fn name(self) -> &'static str {
        match self {
            ExecMode::NonStream => "non-stream",
            ExecMode::LayerStream => "layer-stream",
            ExecMode::TileStream => "tile-stream",
        }
    }

    pub fn parse(s: &str) -> Option<ExecMode> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "non-stream" | "nonstream" | "non" => Some(ExecMode::NonStream),
            "layer-stream" | "layerstream" | "layer" => Some(ExecMode::LayerStream),
            "tile-stream" | "tilestream" | "tile" => Some(ExecMode::TileStream),
            _ => None,
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub usize);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Compute,
    Rewrite,
    /// Layer output forwarded on chip to the next layer's input buffer.
    StreamOut,
    OffchipRead,
    OffchipWrite,
    SfuEval,
    DtpuRank,
    Reconfigure,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::Compute,
        EventKind::Rewrite,
        EventKind::StreamOut,
        EventKind::OffchipRead,
        EventKind::OffchipWrite,
        EventKind::SfuEval,
        EventKind::DtpuRank,
        EventKind::Reconfigure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Compute => "compute",
            EventKind::Rewrite => "rewrite",
            EventKind::StreamOut => "stream-out",
            EventKind::OffchipRead => "offchip-read",
            EventKind::OffchipWrite => "offchip-write",
            EventKind::SfuEval => "sfu",
            EventKind::DtpuRank => "dtpu",
            EventKind::Reconfigure => "reconfig",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        EventKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Macro(MacroId, Region),
    WritePort(CoreId),
    RowBus(CoreId),
    ColBus(CoreId),
    /// Tile-based streaming network between cores.
    Tbsn,
    Sfu,
    Dtpu,
    Offchip,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Macro(m, r) => write!(f, "{m}.{}", r.tag()),
            Resource::WritePort(c) => write!(f, "wp{}", c.tag()),
            Resource::RowBus(c) => write!(f, "rb{}", c.tag()),
            Resource::ColBus(c) => write!(f, "cb{}", c.tag()),
            Resource::Tbsn => f.write_str("tbsn"),
            Resource::Sfu => f.write_str("sfu"),
            Resource::Dtpu => f.write_str("dtpu"),
            Resource::Offchip => f.write_str("dram"),
        }
    }
}

/// Exclusive occupancy unit. A hybrid macro's two halves compute
/// independently; anything else on a macro takes both halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lane {
    InputHalf(MacroId),
    WeightHalf(MacroId),
    Other(Resource),
}

pub fn lanes(kind: EventKind, resource: Resource) -> Vec<Lane> {
    match resource {
        Resource::Macro(m, region) => match (kind, region) {
            (EventKind::Compute, Region::Input) => vec![Lane::InputHalf(m)],
            (EventKind::Compute, Region::Weight) => vec![Lane::WeightHalf(m)],
            _ => vec![Lane::InputHalf(m), Lane::WeightHalf(m)],
        },
        other => vec![Lane::Other(other)],
    }
}

/// A matrix, or its transpose, as seen by a consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Operand {
    pub key: MatrixKey,
    pub transposed: bool,
}

impl Operand {
    pub fn plain(key: MatrixKey) -> Self {
        Operand { key, transposed: false }
    }

    pub fn transposed(key: MatrixKey) -> Self {
        Operand { key, transposed: true }
    }

    /// Rectangle of the stored matrix behind a view rectangle.
    pub fn stored_rect(&self, rows: Range<usize>, cols: Range<usize>) -> (Range<usize>, Range<usize>) {
        if self.transposed {
            (cols, rows)
        } else {
            (rows, cols)
        }
    }

    pub fn tile(&self, rows: Range<usize>, cols: Range<usize>, precision: crate::fixed::Precision) -> TileDescriptor {
        TileDescriptor {
            key: self.key,
            transposed: self.transposed,
            rows,
            cols,
            precision,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.key, if self.transposed { "'" } else { "" })
    }
}

/// One macro's share of a compute broadcast: `lines` of the streamed operand
/// meet the tile resident in `region`.
///
/// With [`Side::Right`] the lines are rows `r` of the left operand and the
/// contribution lands in `out[r][tile.cols]`; with [`Side::Left`] they are
/// columns `c` of the right operand and land in `out[tile.rows][c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacPart {
    pub target: MacroId,
    pub region: Region,
    pub side: Side,
    pub streamed: Operand,
    pub lines: Range<usize>,
    pub out: MatrixKey,
}

/// Where a compute event's streamed operand comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feed {
    /// Read from the core's input buffer and broadcast.
    Buffer,
    /// Read out of a neighbouring macro's resident tile.
    Forward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    None,
    Transfer { key: MatrixKey, bits: u64 },
    Write { target: MacroId, region: Region, tile: TileDescriptor },
    /// `bits` counts each distinct streamed element once, however many
    /// macros it is broadcast to.
    Compute { parts: Vec<MacPart>, feed: Feed, bits: u64 },
    Softmax { input: MatrixKey, output: MatrixKey, rows: Range<usize>, cols: usize },
    Rank { layer: usize, stream: Stream },
    /// Concatenates the heads of a layer output and keeps the surviving rows.
    Assemble { layer: usize, stream: Stream, bits: u64 },
    Mode { target: MacroId, mode: MacroMode },
}

impl Payload {
    pub fn bits(&self) -> u64 {
        match self {
            Payload::Transfer { bits, .. } | Payload::Assemble { bits, .. } | Payload::Compute { bits, .. } => *bits,
            Payload::Write { tile, .. } => tile.bits(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub id: EventId,
    pub start: u64,
    pub duration: u64,
    pub kind: EventKind,
    pub resources: Vec<Resource>,
    pub payload: Payload,
    pub deps: Vec<EventId>,
    /// Workload node this event serves, if any.
    pub stage: Option<NodeId>,
    /// Multiply-accumulates a compute event performs.
    pub macs: u64,
}

impl ScheduleEvent {
    pub fn end(&self) -> u64 {
        self.start + self.duration
    }

    pub fn lanes(&self) -> Vec<Lane> {
        let mut out: Vec<Lane> = self.resources.iter().flat_map(|&r| lanes(self.kind, r)).collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub mode: ExecMode,
    pub events: Vec<ScheduleEvent>,
}

impl Schedule {
    pub fn empty(mode: ExecMode) -> Self {
        Schedule { mode, events: Vec::new() }
    }

    pub fn makespan(&self) -> u64 {
        self.events.iter().map(ScheduleEvent::end).max().unwrap_or(0)
    }

    pub fn event(&self, id: EventId) -> &ScheduleEvent {
        &self.events[id.0]
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Total cycles of events of `kind`, optionally restricted to `stages`.
    pub fn busy(&self, kind: EventKind, stages: Option<&[NodeId]>) -> u64 {
        self.events
            .iter()
            .filter(|e| e.kind == kind && stages.is_none_or(|s| e.stage.is_some_and(|n| s.contains(&n))))
            .map(|e| e.duration)
            .sum()
    }

    /// One event per line: id, start, duration, kind, resources, payload, deps.
    pub fn to_trace(&self) -> String {
        let mut out = format!("# schedule mode={} events={} makespan={}\n", self.mode, self.len(), self.makespan());
        for e in &self.events {
            out.push_str(&trace::format_event(e));
            out.push('\n');
        }
        out
    }
}
