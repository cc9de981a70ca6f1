use std::collections::BTreeMap;
use std::fmt::Write;

use num_rational::Ratio;

use crate::cim::MacroId;
use crate::schedule::{EventId, EventKind, Schedule};
use crate::workload::NodeId;

use super::SimError;

/// Realized timing of one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub id: EventId,
    pub start: u64,
    pub end: u64,
    pub kind: EventKind,
    pub stage: Option<NodeId>,
    pub macros: Vec<MacroId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimReport {
    pub total_cycles: u64,
    /// Busy cycles per resource, keyed by the resource's trace name.
    pub busy: BTreeMap<String, u64>,
    pub kind_busy: BTreeMap<EventKind, u64>,
    /// Cycles in which some macro rewrites while another computes.
    pub overlap_cycles: u64,
    /// Cycles before the end in which no macro and no SFU computes.
    pub bubble_cycles: u64,
    pub mac_total: u64,
    pub offchip_bits_read: u64,
    pub offchip_bits_written: u64,
    pub log: Vec<LogEntry>,
}

/// Length of the union of half-open intervals.
fn union_len(mut spans: Vec<(u64, u64)>) -> u64 {
    spans.retain(|s| s.1 > s.0);
    spans.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(u64, u64)> = None;
    for (s, e) in spans {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    total + cur.map_or(0, |(s, e)| e - s)
}

/// Cycles covered by `a` but not by `b`.
fn difference_len(a: &[(u64, u64)], b: &[(u64, u64)]) -> u64 {
    let mut both: Vec<(u64, u64)> = a.to_vec();
    both.extend_from_slice(b);
    union_len(both) - union_len(b.to_vec())
}

impl SimReport {
    pub(super) fn from_log(schedule: &Schedule, log: Vec<LogEntry>) -> Self {
        let mut busy: BTreeMap<String, u64> = BTreeMap::new();
        let mut kind_busy: BTreeMap<EventKind, u64> = BTreeMap::new();
        let (mut read, mut written) = (0, 0);
        for (e, l) in schedule.events.iter().zip(&log) {
            let d = l.end - l.start;
            for r in &e.resources {
                *busy.entry(r.to_string()).or_default() += d;
            }
            *kind_busy.entry(e.kind).or_default() += d;
            match (e.kind, &e.payload) {
                (EventKind::OffchipRead, p) => read += p.bits(),
                (EventKind::OffchipWrite, p) => written += p.bits(),
                _ => {}
            }
        }
        let total_cycles = log.iter().map(|l| l.end).max().unwrap_or(0);
        let spans = |pred: &dyn Fn(&LogEntry) -> bool| -> Vec<(u64, u64)> {
            log.iter().filter(|l| pred(l)).map(|l| (l.start, l.end)).collect()
        };
        let rewrites = spans(&|l| l.kind == EventKind::Rewrite);
        let computes = spans(&|l| l.kind == EventKind::Compute);
        let working = spans(&|l| matches!(l.kind, EventKind::Compute | EventKind::SfuEval));
        // |R ∩ C| = |R| + |C| - |R ∪ C|
        let mut rc = rewrites.clone();
        rc.extend_from_slice(&computes);
        let overlap_cycles = union_len(rewrites) + union_len(computes) - union_len(rc);
        let bubble_cycles = total_cycles - union_len(working);
        let mac_total = schedule.events.iter().map(|e| e.macs).sum();
        SimReport {
            total_cycles,
            busy,
            kind_busy,
            overlap_cycles,
            bubble_cycles,
            mac_total,
            offchip_bits_read: read,
            offchip_bits_written: written,
            log,
        }
    }

    pub fn busy_of(&self, kind: EventKind) -> u64 {
        self.kind_busy.get(&kind).copied().unwrap_or(0)
    }

    /// Summed duration of `kind` events serving `stages`.
    pub fn stage_busy(&self, kind: EventKind, stages: &[NodeId]) -> u64 {
        self.log
            .iter()
            .filter(|l| l.kind == kind && l.stage.is_some_and(|s| stages.contains(&s)))
            .map(|l| l.end - l.start)
            .sum()
    }

    /// Flat `key=value` block, one entry per line, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total_cycles={}", self.total_cycles);
        let _ = writeln!(s, "overlap_cycles={}", self.overlap_cycles);
        let _ = writeln!(s, "bubble_cycles={}", self.bubble_cycles);
        let _ = writeln!(s, "mac_total={}", self.mac_total);
        let _ = writeln!(s, "offchip_bits_read={}", self.offchip_bits_read);
        let _ = writeln!(s, "offchip_bits_written={}", self.offchip_bits_written);
        let _ = writeln!(s, "events={}", self.log.len());
        for k in EventKind::ALL {
            let _ = writeln!(s, "kind.{}={}", k.name(), self.busy_of(k));
        }
        for (r, b) in &self.busy {
            let _ = writeln!(s, "busy.{r}={b}");
        }
        s
    }
}

/// Rewrite cycles of `stages` not hidden under their compute, over the
/// cycles in which any of their events is active.
pub fn rewrite_fraction(report: &SimReport, stages: &[NodeId]) -> Result<Ratio<u64>, SimError> {
    let ours: Vec<&LogEntry> = report
        .log
        .iter()
        .filter(|l| l.stage.is_some_and(|s| stages.contains(&s)))
        .collect();
    let all: Vec<(u64, u64)> = ours.iter().map(|l| (l.start, l.end)).collect();
    let total = union_len(all);
    if total == 0 {
        return Err(SimError::EmptyStage);
    }
    let of = |k: EventKind| -> Vec<(u64, u64)> {
        ours.iter().filter(|l| l.kind == k).map(|l| (l.start, l.end)).collect()
    };
    let exposed = difference_len(&of(EventKind::Rewrite), &of(EventKind::Compute));
    Ok(Ratio::new(exposed, total))
}
