//! Structural checks on a finished schedule.

use std::collections::HashMap;
use std::fmt;

use super::{EventId, Lane, Schedule};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// An event starts before one of its dependencies ends.
    EarlyStart { event: EventId, dep: EventId },
    /// A dependency that does not precede the event in program order.
    ForwardDep { event: EventId, dep: EventId },
    /// Two events hold the same lane at the same time.
    LaneConflict { lane: Lane, first: EventId, second: EventId },
    /// Event ids must equal their position.
    BadId { position: usize, id: EventId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EarlyStart { event, dep } => write!(f, "{event} starts before dependency {dep} ends"),
            Violation::ForwardDep { event, dep } => write!(f, "{event} depends on later event {dep}"),
            Violation::LaneConflict { lane, first, second } => write!(f, "{first} and {second} overlap on {lane:?}"),
            Violation::BadId { position, id } => write!(f, "event at position {position} carries id {id}"),
        }
    }
}

pub fn validate(schedule: &Schedule) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for (i, e) in schedule.events.iter().enumerate() {
        if e.id.0 != i {
            out.push(Violation::BadId { position: i, id: e.id });
        }
    }
    if !out.is_empty() {
        return Err(out);
    }
    let mut by_lane: HashMap<Lane, Vec<(u64, u64, EventId)>> = HashMap::new();
    for e in &schedule.events {
        for &d in &e.deps {
            if d.0 >= e.id.0 {
                out.push(Violation::ForwardDep { event: e.id, dep: d });
            } else if schedule.event(d).end() > e.start {
                out.push(Violation::EarlyStart { event: e.id, dep: d });
            }
        }
        if e.duration > 0 {
            for lane in e.lanes() {
                by_lane.entry(lane).or_default().push((e.start, e.end(), e.id));
            }
        }
    }
    for (lane, mut spans) in by_lane {
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                out.push(Violation::LaneConflict { lane, first: w[0].2, second: w[1].2 });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
