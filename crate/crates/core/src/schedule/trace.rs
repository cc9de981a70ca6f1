//! Line-oriented text form of a schedule, stable enough for golden files.
//!
//! `e<id> @<start> +<duration> <kind> [<resources>] {<payload>} stage=<node|-> deps=<ids|->`

use std::fmt::Write;

use crate::cim::Side;

use super::{EventKind, Payload, ScheduleEvent};

fn range(r: &std::ops::Range<usize>) -> String {
    format!("{}..{}", r.start, r.end)
}

pub(super) fn format_payload(p: &Payload) -> String {
    match p {
        Payload::None => "-".into(),
        Payload::Transfer { key, bits } => format!("xfer {key} bits={bits}"),
        Payload::Write { target, region, tile } => format!(
            "write {target}.{} {}{}[{},{}]",
            region.tag(),
            tile.key,
            if tile.transposed { "'" } else { "" },
            range(&tile.rows),
            range(&tile.cols)
        ),
        Payload::Compute { parts, .. } => {
            let mut s = String::from("mac");
            for part in parts {
                let side = match part.side {
                    Side::Right => 'r',
                    Side::Left => 'l',
                };
                let _ = write!(
                    s,
                    " {}.{}:{side}:{}[{}]>{}",
                    part.target,
                    part.region.tag(),
                    part.streamed,
                    range(&part.lines),
                    part.out
                );
            }
            s
        }
        Payload::Softmax { input, output, rows, cols } => format!("softmax {input}[{}]x{cols}>{output}", range(rows)),
        Payload::Rank { layer, stream } => format!("rank L{layer}.{stream}"),
        Payload::Assemble { layer, stream, bits } => format!("assemble L{layer}.{stream} bits={bits}"),
        Payload::Mode { target, mode } => format!("mode {target}={}", mode.mode_config()),
    }
}

pub(super) fn format_event(e: &ScheduleEvent) -> String {
    let resources: Vec<String> = e.resources.iter().map(ToString::to_string).collect();
    let deps: Vec<String> = e.deps.iter().map(ToString::to_string).collect();
    format!(
        "{} @{} +{} {} [{}] {{{}}} stage={} deps={}",
        e.id,
        e.start,
        e.duration,
        e.kind.name(),
        resources.join(","),
        format_payload(&e.payload),
        e.stage.map_or_else(|| "-".to_string(), |n| n.to_string()),
        if deps.is_empty() { "-".to_string() } else { deps.join(",") }
    )
}

/// The scalar fields of one trace line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub id: usize,
    pub start: u64,
    pub duration: u64,
    pub kind: EventKind,
    pub resources: Vec<String>,
    pub payload: String,
    pub deps: Vec<usize>,
}

pub fn parse_trace_line(line: &str) -> Option<TraceLine> {
    let (head, rest) = line.split_once(" {")?;
    let (payload, tail) = rest.rsplit_once("} ")?;
    let mut it = head.split_whitespace();
    let id = it.next()?.strip_prefix('e')?.parse().ok()?;
    let start = it.next()?.strip_prefix('@')?.parse().ok()?;
    let duration = it.next()?.strip_prefix('+')?.parse().ok()?;
    let kind = EventKind::parse(it.next()?)?;
    let res = it.next()?.strip_prefix('[')?.strip_suffix(']')?;
    let resources = res.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
    let deps_field = tail.split_whitespace().find_map(|t| t.strip_prefix("deps="))?;
    let deps = if deps_field == "-" {
        Vec::new()
    } else {
        deps_field
            .split(',')
            .map(|d| d.strip_prefix('e').and_then(|n| n.parse().ok()))
            .collect::<Option<Vec<_>>>()?
    };
    Some(TraceLine {
        id,
        start,
        duration,
        kind,
        resources,
        payload: payload.to_string(),
        deps,
    })
}
