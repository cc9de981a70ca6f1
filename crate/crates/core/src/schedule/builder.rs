//! Incremental list scheduler. Events are placed in program order at the
//! earliest time their dependencies allow and every lane they occupy is free
//! (gaps left by earlier events are back-filled). Read-after-write,
//! write-after-read and write-after-write hazards on macro regions, and
//! data availability of every operand rectangle, become explicit deps.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::cim::{CimError, CoreLayout, MacroId, MacroMode, Region, Side, TileDescriptor};
use crate::workload::{MatrixKey, NodeId};

use super::{lanes, EventId, EventKind, ExecMode, Feed, Lane, MacPart, Payload, Resource, Schedule, ScheduleError, ScheduleEvent};

#[derive(Debug, Clone, Default)]
struct RegionUse {
    writer: Option<EventId>,
    readers: Vec<EventId>,
    tile: Option<TileDescriptor>,
}

#[derive(Debug, Clone)]
struct Produced {
    rows: Range<usize>,
    cols: Range<usize>,
    event: EventId,
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

pub struct Builder<'a> {
    layout: &'a CoreLayout,
    mode: ExecMode,
    events: Vec<ScheduleEvent>,
    lanes: HashMap<Lane, BTreeMap<u64, u64>>,
    producers: HashMap<MatrixKey, Vec<Produced>>,
    regions: HashMap<(MacroId, Region), RegionUse>,
    modes: HashMap<MacroId, MacroMode>,
}

impl<'a> Builder<'a> {
    pub fn new(layout: &'a CoreLayout, mode: ExecMode) -> Self {
        Builder {
            layout,
            mode,
            events: Vec::new(),
            lanes: HashMap::new(),
            producers: HashMap::new(),
            regions: HashMap::new(),
            modes: HashMap::new(),
        }
    }

    pub fn layout(&self) -> &CoreLayout {
        self.layout
    }

    pub fn end(&self, id: EventId) -> u64 {
        self.events[id.0].end()
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

    pub fn finish(self) -> Schedule {
        Schedule {
            mode: self.mode,
            events: self.events,
        }
    }

    pub fn macro_mode(&self, m: MacroId) -> MacroMode {
        self.modes.get(&m).copied().unwrap_or(MacroMode::Normal)
    }

    pub fn resident(&self, m: MacroId, region: Region) -> Option<&TileDescriptor> {
        self.regions.get(&(m, region)).and_then(|u| u.tile.as_ref())
    }

    fn earliest_fit(&self, lanes: &[Lane], ready: u64, duration: u64) -> u64 {
        let mut t = ready;
        if duration == 0 {
            return t;
        }
        loop {
            let mut moved = false;
            for lane in lanes {
                let Some(busy) = self.lanes.get(lane) else {
                    continue;
                };
                if let Some((_, &end)) = busy.range(..t + duration).next_back() {
                    if end > t {
                        t = end;
                        moved = true;
                    }
                }
            }
            if !moved {
                return t;
            }
        }
    }

    /// Places an event with explicit deps only.
    #[allow(clippy::too_many_arguments)]
    pub fn place(
        &mut self,
        kind: EventKind,
        resources: Vec<Resource>,
        duration: u64,
        mut deps: Vec<EventId>,
        payload: Payload,
        stage: Option<NodeId>,
        macs: u64,
    ) -> EventId {
        deps.sort();
        deps.dedup();
        let ready = deps.iter().map(|&d| self.end(d)).max().unwrap_or(0);
        let mut occupied: Vec<Lane> = resources.iter().flat_map(|&r| lanes(kind, r)).collect();
        occupied.sort();
        occupied.dedup();
        let start = self.earliest_fit(&occupied, ready, duration);
        if duration > 0 {
            for lane in &occupied {
                self.lanes.entry(*lane).or_default().insert(start, start + duration);
            }
        }
        let id = EventId(self.events.len());
        self.events.push(ScheduleEvent {
            id,
            start,
            duration,
            kind,
            resources,
            payload,
            deps,
            stage,
            macs,
        });
        id
    }

    /// Events that produced any part of `rows x cols` of `key`.
    pub fn producers(&self, key: &MatrixKey, rows: &Range<usize>, cols: &Range<usize>) -> Vec<EventId> {
        self.producers
            .get(key)
            .map(|list| {
                list.iter()
                    .filter(|p| overlaps(&p.rows, rows) && overlaps(&p.cols, cols))
                    .map(|p| p.event)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Marks `rows x cols` of `key` as (re)produced by `event`.
    pub fn publish(&mut self, key: MatrixKey, rows: Range<usize>, cols: Range<usize>, event: EventId) {
        if rows.is_empty() || cols.is_empty() {
            return;
        }
        self.producers.entry(key).or_default().push(Produced { rows, cols, event });
    }

    /// Replaces every earlier producer of `key` by `event` (e.g. after the
    /// matrix went through off-chip memory).
    pub fn republish(&mut self, key: MatrixKey, rows: Range<usize>, cols: Range<usize>, event: EventId) {
        self.producers.remove(&key);
        self.publish(key, rows, cols, event);
    }

    fn check_region(&self, m: MacroId, region: Region) -> Result<MacroMode, ScheduleError> {
        let mode = self.macro_mode(m);
        let ok = match mode {
            MacroMode::Normal => region == Region::Whole,
            MacroMode::Hybrid => region != Region::Whole,
        };
        if ok {
            Ok(mode)
        } else {
            Err(ScheduleError::Mode(format!("{m}: region {region:?} unavailable in {mode:?} mode")))
        }
    }

    fn hazards(&self, m: MacroId, region: Region) -> Vec<EventId> {
        let mut deps = Vec::new();
        for r in [Region::Whole, Region::Input, Region::Weight] {
            if !r.overlaps(region) {
                continue;
            }
            if let Some(u) = self.regions.get(&(m, r)) {
                deps.extend(u.writer);
                deps.extend(u.readers.iter().copied());
            }
        }
        deps
    }

    /// Loads a tile into a macro region through the core's write port.
    pub fn rewrite(
        &mut self,
        target: MacroId,
        region: Region,
        tile: TileDescriptor,
        extra: &[EventId],
        stage: Option<NodeId>,
    ) -> Result<EventId, ScheduleError> {
        let mode = self.check_region(target, region)?;
        let capacity = self.layout.region_bits(mode, region);
        if tile.bits() > capacity {
            return Err(CimError::Capacity {
                bits: tile.bits(),
                capacity,
            }
            .into());
        }
        let mut deps = extra.to_vec();
        let (rows, cols) = if tile.transposed {
            (tile.cols.clone(), tile.rows.clone())
        } else {
            (tile.rows.clone(), tile.cols.clone())
        };
        deps.extend(self.producers(&tile.key, &rows, &cols));
        deps.extend(self.hazards(target, region));
        let duration = self.layout.rewrite_cycles(tile.bits());
        let id = self.place(
            EventKind::Rewrite,
            vec![Resource::WritePort(target.core), Resource::Macro(target, region)],
            duration,
            deps,
            Payload::Write {
                target,
                region,
                tile: tile.clone(),
            },
            stage,
            0,
        );
        self.regions.insert(
            (target, region),
            RegionUse {
                writer: Some(id),
                readers: Vec::new(),
                tile: Some(tile),
            },
        );
        Ok(id)
    }

    /// One broadcast step sequence over `bus`; every part streams its lines
    /// through the tile resident in its region.
    pub fn compute(
        &mut self,
        parts: Vec<MacPart>,
        bus: Resource,
        feed: Feed,
        extra: &[EventId],
        stage: Option<NodeId>,
    ) -> Result<EventId, ScheduleError> {
        let mut deps = extra.to_vec();
        let mut steps = 0usize;
        let mut macs = 0u64;
        let mut outputs = Vec::with_capacity(parts.len());
        let mut resources = vec![bus];
        let mut streamed = std::collections::HashSet::new();
        let mut bits = 0u64;
        for part in &parts {
            self.check_region(part.target, part.region)?;
            let u = self.regions.get(&(part.target, part.region));
            let tile = u.and_then(|u| u.tile.clone()).ok_or_else(|| {
                CimError::Dataflow(format!("{}: no operand in region {:?}", part.target, part.region))
            })?;
            deps.extend(u.and_then(|u| u.writer));
            let (view_rows, view_cols, out_rows, out_cols) = match part.side {
                Side::Right => (part.lines.clone(), tile.rows.clone(), part.lines.clone(), tile.cols.clone()),
                Side::Left => (tile.cols.clone(), part.lines.clone(), tile.rows.clone(), part.lines.clone()),
            };
            let (sr, sc) = part.streamed.stored_rect(view_rows, view_cols);
            deps.extend(self.producers(&part.streamed.key, &sr, &sc));
            if streamed.insert((part.streamed.key, sr.clone(), sc.clone())) {
                bits += (sr.len() * sc.len()) as u64 * u64::from(tile.precision.bits());
            }
            steps = steps.max(part.lines.len());
            macs += (part.lines.len() * tile.words()) as u64;
            outputs.push((part.out, out_rows, out_cols));
            resources.push(Resource::Macro(part.target, part.region));
        }
        let duration = self.layout.compute_cycles(steps as u64);
        let targets: Vec<(MacroId, Region)> = parts.iter().map(|p| (p.target, p.region)).collect();
        let id = self.place(EventKind::Compute, resources, duration, deps, Payload::Compute { parts, feed, bits }, stage, macs);
        for t in targets {
            self.regions.entry(t).or_default().readers.push(id);
        }
        for (key, rows, cols) in outputs {
            self.publish(key, rows, cols, id);
        }
        Ok(id)
    }

    /// Records `id` as reading `region` (e.g. a macro forwarding its tile),
    /// so later rewrites of the region wait for it.
    pub fn add_reader(&mut self, m: MacroId, region: Region, id: EventId) {
        self.regions.entry((m, region)).or_default().readers.push(id);
    }

    /// Switches a macro's mode once everything touching it has finished.
    pub fn reconfigure(&mut self, target: MacroId, mode: MacroMode, stage: Option<NodeId>) -> Option<EventId> {
        if self.macro_mode(target) == mode {
            return None;
        }
        let deps = self.hazards(target, Region::Whole);
        let id = self.place(
            EventKind::Reconfigure,
            vec![Resource::Macro(target, Region::Whole)],
            self.layout.reconfig_cycles,
            deps,
            Payload::Mode { target, mode },
            stage,
            0,
        );
        for r in [Region::Whole, Region::Input, Region::Weight] {
            self.regions.remove(&(target, r));
        }
        let fresh: &[Region] = match mode {
            MacroMode::Normal => &[Region::Whole],
            MacroMode::Hybrid => &[Region::Input, Region::Weight],
        };
        for &r in fresh {
            self.regions.insert(
                (target, r),
                RegionUse {
                    writer: Some(id),
                    ..RegionUse::default()
                },
            );
        }
        self.modes.insert(target, mode);
        Some(id)
    }

    /// Softmax of `rows` of `input` (all `cols` columns) on the SFU.
    #[allow(clippy::too_many_arguments)]
    pub fn softmax(
        &mut self,
        input: MatrixKey,
        output: MatrixKey,
        rows: Range<usize>,
        cols: usize,
        extra: &[EventId],
        stage: Option<NodeId>,
    ) -> EventId {
        let mut deps = extra.to_vec();
        deps.extend(self.producers(&input, &rows, &(0..cols)));
        let duration = self.layout.sfu_cycles((rows.len() * cols) as u64);
        let id = self.place(
            EventKind::SfuEval,
            vec![Resource::Sfu],
            duration,
            deps,
            Payload::Softmax {
                input,
                output,
                rows: rows.clone(),
                cols,
            },
            stage,
            0,
        );
        self.publish(output, rows, 0..cols, id);
        id
    }

    /// Moves `bits` of `key` through off-chip memory.
    pub fn offchip(
        &mut self,
        kind: EventKind,
        key: MatrixKey,
        bits: u64,
        deps: Vec<EventId>,
        stage: Option<NodeId>,
    ) -> EventId {
        let duration = self.layout.offchip_cycles(bits);
        self.place(kind, vec![Resource::Offchip], duration, deps, Payload::Transfer { key, bits }, stage, 0)
    }
}
