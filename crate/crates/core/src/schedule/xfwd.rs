//! Mixed-stationary cross-forwarding on hybrid macros.
//!
//! Macro `t` holds row block `t` of the left operand in its input region and
//! column block `t` of the right operand in its weight region. In step `t`
//! it broadcasts its rows to the weight regions of some macros (each
//! producing a block of full output rows) and, concurrently on the column
//! bus, its columns to the input regions of others. Every output block
//! `(s, u)` is produced exactly once per k-chunk.

use std::ops::Range;

use crate::cim::{CoreId, MacroId, MacroMode, Region, Side};
use crate::fixed::Precision;
use crate::workload::{MatrixKey, NodeId};

use super::{Builder, EventId, Feed, MacPart, Operand, Resource, ScheduleError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum XfwdOrder {
    /// Step `t` covers blocks `(t, u >= t)` and `(s > t, t)`; macro `t` holds
    /// nothing live after step `t`.
    ReleaseEarly,
    /// Step `t` covers `(t, u <= t)` and `(s < t, t)`; step `t` needs only
    /// macros `0..=t`, so it can start while later macros are still loading.
    AcquireLate,
}

impl XfwdOrder {
    /// Output blocks computed in step `t` by the row and the column broadcast.
    pub fn step_blocks(self, t: usize, macros: usize) -> (Vec<usize>, Vec<usize>) {
        match self {
            XfwdOrder::ReleaseEarly => ((t..macros).collect(), (t + 1..macros).collect()),
            XfwdOrder::AcquireLate => ((0..=t).collect(), (0..t).collect()),
        }
    }
}

/// One residency of the operands: per-macro row and column blocks for one
/// k-chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XfwdPass {
    pub rows: Vec<Range<usize>>,
    pub cols: Vec<Range<usize>>,
    pub k: Range<usize>,
}

fn blocks(start: usize, len: usize, size: usize, count: usize) -> Vec<Range<usize>> {
    (0..count)
        .map(|t| {
            let s = (start + t * size).min(start + len);
            s..(s + size).min(start + len)
        })
        .collect()
}

/// Splits an `m x k` by `k x n` product into passes that fit `in_cap` and
/// `w_cap` words per macro region. Passes run over row groups, then column
/// groups, then k-chunks.
pub fn xfwd_plan(m: usize, k: usize, n: usize, macros: usize, in_cap: usize, w_cap: usize) -> Vec<XfwdPass> {
    if m == 0 || k == 0 || n == 0 || macros == 0 {
        return Vec::new();
    }
    let p = macros.min(m).min(n);
    let (r0, c0) = (m.div_ceil(p), n.div_ceil(p));
    let kc = k.min(in_cap / r0).min(w_cap / c0).max(1);
    let r = r0.min(in_cap / kc).max(1);
    let c = c0.min(w_cap / kc).max(1);
    let mut passes = Vec::new();
    for rg in (0..m).step_by(p * r) {
        for cg in (0..n).step_by(p * c) {
            for k0 in (0..k).step_by(kc) {
                passes.push(XfwdPass {
                    rows: blocks(rg, (m - rg).min(p * r), r, p),
                    cols: blocks(cg, (n - cg).min(p * c), c, p),
                    k: k0..(k0 + kc).min(k),
                });
            }
        }
    }
    passes
}

#[derive(Debug, Clone)]
pub struct XfwdRequest {
    pub core: CoreId,
    pub precision: Precision,
    /// `m x k` view held row-wise in the input regions.
    pub a: Operand,
    /// `k x n` view held column-wise in the weight regions.
    pub b: Operand,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out: MatrixKey,
    pub macros: Vec<MacroId>,
    pub order: XfwdOrder,
    pub a_deps: Vec<EventId>,
    pub b_deps: Vec<EventId>,
    pub stage: Option<NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct XfwdFragment {
    pub rewrites: Vec<EventId>,
    /// `(pass, step, event)` for every row or column broadcast.
    pub steps: Vec<(usize, usize, EventId)>,
}

impl XfwdFragment {
    pub fn all(&self) -> impl Iterator<Item = EventId> + '_ {
        self.rewrites.iter().copied().chain(self.steps.iter().map(|s| s.2))
    }
}

/// Loads each pass's tiles and emits the per-step row and column broadcasts.
pub fn schedule_cross_forwarding(b: &mut Builder<'_>, req: &XfwdRequest) -> Result<XfwdFragment, ScheduleError> {
    if let Some(m) = req.macros.iter().find(|&&m| b.macro_mode(m) != MacroMode::Hybrid) {
        return Err(ScheduleError::Mode(format!("{m}: cross-forwarding needs hybrid mode")));
    }
    if req.macros.iter().any(|m| m.core != req.core) {
        return Err(ScheduleError::Scheduling("cross-forwarding macros span cores".into()));
    }
    let layout = b.layout();
    let in_cap = layout.region_words(MacroMode::Hybrid, Region::Input, req.precision);
    let w_cap = layout.region_words(MacroMode::Hybrid, Region::Weight, req.precision);
    let plan = xfwd_plan(req.m, req.k, req.n, req.macros.len(), in_cap, w_cap);
    let mut frag = XfwdFragment::default();
    for (pi, pass) in plan.iter().enumerate() {
        let p = pass.rows.len();
        let mut sources = vec![(None, None); p];
        let load = |b: &mut Builder<'_>, t: usize, frag: &mut XfwdFragment| -> Result<(Option<EventId>, Option<EventId>), ScheduleError> {
            let target = req.macros[t];
            let mut ids = (None, None);
            if !pass.rows[t].is_empty() {
                let tile = req.a.tile(pass.rows[t].clone(), pass.k.clone(), req.precision);
                let id = b.rewrite(target, Region::Input, tile, &req.a_deps, req.stage)?;
                frag.rewrites.push(id);
                ids.0 = Some(id);
            }
            if !pass.cols[t].is_empty() {
                let tile = req.b.tile(pass.k.clone(), pass.cols[t].clone(), req.precision);
                let id = b.rewrite(target, Region::Weight, tile, &req.b_deps, req.stage)?;
                frag.rewrites.push(id);
                ids.1 = Some(id);
            }
            Ok(ids)
        };
        if req.order == XfwdOrder::ReleaseEarly {
            for (t, src) in sources.iter_mut().enumerate() {
                *src = load(b, t, &mut frag)?;
            }
        }
        for t in 0..p {
            if req.order == XfwdOrder::AcquireLate {
                sources[t] = load(b, t, &mut frag)?;
            }
            let (a_src, b_src) = sources[t];
            let (row_targets, col_targets) = req.order.step_blocks(t, p);
            let row_parts: Vec<MacPart> = if pass.rows[t].is_empty() {
                Vec::new()
            } else {
                row_targets
                    .into_iter()
                    .filter(|&u| !pass.cols[u].is_empty())
                    .map(|u| MacPart {
                        target: req.macros[u],
                        region: Region::Weight,
                        side: Side::Right,
                        streamed: req.a,
                        lines: pass.rows[t].clone(),
                        out: req.out,
                    })
                    .collect()
            };
            let col_parts: Vec<MacPart> = if pass.cols[t].is_empty() {
                Vec::new()
            } else {
                col_targets
                    .into_iter()
                    .filter(|&s| !pass.rows[s].is_empty())
                    .map(|s| MacPart {
                        target: req.macros[s],
                        region: Region::Input,
                        side: Side::Left,
                        streamed: req.b,
                        lines: pass.cols[t].clone(),
                        out: req.out,
                    })
                    .collect()
            };
            if !row_parts.is_empty() {
                let deps: Vec<EventId> = a_src.into_iter().collect();
                let id = b.compute(row_parts, Resource::RowBus(req.core), Feed::Forward, &deps, req.stage)?;
                b.add_reader(req.macros[t], Region::Input, id);
                frag.steps.push((pi, t, id));
            }
            if !col_parts.is_empty() {
                let deps: Vec<EventId> = b_src.into_iter().collect();
                let id = b.compute(col_parts, Resource::ColBus(req.core), Feed::Forward, &deps, req.stage)?;
                b.add_reader(req.macros[t], Region::Weight, id);
                frag.steps.push((pi, t, id));
            }
        }
    }
    Ok(frag)
}
