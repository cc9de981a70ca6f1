//! Property suites shared by the `properties` and `acceptance` targets.
//! Each suite drives its own proptest runner so the acceptance run can
//! report it as one line.

#![allow(dead_code)]

use std::collections::BTreeMap;

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use streamdcim::cim::{CoreId, CoreLayout, MacroId, MacroMode, Side};
use streamdcim::config::ExperimentConfig;
use streamdcim::energy::{accumulate, EnergyCoefficients};
use streamdcim::fixed::Precision;
use streamdcim::harness::{render_report, report_rows, run_experiment, ReportFormat};
use streamdcim::operands::OperandSet;
use streamdcim::reference::derive_keep_sets;
use streamdcim::schedule::{
    schedule_cross_forwarding, schedule_workload, validate, Builder, EventKind, ExecMode, GenvPlacement, Operand,
    Payload, Resource, Schedule, ScheduleOptions, Violation, XfwdOrder, XfwdRequest,
};
use streamdcim::sim::{simulate, SimMode};
use streamdcim::workload::{
    build_workload, AttentionKind, MatrixKey, ModelConfig, ModelTable, NodeId, PruningPolicy, Stream, WorkloadGraph,
};

pub const CASES: u32 = 1000;

/// A fixed-seed runner for reproducible acceptance runs, or a fresh one.
pub fn runner(cases: u32, fixed: bool) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    if fixed {
        TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
    } else {
        TestRunner::new(config)
    }
}

#[derive(Debug, Clone)]
pub struct SmallCase {
    pub d_head: usize,
    pub heads: usize,
    pub kinds: Vec<AttentionKind>,
    pub n_x: usize,
    pub n_y: usize,
    pub precision: Precision,
    /// Keep ratio applied after layer 0, when the stack has two layers.
    pub prune: Option<Ratio<u64>>,
    pub seed: u64,
}

impl SmallCase {
    pub fn model(&self) -> ModelConfig {
        ModelConfig::new("small", self.d_head * self.heads, self.heads, self.kinds.clone())
    }

    pub fn policy(&self) -> PruningPolicy {
        match self.prune {
            Some(r) if self.kinds.len() > 1 => PruningPolicy::uniform(1, r),
            _ => PruningPolicy::none(),
        }
    }

    /// The workload with any pruning already resolved to keep sets.
    pub fn graph(&self) -> (WorkloadGraph, OperandSet) {
        let g = build_workload(self.model(), self.n_x, self.n_y, self.precision).expect("small case is valid");
        let ops = OperandSet::synthetic(&g, self.seed);
        let policy = self.policy();
        if policy.is_active() {
            (derive_keep_sets(&g, &ops, &policy).expect("reference chain"), ops)
        } else {
            (g, ops)
        }
    }
}

fn kind() -> impl Strategy<Value = AttentionKind> {
    prop_oneof![Just(AttentionKind::CrossModal), Just(AttentionKind::SelfModal)]
}

pub fn precision() -> impl Strategy<Value = Precision> {
    prop_oneof![Just(Precision::Int8), Just(Precision::Int16)]
}

pub fn small_case() -> impl Strategy<Value = SmallCase> {
    (
        prop::sample::select(vec![4usize, 8, 16]),
        prop::sample::select(vec![1usize, 2, 4]),
        prop::collection::vec(kind(), 1..=2),
        1usize..=24,
        1usize..=24,
        precision(),
        prop::option::of(prop::sample::select(vec![Ratio::new(1, 2), Ratio::new(1, 3), Ratio::new(3, 4)])),
        any::<u64>(),
    )
        .prop_map(|(d_head, heads, kinds, n_x, n_y, precision, prune, seed)| SmallCase {
            d_head,
            heads,
            kinds,
            n_x,
            n_y,
            precision,
            prune,
            seed,
        })
}

pub fn mode() -> impl Strategy<Value = ExecMode> {
    prop::sample::select(ExecMode::ALL.to_vec())
}

pub fn options() -> impl Strategy<Value = ScheduleOptions> {
    (
        1usize..=8,
        prop::sample::select(vec![GenvPlacement::Fused, GenvPlacement::CrossForward, GenvPlacement::Balanced]),
    )
        .prop_map(|(row_blocks, genv)| ScheduleOptions { row_blocks, genv })
}

pub fn layout() -> impl Strategy<Value = CoreLayout> {
    prop::sample::select(vec![512u64, 2048]).prop_map(|offchip| CoreLayout {
        offchip_bits_per_cycle: offchip,
        ..CoreLayout::default()
    })
}

/// MACs of the stack from its dimensions alone.
pub fn closed_form_macs(g: &WorkloadGraph) -> u64 {
    let (d, dh, heads) = (g.model.d_model as u64, g.d_head() as u64, g.model.heads as u64);
    let mut total = 0;
    for layer in 0..g.layers() {
        let n = |s: Stream| g.tokens[layer].get(s) as u64;
        for c in Stream::BOTH {
            let kv = g.kind(layer).kv_stream(c);
            total += heads * (3 * n(c) * d * dh + 2 * n(c) * n(kv) * dh);
        }
    }
    total
}

fn check<S: Strategy>(
    fixed: bool,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases, fixed).run(&strategy, test).map_err(|e| e.to_string())
}

/// Every mode performs exactly the stack's MACs, in the schedule and in
/// the replay.
pub fn mac_conservation(fixed: bool, cases: u32) -> Result<(), String> {
    check(fixed, cases, (small_case(), options(), layout()), |(case, opts, layout)| {
        let (g, _) = case.graph();
        let expected = closed_form_macs(&g);
        prop_assert_eq!(g.total_macs(), expected);
        for mode in ExecMode::ALL {
            let s = schedule_workload(&g, mode, &layout, &opts).unwrap();
            let scheduled: u64 = s.events.iter().map(|e| e.macs).sum();
            prop_assert_eq!(scheduled, expected, "{} schedule", mode);
            let (_, report) = simulate(&s, &layout, &g, &OperandSet::default(), SimMode::Timing).unwrap();
            prop_assert_eq!(report.mac_total, expected, "{} replay", mode);
        }
        Ok(())
    })
}

/// Built schedules validate; pulling a dependent event to cycle 0 is
/// caught as an early start.
pub fn validator_legality(fixed: bool, cases: u32) -> Result<(), String> {
    check(fixed, cases, (small_case(), mode(), options(), any::<prop::sample::Index>()), |(case, mode, opts, pick)| {
        let (g, _) = case.graph();
        let layout = CoreLayout::default();
        let s = schedule_workload(&g, mode, &layout, &opts).unwrap();
        prop_assert!(validate(&s).is_ok(), "{:?}", validate(&s).err().map(|v| v[0].to_string()));
        let late: Vec<usize> = s
            .events
            .iter()
            .filter(|e| e.deps.iter().any(|&d| s.event(d).end() > 0))
            .map(|e| e.id.0)
            .collect();
        if late.is_empty() {
            return Ok(());
        }
        let victim = late[pick.index(late.len())];
        let mut broken = s.clone();
        broken.events[victim].start = 0;
        let violations = validate(&broken).err().unwrap_or_default();
        prop_assert!(
            violations.iter().any(|v| matches!(v, Violation::EarlyStart { event, .. } if event.0 == victim)),
            "moving {} to cycle 0 went unnoticed",
            victim
        );
        Ok(())
    })
}

type Spans = Vec<(u64, u64)>;

/// Busy intervals per macro, split into rewrites and computes.
fn macro_spans(s: &Schedule) -> BTreeMap<MacroId, (Spans, Spans)> {
    let mut out: BTreeMap<MacroId, (Spans, Spans)> = BTreeMap::new();
    for e in s.events.iter().filter(|e| e.duration > 0) {
        for r in &e.resources {
            if let Resource::Macro(m, _) = r {
                let entry = out.entry(*m).or_default();
                match e.kind {
                    EventKind::Rewrite => entry.0.push((e.start, e.end())),
                    EventKind::Compute => entry.1.push((e.start, e.end())),
                    _ => {}
                }
            }
        }
    }
    out
}

/// No macro computes in a cycle in which it is being rewritten.
pub fn macro_exclusivity(fixed: bool, cases: u32) -> Result<(), String> {
    check(fixed, cases, (small_case(), mode(), options()), |(case, mode, opts)| {
        let (g, _) = case.graph();
        let layout = CoreLayout::default();
        let s = schedule_workload(&g, mode, &layout, &opts).unwrap();
        for (m, (rewrites, computes)) in macro_spans(&s) {
            for w in &rewrites {
                for c in &computes {
                    prop_assert!(w.1 <= c.0 || c.1 <= w.0, "{} rewrites {:?} while computing {:?}", m, w, c);
                }
            }
        }
        prop_assert!(simulate(&s, &layout, &g, &OperandSet::default(), SimMode::Timing).is_ok());
        Ok(())
    })
}

/// Per output element, the number of `k` terms contributed by a
/// cross-forwarding fragment, reconstructed from the emitted payloads.
pub fn xfwd_hits(s: &Schedule, m: usize, n: usize) -> Vec<usize> {
    let mut resident = BTreeMap::new();
    let mut hits = vec![0usize; m * n];
    for e in &s.events {
        match &e.payload {
            Payload::Write { target, region, tile } => {
                resident.insert((*target, *region), tile.clone());
            }
            Payload::Compute { parts, .. } => {
                for part in parts {
                    let tile = &resident[&(part.target, part.region)];
                    let (rows, cols, k) = match part.side {
                        Side::Right => (part.lines.clone(), tile.cols.clone(), tile.rows.len()),
                        Side::Left => (tile.rows.clone(), part.lines.clone(), tile.cols.len()),
                    };
                    for r in rows {
                        for c in cols.clone() {
                            hits[r * n + c] += k;
                        }
                    }
                }
            }
            _ => {}
        }
    }
    hits
}

/// Cross-forwarding covers every output element with all `k` terms,
/// exactly once.
pub fn xfwd_coverage(fixed: bool, cases: u32) -> Result<(), String> {
    let shape = (1usize..=64, 1usize..=64, 1usize..=64, 1usize..=8, any::<bool>(), precision());
    check(fixed, cases, shape, |(m, k, n, macros, late, precision)| {
        let layout = CoreLayout::default();
        let mut b = Builder::new(&layout, ExecMode::TileStream);
        let ids: Vec<MacroId> = (0..macros).map(|i| MacroId::new(CoreId::Tbr, i)).collect();
        for &id in &ids {
            b.reconfigure(id, MacroMode::Hybrid, None);
        }
        let node = NodeId(2);
        let req = XfwdRequest {
            core: CoreId::Tbr,
            precision,
            a: Operand::plain(MatrixKey::Input { layer: 0, stream: Stream::Y }),
            b: Operand::plain(MatrixKey::Weight { node, head: 0 }),
            m,
            k,
            n,
            out: MatrixKey::Result { node, head: 0 },
            macros: ids,
            order: if late { XfwdOrder::AcquireLate } else { XfwdOrder::ReleaseEarly },
            a_deps: Vec::new(),
            b_deps: Vec::new(),
            stage: Some(node),
        };
        schedule_cross_forwarding(&mut b, &req).unwrap();
        let s = b.finish();
        prop_assert!(validate(&s).is_ok());
        let hits = xfwd_hits(&s, m, n);
        prop_assert!(hits.iter().all(|&h| h == k), "{:?}", hits.iter().find(|&&h| h != k));
        Ok(())
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Energy sums over any split of the event log, and scales linearly with
/// the coefficients.
pub fn energy_additivity(fixed: bool, cases: u32) -> Result<(), String> {
    let strategy = (small_case(), mode(), any::<u64>(), 0.01f64..16.0);
    check(fixed, cases, strategy, |(case, mode, split, k)| {
        let (g, _) = case.graph();
        let layout = CoreLayout::default();
        let s = schedule_workload(&g, mode, &layout, &ScheduleOptions::default()).unwrap();
        let c = EnergyCoefficients::default();
        let p = g.precision;
        let side = |i: usize| (split.rotate_left((i % 64) as u32) ^ (i as u64 / 64)) & 1 == 1;
        let all = accumulate(&s.events, p, &c);
        let a = accumulate(s.events.iter().enumerate().filter(|(i, _)| side(*i)).map(|x| x.1), p, &c);
        let b = accumulate(s.events.iter().enumerate().filter(|(i, _)| !side(*i)).map(|x| x.1), p, &c);
        for kind in EventKind::ALL {
            prop_assert!(close(a.of(kind) + b.of(kind), all.of(kind)), "{}", kind.name());
        }
        prop_assert!(close((a + b).total(), all.total()));
        let scaled = accumulate(&s.events, p, &c.scaled(k)).with_leakage(s.makespan(), &c.scaled(k));
        let base = all.with_leakage(s.makespan(), &c);
        prop_assert!(close(scaled.total(), k * base.total()), "{} vs {}", scaled.total(), k * base.total());
        Ok(())
    })
}

/// Two runs of the harness on the same config give byte-identical
/// schedules, replays and reports.
pub fn replay_determinism(fixed: bool, cases: u32) -> Result<(), String> {
    check(fixed, cases, (small_case(), any::<u64>()), |(case, seed)| {
        let mut table = ModelTable::default();
        table.insert(case.model());
        let cfg = ExperimentConfig {
            models: vec!["small".into()],
            table,
            n_x: case.n_x,
            n_y: case.n_y,
            precision: case.precision,
            pruning: case.policy(),
            seed,
            ..ExperimentConfig::default()
        };
        let first = run_experiment(&cfg).unwrap();
        let second = run_experiment(&cfg).unwrap();
        for (a, b) in first[0].runs.iter().zip(&second[0].runs) {
            prop_assert_eq!(a.schedule.to_trace(), b.schedule.to_trace());
            prop_assert_eq!(a.report.to_kv(), b.report.to_kv());
        }
        for format in [ReportFormat::Csv, ReportFormat::Structured] {
            let (x, y) = (render_report(&report_rows(&first), format), render_report(&report_rows(&second), format));
            prop_assert_eq!(x.as_bytes(), y.as_bytes());
        }
        Ok(())
    })
}

/// Multi-head INT16 stacks with 32- or 64-wide heads and
/// `d <= N <= 2d` tokens.
pub fn ordering_case() -> impl Strategy<Value = (ModelConfig, usize, usize)> {
    (
        prop::sample::select(vec![32usize, 64]),
        prop::sample::select(vec![2usize, 4]),
        prop::collection::vec(Just(AttentionKind::CrossModal), 1..=2),
        0.0f64..=1.0,
        0.0f64..=1.0,
    )
        .prop_map(|(dh, heads, kinds, fx, fy)| {
            let d = dh * heads;
            let n = |f: f64| d + (f * d as f64).round() as usize;
            (ModelConfig::new("ordering", d, heads, kinds), n(fx), n(fy))
        })
}

/// Tile streaming beats layer streaming beats no streaming, in cycles and
/// in energy.
pub fn mode_ordering(fixed: bool, cases: u32) -> Result<(), String> {
    check(fixed, cases, ordering_case(), |(model, n_x, n_y)| {
        let cfg = ExperimentConfig::default();
        let g = build_workload(model, n_x, n_y, Precision::Int16).unwrap();
        let c = cfg.calibration.energy;
        let runs: Vec<(u64, f64)> = ExecMode::ALL
            .iter()
            .map(|&mode| {
                let s = schedule_workload(&g, mode, &cfg.layout, &cfg.schedule).unwrap();
                let e = accumulate(&s.events, g.precision, &c).with_leakage(s.makespan(), &c).total();
                (s.makespan(), e)
            })
            .collect();
        let (non, layer, tile) = (runs[0], runs[1], runs[2]);
        prop_assert!(tile.0 < layer.0 && layer.0 < non.0, "cycles {:?}", runs);
        prop_assert!(tile.1 < layer.1 && layer.1 < non.1, "energy {:?}", runs);
        Ok(())
    })
}

pub type Suite = fn(bool, u32) -> Result<(), String>;

pub const SUITES: [(&str, Suite); 6] = [
    ("MAC conservation across modes", mac_conservation),
    ("schedule-validator legality", validator_legality),
    ("macro compute/rewrite exclusivity", macro_exclusivity),
    ("cross-forwarding coverage", xfwd_coverage),
    ("energy additivity and linearity", energy_additivity),
    ("replay determinism", replay_determinism),
];
