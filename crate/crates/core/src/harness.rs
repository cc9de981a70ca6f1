//! Runs every configured mode on every configured workload, checks each run
//! bit-exactly, and writes the comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::energy::{accumulate, EnergyBreakdown};
use crate::operands::OperandSet;
use crate::reference::{derive_keep_sets, ReferenceError};
use crate::schedule::{schedule_workload, ExecMode, Schedule, ScheduleError};
use crate::sim::{rewrite_fraction, simulate, stages, verify_functional, Mismatch, SimError, SimMode, SimReport};
use crate::workload::{build_vilbert_workload, OpKind, WorkloadError, WorkloadGraph};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{workload}: {source}")]
    Workload { workload: String, source: WorkloadError },
    #[error("{workload}/{mode}: {source}")]
    Schedule {
        workload: String,
        mode: ExecMode,
        source: ScheduleError,
    },
    #[error("{workload}/{mode}: {source}")]
    Sim {
        workload: String,
        mode: ExecMode,
        source: SimError,
    },
    #[error("{workload}: {source}")]
    Reference { workload: String, source: ReferenceError },
    #[error("{workload}/{mode}: output differs from the reference at {mismatch}")]
    Verification {
        workload: String,
        mode: ExecMode,
        mismatch: Mismatch,
    },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// 2 for configuration problems, 3 when a run fails or disagrees with
    /// the reference, 4 for file I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Workload { .. } => 2,
            HarnessError::Schedule { source, .. } => match source {
                ScheduleError::Config(_) | ScheduleError::Mode(_) | ScheduleError::Shape(_) => 2,
                _ => 3,
            },
            HarnessError::Sim { .. } | HarnessError::Reference { .. } | HarnessError::Verification { .. } => 3,
            HarnessError::Io { .. } => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeRun {
    pub mode: ExecMode,
    pub schedule: Schedule,
    pub report: SimReport,
    pub energy: EnergyBreakdown,
    /// Exposed rewrite cycles over the cycles any matrix stage is active.
    pub rewrite_fraction: f64,
    pub verified_matrices: usize,
}

#[derive(Debug, Clone)]
pub struct WorkloadRun {
    pub workload: String,
    pub graph: WorkloadGraph,
    pub runs: Vec<ModeRun>,
}

impl WorkloadRun {
    pub fn mode(&self, mode: ExecMode) -> Option<&ModeRun> {
        self.runs.iter().find(|r| r.mode == mode)
    }

    /// `cycles(baseline) / cycles(mode)`.
    pub fn speedup(&self, mode: ExecMode, baseline: ExecMode) -> Option<f64> {
        let (m, b) = (self.mode(mode)?, self.mode(baseline)?);
        Some(b.report.total_cycles as f64 / m.report.total_cycles as f64)
    }

    /// `energy(baseline) / energy(mode)`.
    pub fn energy_ratio(&self, mode: ExecMode, baseline: ExecMode) -> Option<f64> {
        let (m, b) = (self.mode(mode)?, self.mode(baseline)?);
        Some(b.energy.total() / m.energy.total())
    }
}

fn run_mode(cfg: &ExperimentConfig, name: &str, g: &WorkloadGraph, ops: &OperandSet, mode: ExecMode) -> Result<ModeRun, HarnessError> {
    let schedule = schedule_workload(g, mode, &cfg.layout, &cfg.schedule).map_err(|source| HarnessError::Schedule {
        workload: name.into(),
        mode,
        source,
    })?;
    let sim_err = |source| HarnessError::Sim {
        workload: name.into(),
        mode,
        source,
    };
    let (outputs, report) = simulate(&schedule, &cfg.layout, g, ops, SimMode::Functional).map_err(sim_err)?;
    let verdict = verify_functional(&outputs, g, ops).map_err(|source| HarnessError::Reference {
        workload: name.into(),
        source,
    })?;
    if let Some(mismatch) = verdict.mismatch {
        return Err(HarnessError::Verification {
            workload: name.into(),
            mode,
            mismatch,
        });
    }
    let coeffs = &cfg.calibration.energy;
    let energy = accumulate(&schedule.events, g.precision, coeffs).with_leakage(report.total_cycles, coeffs);
    let matrix_stages = stages(g, &[OpKind::GenQ, OpKind::GenK, OpKind::GenV, OpKind::QKt, OpKind::PV]);
    let fraction = match rewrite_fraction(&report, &matrix_stages) {
        Ok(r) => *r.numer() as f64 / *r.denom() as f64,
        Err(SimError::EmptyStage) => 0.0,
        Err(e) => return Err(sim_err(e)),
    };
    Ok(ModeRun {
        mode,
        schedule,
        report,
        energy,
        rewrite_fraction: fraction,
        verified_matrices: verdict.checked,
    })
}

/// Builds, schedules, simulates and verifies every (workload, mode) pair.
/// Modes of one workload run on separate threads; results are merged by
/// mode so the outcome does not depend on completion order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<WorkloadRun>, HarnessError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.models.len());
    for name in &cfg.models {
        let wl_err = |source| HarnessError::Workload {
            workload: name.clone(),
            source,
        };
        let full = build_vilbert_workload(&cfg.table, name, cfg.n_x, cfg.n_y, cfg.precision).map_err(wl_err)?;
        let ops = OperandSet::synthetic(&full, cfg.seed);
        let graph = if cfg.pruning.is_active() {
            derive_keep_sets(&full, &ops, &cfg.pruning).map_err(|source| HarnessError::Reference {
                workload: name.clone(),
                source,
            })?
        } else {
            full
        };
        let mut by_mode: BTreeMap<ExecMode, ModeRun> = BTreeMap::new();
        let (g, o) = (&graph, &ops);
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .modes
                .iter()
                .map(|&mode| (mode, s.spawn(move || run_mode(cfg, name, g, o, mode))))
                .collect();
            for (mode, h) in handles {
                let run = h.join().expect("mode thread panicked")?;
                by_mode.insert(mode, run);
            }
            Ok::<_, HarnessError>(())
        })?;
        let runs = cfg.modes.iter().filter_map(|m| by_mode.remove(m)).collect();
        out.push(WorkloadRun {
            workload: name.clone(),
            graph,
            runs,
        });
    }
    Ok(out)
}

pub const COLUMNS: [&str; 10] = [
    "workload",
    "mode",
    "cycles",
    "energy",
    "speedup_vs_nonstream",
    "speedup_vs_layerstream",
    "energy_ratio_vs_nonstream",
    "energy_ratio_vs_layerstream",
    "rewrite_fraction",
    "overlap_cycles",
];

/// One report line; `None` cells are empty in CSV and `null` in the
/// structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub workload: String,
    pub mode: ExecMode,
    pub cycles: Option<u64>,
    pub energy: Option<f64>,
    pub speedup_vs_nonstream: Option<f64>,
    pub speedup_vs_layerstream: Option<f64>,
    pub energy_ratio_vs_nonstream: Option<f64>,
    pub energy_ratio_vs_layerstream: Option<f64>,
    pub rewrite_fraction: Option<f64>,
    pub overlap_cycles: Option<u64>,
}

impl ReportRow {
    /// Cell text in column order. Both formats use these exact strings.
    pub fn cells(&self) -> [Option<String>; 10] {
        let ratio = |v: Option<f64>| v.map(|x| format!("{x:.4}"));
        [
            Some(self.workload.clone()),
            Some(self.mode.name().to_string()),
            self.cycles.map(|c| c.to_string()),
            self.energy.map(|e| format!("{e:.1}")),
            ratio(self.speedup_vs_nonstream),
            ratio(self.speedup_vs_layerstream),
            ratio(self.energy_ratio_vs_nonstream),
            ratio(self.energy_ratio_vs_layerstream),
            ratio(self.rewrite_fraction),
            self.overlap_cycles.map(|c| c.to_string()),
        ]
    }
}

pub const GEOMEAN: &str = "geomean";

pub fn geomean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    Some((xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp())
}

/// Per-mode rows for every workload, then one geomean row per mode when
/// more than one workload ran.
pub fn report_rows(results: &[WorkloadRun]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for w in results {
        for r in &w.runs {
            rows.push(ReportRow {
                workload: w.workload.clone(),
                mode: r.mode,
                cycles: Some(r.report.total_cycles),
                energy: Some(r.energy.total()),
                speedup_vs_nonstream: w.speedup(r.mode, ExecMode::NonStream),
                speedup_vs_layerstream: w.speedup(r.mode, ExecMode::LayerStream),
                energy_ratio_vs_nonstream: w.energy_ratio(r.mode, ExecMode::NonStream),
                energy_ratio_vs_layerstream: w.energy_ratio(r.mode, ExecMode::LayerStream),
                rewrite_fraction: Some(r.rewrite_fraction),
                overlap_cycles: Some(r.report.overlap_cycles),
            });
        }
    }
    if results.len() > 1 {
        let modes: Vec<ExecMode> = results[0].runs.iter().map(|r| r.mode).collect();
        for mode in modes {
            let gm = |f: &dyn Fn(&WorkloadRun) -> Option<f64>| -> Option<f64> {
                let xs: Option<Vec<f64>> = results.iter().map(f).collect();
                xs.and_then(|xs| geomean(&xs))
            };
            rows.push(ReportRow {
                workload: GEOMEAN.into(),
                mode,
                cycles: None,
                energy: None,
                speedup_vs_nonstream: gm(&|w| w.speedup(mode, ExecMode::NonStream)),
                speedup_vs_layerstream: gm(&|w| w.speedup(mode, ExecMode::LayerStream)),
                energy_ratio_vs_nonstream: gm(&|w| w.energy_ratio(mode, ExecMode::NonStream)),
                energy_ratio_vs_layerstream: gm(&|w| w.energy_ratio(mode, ExecMode::LayerStream)),
                rewrite_fraction: None,
                overlap_cycles: None,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    /// JSON: a `columns` array and one object per row.
    Structured,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<ReportFormat> {
        match s {
            "csv" => Some(ReportFormat::Csv),
            "json" | "structured" => Some(ReportFormat::Structured),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Structured => "json",
        }
    }
}

pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str(&COLUMNS.join(","));
            s.push('\n');
            for r in rows {
                let cells: Vec<String> = r.cells().into_iter().map(Option::unwrap_or_default).collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
        }
        ReportFormat::Structured => {
            let cols: Vec<String> = COLUMNS.iter().map(|c| format!("\"{c}\"")).collect();
            let _ = write!(s, "{{\n  \"columns\": [{}],\n  \"rows\": [", cols.join(", "));
            for (i, r) in rows.iter().enumerate() {
                let fields: Vec<String> = COLUMNS
                    .iter()
                    .zip(r.cells())
                    .enumerate()
                    .map(|(j, (c, v))| match v {
                        None => format!("\"{c}\": null"),
                        Some(v) if j < 2 => format!("\"{c}\": \"{v}\""),
                        Some(v) => format!("\"{c}\": {v}"),
                    })
                    .collect();
                let sep = if i == 0 { "\n" } else { ",\n" };
                let _ = write!(s, "{sep}    {{{}}}", fields.join(", "));
            }
            s.push_str(if rows.is_empty() { "]\n}\n" } else { "\n  ]\n}\n" });
        }
    }
    s
}

/// Writes `report.<ext>` into `dir`, creating it if needed.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, dir: &Path) -> Result<PathBuf, HarnessError> {
    let path = dir.join(format!("report.{}", format.extension()));
    let io = |source| HarnessError::Io {
        path: path.clone(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(&path, render_report(rows, format)).map_err(io)?;
    Ok(path)
}

/// Reference full-scale figures (INT16, N_X = N_Y = 4096), shown next to
/// the desk-scale results for comparison. They are not expected to match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFigures {
    pub model: &'static str,
    pub speedup_vs_nonstream: f64,
    pub speedup_vs_layerstream: f64,
    pub energy_vs_nonstream: Option<f64>,
    pub energy_vs_layerstream: Option<f64>,
}

pub const REFERENCE_FIGURES: [ReferenceFigures; 3] = [
    ReferenceFigures {
        model: "base",
        speedup_vs_nonstream: 2.86,
        speedup_vs_layerstream: 1.25,
        energy_vs_nonstream: Some(2.64),
        energy_vs_layerstream: Some(1.27),
    },
    ReferenceFigures {
        model: "large",
        speedup_vs_nonstream: 2.42,
        speedup_vs_layerstream: 1.31,
        energy_vs_nonstream: Some(1.94),
        energy_vs_layerstream: Some(1.19),
    },
    ReferenceFigures {
        model: GEOMEAN,
        speedup_vs_nonstream: 2.63,
        speedup_vs_layerstream: 1.28,
        energy_vs_nonstream: None,
        energy_vs_layerstream: None,
    },
];

/// Reference figures for a workload name; `desk-base` maps to `base`.
pub fn reference_for(workload: &str) -> Option<&'static ReferenceFigures> {
    let model = workload.strip_prefix("desk-").unwrap_or(workload);
    REFERENCE_FIGURES.iter().find(|r| r.model == model)
}

/// Human-readable comparison of the tile-stream rows against the
/// reference figures.
pub fn summary(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12}{:<14}{:>10}{:>16}{:>9}{:>9}{:>9}{:>9}",
        "workload", "mode", "cycles", "energy", "vs-non", "vs-layer", "E-non", "E-layer"
    );
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12}{:<14}{:>10}{:>16}{:>9}{:>9}{:>9}{:>9}",
            r.workload,
            r.mode.name(),
            r.cycles.map_or("-".into(), |c| c.to_string()),
            r.energy.map_or("-".into(), |e| format!("{e:.4e}")),
            f(r.speedup_vs_nonstream),
            f(r.speedup_vs_layerstream),
            f(r.energy_ratio_vs_nonstream),
            f(r.energy_ratio_vs_layerstream),
        );
        if r.mode == ExecMode::TileStream {
            if let Some(p) = reference_for(&r.workload) {
                let _ = writeln!(
                    s,
                    "{:<12}{:<14}{:>10}{:>16}{:>9}{:>9}{:>9}{:>9}",
                    "",
                    "(reference)",
                    "",
                    "",
                    f(Some(p.speedup_vs_nonstream)),
                    f(Some(p.speedup_vs_layerstream)),
                    f(p.energy_vs_nonstream),
                    f(p.energy_vs_layerstream),
                );
            }
        }
    }
    s
}
