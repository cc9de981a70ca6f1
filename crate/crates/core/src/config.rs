//! Experiment configuration as a flat, commented `key = value` file.
//!
//! ```text
//! # streamdcim experiment
//! models = desk-base, desk-large
//! n_x = 256
//! n_y = 256
//! precision = int16
//! modes = non-stream, layer-stream, tile-stream
//! pruning = 0:1/2, 1:1/2
//! seed = 7
//! hw.offchip_bits = 2048
//! model.tiny = 64 2 cross,self
//! energy.e_offchip = 100
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;

use num_rational::Ratio;
use thiserror::Error;

use crate::cim::CoreLayout;
use crate::energy::Calibration;
use crate::fixed::Precision;
use crate::schedule::{ExecMode, GenvPlacement, ScheduleOptions};
use crate::workload::{AttentionKind, ModelConfig, ModelTable, PruningPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Workloads to run, by model name; each is one row group in the report.
    pub models: Vec<String>,
    pub table: ModelTable,
    pub n_x: usize,
    pub n_y: usize,
    pub precision: Precision,
    pub modes: Vec<ExecMode>,
    pub pruning: PruningPolicy,
    pub layout: CoreLayout,
    pub schedule: ScheduleOptions,
    pub calibration: Calibration,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale pair. Off-chip bandwidth is widened to 2048 bits/cycle
    /// to keep the traffic-to-compute balance of the full-size models on
    /// these 16x narrower stacks.
    fn default() -> Self {
        ExperimentConfig {
            models: vec!["desk-base".into(), "desk-large".into()],
            table: ModelTable::default(),
            n_x: 256,
            n_y: 256,
            precision: Precision::Int16,
            modes: ExecMode::ALL.to_vec(),
            pruning: PruningPolicy::none(),
            layout: CoreLayout {
                offchip_bits_per_cycle: 2048,
                ..CoreLayout::default()
            },
            schedule: ScheduleOptions::default(),
            calibration: Calibration::default(),
            seed: 7,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Int8 => "int8",
        Precision::Int16 => "int16",
    }
}

fn genv_name(g: GenvPlacement) -> &'static str {
    match g {
        GenvPlacement::Fused => "fused",
        GenvPlacement::CrossForward => "cross-forward",
        GenvPlacement::Balanced => "balanced",
    }
}

fn parse_ratio(s: &str) -> Result<Ratio<u64>, String> {
    let bad = || format!("`{s}` is not a ratio like 1/2 or 0.5");
    let r = if let Some((n, d)) = s.split_once('/') {
        let (n, d): (u64, u64) = (n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        if d == 0 {
            return Err(bad());
        }
        Ratio::new(n, d)
    } else if let Some((int, frac)) = s.split_once('.') {
        let digits = frac.len() as u32;
        let whole: u64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        Ratio::new(whole, 10u64.pow(digits))
    } else {
        Ratio::from_integer(s.parse().map_err(|_| bad())?)
    };
    Ok(r)
}

fn ratio_text(r: Ratio<u64>) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn parse_kinds(s: &str) -> Result<Vec<AttentionKind>, String> {
    s.split(',')
        .map(|k| match k.trim() {
            "cross" => Ok(AttentionKind::CrossModal),
            "self" => Ok(AttentionKind::SelfModal),
            other => Err(format!("layer kind `{other}` is neither cross nor self")),
        })
        .collect()
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.trim().to_string(),
                },
                SetError::Value(msg) => ConfigError::Parse { line: i + 1, msg },
                SetError::Range(msg) => ConfigError::Invalid(format!("line {}: {msg}", i + 1)),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        let num = |v: &str| v.parse::<u64>().map_err(|e| SetError::Value(format!("`{v}`: {e}")));
        let size = |v: &str| num(v).map(|n| n as usize);
        match key {
            "models" => self.models = list(v).map(String::from).collect(),
            "n_x" => self.n_x = size(v)?,
            "n_y" => self.n_y = size(v)?,
            "precision" => {
                self.precision = Precision::parse(v).ok_or_else(|| SetError::Value(format!("unknown precision `{v}`")))?
            }
            "modes" => {
                self.modes = list(v)
                    .map(|m| ExecMode::parse(m).ok_or_else(|| SetError::Value(format!("unknown mode `{m}`"))))
                    .collect::<Result<_, _>>()?
            }
            "pruning" => {
                let mut p = PruningPolicy::none();
                if v != "none" {
                    for entry in list(v) {
                        let (l, r) = entry
                            .split_once(':')
                            .ok_or_else(|| SetError::Value(format!("pruning entry `{entry}` is not layer:ratio")))?;
                        let ratio = parse_ratio(r.trim()).map_err(SetError::Value)?;
                        if ratio > Ratio::from_integer(1) || *ratio.numer() == 0 {
                            return Err(SetError::Range(format!("pruning ratio {} must be in (0, 1]", ratio_text(ratio))));
                        }
                        p.set(size(l.trim())?, ratio);
                    }
                }
                self.pruning = p;
            }
            "seed" => self.seed = num(v)?,
            "out" => self.out_dir = PathBuf::from(v),
            "hw.macros_per_core" => self.layout.macros_per_core = size(v)?,
            "hw.arrays_per_macro" => self.layout.geometry.arrays_per_macro = size(v)?,
            "hw.rows_per_array" => self.layout.geometry.rows_per_array = size(v)?,
            "hw.cols_per_array" => self.layout.geometry.cols_per_array = size(v)?,
            "hw.word_bits" => self.layout.geometry.word_bits = size(v)?,
            "hw.bus_bits" => self.layout.bus_bits_per_cycle = num(v)?,
            "hw.offchip_bits" => self.layout.offchip_bits_per_cycle = num(v)?,
            "hw.sfu_elems_per_cycle" => self.layout.sfu_elems_per_cycle = num(v)?,
            "hw.dtpu_cols_per_cycle" => self.layout.dtpu_cols_per_cycle = num(v)?,
            "hw.reconfig_cycles" => self.layout.reconfig_cycles = num(v)?,
            "hw.vectors_per_cycle" => self.layout.vectors_per_cycle = parse_ratio(v).map_err(SetError::Value)?,
            "hw.hybrid_input_share" => self.layout.hybrid_input_share = parse_ratio(v).map_err(SetError::Value)?,
            "schedule.row_blocks" => self.schedule.row_blocks = size(v)?,
            "schedule.genv" => {
                self.schedule.genv = match v {
                    "fused" => GenvPlacement::Fused,
                    "cross-forward" => GenvPlacement::CrossForward,
                    "balanced" => GenvPlacement::Balanced,
                    _ => return Err(SetError::Value(format!("genv placement `{v}` is not fused, cross-forward or balanced"))),
                }
            }
            _ => {
                if let Some(name) = key.strip_prefix("model.") {
                    let mut parts = v.split_whitespace();
                    let (Some(d), Some(h), Some(kinds), None) = (parts.next(), parts.next(), parts.next(), parts.next())
                    else {
                        return Err(SetError::Value("model entry is `d_model heads kind,kind,...`".into()));
                    };
                    let kinds = parse_kinds(kinds).map_err(SetError::Value)?;
                    self.table.insert(ModelConfig::new(name, size(d)?, size(h)?, kinds));
                } else if let Some(k) = key.strip_prefix("energy.") {
                    self.calibration.set(k, v).map_err(|msg| {
                        if msg.starts_with("unknown") {
                            SetError::Unknown
                        } else {
                            SetError::Value(msg)
                        }
                    })?;
                } else {
                    return Err(SetError::Unknown);
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.modes.is_empty() {
            return bad("at least one mode is required".into());
        }
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        for m in &self.models {
            self.table
                .get(m)
                .and_then(|cfg| cfg.validate())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.n_x == 0 || self.n_y == 0 {
            return bad("n_x and n_y must be at least 1".into());
        }
        if self.schedule.row_blocks == 0 {
            return bad("schedule.row_blocks must be positive".into());
        }
        self.layout.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.calibration.energy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` restores the experiment
    /// apart from model-table entries that were never used.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# streamdcim experiment\n");
        let l = &self.layout;
        let modes: Vec<&str> = self.modes.iter().map(|m| m.name()).collect();
        let pruning: Vec<String> = self.pruning.entries().map(|(l, r)| format!("{l}:{}", ratio_text(r))).collect();
        let _ = writeln!(s, "models = {}", self.models.join(", "));
        let _ = writeln!(s, "n_x = {}\nn_y = {}", self.n_x, self.n_y);
        let _ = writeln!(s, "precision = {}", precision_name(self.precision));
        let _ = writeln!(s, "modes = {}", modes.join(", "));
        let _ = writeln!(s, "pruning = {}", if pruning.is_empty() { "none".into() } else { pruning.join(", ") });
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out_dir.display());
        for m in &self.models {
            if let Ok(cfg) = self.table.get(m) {
                let kinds: Vec<&str> = cfg
                    .layers
                    .iter()
                    .map(|k| match k {
                        AttentionKind::CrossModal => "cross",
                        AttentionKind::SelfModal => "self",
                    })
                    .collect();
                let _ = writeln!(s, "model.{m} = {} {} {}", cfg.d_model, cfg.heads, kinds.join(","));
            }
        }
        for (k, v) in [
            ("macros_per_core", l.macros_per_core as u64),
            ("arrays_per_macro", l.geometry.arrays_per_macro as u64),
            ("rows_per_array", l.geometry.rows_per_array as u64),
            ("cols_per_array", l.geometry.cols_per_array as u64),
            ("word_bits", l.geometry.word_bits as u64),
            ("bus_bits", l.bus_bits_per_cycle),
            ("offchip_bits", l.offchip_bits_per_cycle),
            ("sfu_elems_per_cycle", l.sfu_elems_per_cycle),
            ("dtpu_cols_per_cycle", l.dtpu_cols_per_cycle),
            ("reconfig_cycles", l.reconfig_cycles),
        ] {
            let _ = writeln!(s, "hw.{k} = {v}");
        }
        let _ = writeln!(s, "hw.vectors_per_cycle = {}", ratio_text(l.vectors_per_cycle));
        let _ = writeln!(s, "hw.hybrid_input_share = {}", ratio_text(l.hybrid_input_share));
        let _ = writeln!(s, "schedule.row_blocks = {}", self.schedule.row_blocks);
        let _ = writeln!(s, "schedule.genv = {}", genv_name(self.schedule.genv));
        for line in self.calibration.to_text().lines().filter(|l| !l.starts_with('#')) {
            let (k, v) = line.split_once('=').expect("calibration lines are key=value");
            let _ = writeln!(s, "energy.{k} = {v}");
        }
        s
    }
}

enum SetError {
    Unknown,
    Value(String),
    /// Well-formed but out of range.
    Range(String),
}
