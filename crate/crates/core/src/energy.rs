//! Event-based energy accounting and a static area/power model.
//!
//! Energies are in abstract units where one INT16 MAC costs 1. Per-bit and
//! per-element coefficients are placeholders with a fixed ordering
//! (off-chip > bus > buffer), not measured silicon numbers.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::ops::Add;

use thiserror::Error;

use crate::cim::CoreLayout;
use crate::fixed::Precision;
use crate::schedule::{EventKind, Feed, Payload, ScheduleEvent};

pub const CALIBRATION_HEADER: &str = "# streamdcim-calibration v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown calibration key `{0}`")]
    UnknownKey(String),
    #[error("missing or unsupported header, expected `{CALIBRATION_HEADER}`")]
    Header,
    #[error("invalid coefficients: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyCoefficients {
    pub e_mac_int8: f64,
    pub e_mac_int16: f64,
    pub e_cim_write: f64,
    pub e_buffer: f64,
    pub e_bus: f64,
    pub e_offchip: f64,
    /// Per softmax element, and per cycle of token ranking.
    pub e_sfu: f64,
    /// Per cycle of the whole chip, idle or not.
    pub leakage: f64,
}

impl Default for EnergyCoefficients {
    fn default() -> Self {
        EnergyCoefficients {
            e_mac_int8: 0.25,
            e_mac_int16: 1.0,
            e_cim_write: 2.0,
            e_buffer: 2.0,
            e_bus: 4.0,
            e_offchip: 100.0,
            e_sfu: 8.0,
            leakage: 8192.0,
        }
    }
}

impl EnergyCoefficients {
    pub fn e_mac(&self, p: Precision) -> f64 {
        match p {
            Precision::Int8 => self.e_mac_int8,
            Precision::Int16 => self.e_mac_int16,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("e_mac.int8", self.e_mac_int8),
            ("e_mac.int16", self.e_mac_int16),
            ("e_cim_write", self.e_cim_write),
            ("e_buffer", self.e_buffer),
            ("e_bus", self.e_bus),
            ("e_offchip", self.e_offchip),
            ("e_sfu", self.e_sfu),
            ("leakage", self.leakage),
        ]
    }

    fn field_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "e_mac.int8" => &mut self.e_mac_int8,
            "e_mac.int16" => &mut self.e_mac_int16,
            "e_cim_write" => &mut self.e_cim_write,
            "e_buffer" => &mut self.e_buffer,
            "e_bus" => &mut self.e_bus,
            "e_offchip" => &mut self.e_offchip,
            "e_sfu" => &mut self.e_sfu,
            "leakage" => &mut self.leakage,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if let Some((k, v)) = self.fields().into_iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(EnergyError::Invalid(format!("{k} = {v} must be finite and non-negative")));
        }
        if !(self.e_offchip > self.e_bus && self.e_bus > self.e_buffer) {
            return Err(EnergyError::Invalid(
                "on-chip movement must be cheaper: need e_offchip > e_bus > e_buffer".into(),
            ));
        }
        Ok(())
    }

    /// Every coefficient multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = *self;
        for (name, v) in self.fields() {
            *out.field_mut(name).expect("own field") = v * k;
        }
        out
    }
}

/// Energy per event kind, plus chip leakage over the run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub by_kind: BTreeMap<EventKind, f64>,
    pub leakage: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.by_kind.values().sum::<f64>() + self.leakage
    }

    pub fn of(&self, kind: EventKind) -> f64 {
        self.by_kind.get(&kind).copied().unwrap_or(0.0)
    }

    pub fn with_leakage(mut self, cycles: u64, c: &EnergyCoefficients) -> Self {
        self.leakage = cycles as f64 * c.leakage;
        self
    }
}

impl Add for EnergyBreakdown {
    type Output = EnergyBreakdown;

    fn add(mut self, rhs: EnergyBreakdown) -> EnergyBreakdown {
        for (k, v) in rhs.by_kind {
            *self.by_kind.entry(k).or_default() += v;
        }
        self.leakage += rhs.leakage;
        self
    }
}

fn event_energy(e: &ScheduleEvent, precision: Precision, c: &EnergyCoefficients) -> f64 {
    let bits = e.payload.bits() as f64;
    match e.kind {
        EventKind::Compute => {
            let operand = match &e.payload {
                Payload::Compute { feed: Feed::Forward, .. } => c.e_bus,
                _ => c.e_buffer + c.e_bus,
            };
            e.macs as f64 * c.e_mac(precision) + bits * operand
        }
        // buffer -> rewrite bus -> array
        EventKind::Rewrite => bits * (c.e_buffer + c.e_bus + c.e_cim_write),
        EventKind::StreamOut => bits * (c.e_bus + c.e_buffer),
        EventKind::OffchipRead => bits * (c.e_offchip + c.e_buffer),
        EventKind::OffchipWrite => bits * c.e_offchip,
        EventKind::SfuEval => match &e.payload {
            Payload::Softmax { rows, cols, .. } => (rows.len() * cols) as f64 * c.e_sfu,
            _ => 0.0,
        },
        EventKind::DtpuRank => e.duration as f64 * c.e_sfu,
        EventKind::Reconfigure => 0.0,
    }
}

/// Dynamic energy of `events`, by kind. Additive over any partition of the
/// events; leakage is charged separately with
/// [`EnergyBreakdown::with_leakage`].
pub fn accumulate<'a>(
    events: impl IntoIterator<Item = &'a ScheduleEvent>,
    precision: Precision,
    c: &EnergyCoefficients,
) -> EnergyBreakdown {
    let mut by_kind: BTreeMap<EventKind, f64> = EventKind::ALL.iter().map(|&k| (k, 0.0)).collect();
    for e in events {
        *by_kind.entry(e.kind).or_default() += event_energy(e, precision, c);
    }
    EnergyBreakdown { by_kind, leakage: 0.0 }
}

/// Area (in 1e-4 mm²) and peak power (in µW) of one chip component.
/// Integer units keep the default totals exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub area: u64,
    pub power: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticModel {
    /// Per CIM macro; the only component that scales with the layout.
    pub cim_macro: Footprint,
    pub buffers: Footprint,
    pub sfu: Footprint,
    pub dtpu: Footprint,
    pub interconnect: Footprint,
}

impl Default for StaticModel {
    /// Placeholder split of 12.10 mm² / 122.77 mW over the default 24-macro
    /// layout.
    fn default() -> Self {
        let fp = |area, power| Footprint { area, power };
        StaticModel {
            cim_macro: fp(3025, 3300),
            buffers: fp(24_200, 22_000),
            sfu: fp(7260, 9500),
            dtpu: fp(2420, 2070),
            interconnect: fp(14_520, 10_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticRow {
    pub component: &'static str,
    pub area_mm2: f64,
    pub power_mw: f64,
    pub area_fraction: f64,
    pub power_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticReport {
    pub area_mm2: f64,
    pub power_mw: f64,
    pub rows: Vec<StaticRow>,
}

impl StaticReport {
    pub fn row(&self, component: &str) -> Option<&StaticRow> {
        self.rows.iter().find(|r| r.component == component)
    }
}

impl fmt::Display for StaticReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}{:>8}{:>11}{:>8}", "component", "area_mm2", "share", "power_mw", "share")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14}{:>10.4}{:>8.3}{:>11.3}{:>8.3}",
                r.component, r.area_mm2, r.area_fraction, r.power_mw, r.power_fraction
            )?;
        }
        write!(f, "{:<14}{:>10.2}{:>8}{:>11.2}", "total", self.area_mm2, "", self.power_mw)
    }
}

pub fn report_static(layout: &CoreLayout, model: &StaticModel) -> StaticReport {
    let macros = (layout.macros_per_core * 3) as u64;
    let parts = [
        ("cim", Footprint {
            area: model.cim_macro.area * macros,
            power: model.cim_macro.power * macros,
        }),
        ("buffers", model.buffers),
        ("sfu", model.sfu),
        ("dtpu", model.dtpu),
        ("interconnect", model.interconnect),
    ];
    let area: u64 = parts.iter().map(|p| p.1.area).sum();
    let power: u64 = parts.iter().map(|p| p.1.power).sum();
    let ratio = |x: u64, of: u64| if of == 0 { 0.0 } else { x as f64 / of as f64 };
    StaticReport {
        area_mm2: area as f64 / 1e4,
        power_mw: power as f64 / 1e3,
        rows: parts
            .iter()
            .map(|&(component, fp)| StaticRow {
                component,
                area_mm2: fp.area as f64 / 1e4,
                power_mw: fp.power as f64 / 1e3,
                area_fraction: ratio(fp.area, area),
                power_fraction: ratio(fp.power, power),
            })
            .collect(),
    }
}

/// Dynamic coefficients and the static model, as read from one file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Calibration {
    pub energy: EnergyCoefficients,
    pub statics: StaticModel,
}

impl Calibration {
    fn footprint_mut(&mut self, name: &str) -> Option<&mut Footprint> {
        Some(match name {
            "cim_macro" => &mut self.statics.cim_macro,
            "buffers" => &mut self.statics.buffers,
            "sfu" => &mut self.statics.sfu,
            "dtpu" => &mut self.statics.dtpu,
            "interconnect" => &mut self.statics.interconnect,
            _ => return None,
        })
    }

    /// Sets one `key=value` entry; shared with the experiment config, which
    /// accepts the same keys under `energy.`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let number = || value.parse::<f64>().map_err(|e| format!("`{value}`: {e}"));
        if let Some(slot) = self.energy.field_mut(key) {
            *slot = number()?;
            return Ok(());
        }
        let (unit, rest) = match key.split_once('.') {
            Some(("area", rest)) => (1e4, rest),
            Some(("power", rest)) => (1e3, rest),
            _ => return Err(format!("unknown calibration key `{key}`")),
        };
        let v = number()?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("`{key}` must be non-negative"));
        }
        let scaled = (v * unit).round() as u64;
        let fp = self.footprint_mut(rest).ok_or_else(|| format!("unknown calibration key `{key}`"))?;
        if unit == 1e4 {
            fp.area = scaled;
        } else {
            fp.power = scaled;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, EnergyError> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim()) != Some(CALIBRATION_HEADER) {
            return Err(EnergyError::Header);
        }
        let mut cal = Calibration::default();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| EnergyError::Parse {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            let k = k.trim();
            cal.set(k, v.trim()).map_err(|msg| {
                if msg.starts_with("unknown") {
                    EnergyError::UnknownKey(k.to_string())
                } else {
                    EnergyError::Parse { line: i + 1, msg }
                }
            })?;
        }
        cal.energy.validate()?;
        Ok(cal)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CALIBRATION_HEADER}\n");
        s.push_str("# Placeholder coefficients: per-event energies and the area/power split are\n");
        s.push_str("# illustrative only. Energy unit = one INT16 MAC; area in mm2, power in mW.\n");
        for (k, v) in self.energy.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        let st = &self.statics;
        for (name, fp) in [
            ("cim_macro", st.cim_macro),
            ("buffers", st.buffers),
            ("sfu", st.sfu),
            ("dtpu", st.dtpu),
            ("interconnect", st.interconnect),
        ] {
            let _ = writeln!(s, "area.{name}={}", fp.area as f64 / 1e4);
            let _ = writeln!(s, "power.{name}={}", fp.power as f64 / 1e3);
        }
        s
    }
}
