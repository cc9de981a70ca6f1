//! Digital CIM macro model: storage geometry, reconfigurable modes, rewrite
//! cost, per-cycle throughput and the three-core layout.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use num_rational::Ratio;

use crate::fixed::Precision;
use crate::workload::MatrixKey;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CimError {
    #[error("scheduling error: {0}")]
    Scheduling(String),
    #[error("capacity error: {bits} bits into a {capacity}-bit region")]
    Capacity { bits: u64, capacity: u64 },
    #[error("dataflow error: {0}")]
    Dataflow(String),
    #[error("mode error: {0}")]
    Mode(String),
}

/// Physical organisation of one macro.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacroGeometry {
    pub arrays_per_macro: usize,
    pub rows_per_array: usize,
    pub word_bits: usize,
    pub cols_per_array: usize,
}

impl Default for MacroGeometry {
    fn default() -> Self {
        MacroGeometry {
            arrays_per_macro: 8,
            rows_per_array: 4,
            word_bits: 16,
            cols_per_array: 128,
        }
    }
}

impl MacroGeometry {
    pub fn capacity_bits(&self) -> u64 {
        (self.arrays_per_macro * self.rows_per_array * self.word_bits * self.cols_per_array) as u64
    }

    /// Operand words of `precision` one macro stores.
    pub fn words(&self, precision: Precision) -> usize {
        (self.capacity_bits() / precision.bits() as u64) as usize
    }

    /// Input-vector length consumed per cycle. Narrow operands pack two per
    /// 16-bit cell.
    pub fn vector_len(&self, precision: Precision) -> usize {
        self.arrays_per_macro * self.rows_per_array * (self.word_bits / precision.bits() as usize)
    }

    pub fn macs_per_cycle(&self, precision: Precision) -> u64 {
        (self.vector_len(precision) * self.cols_per_array) as u64
    }
}

/// `Hybrid` is `mode_config = 0`, `Normal` is `mode_config = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MacroMode {
    Hybrid,
    Normal,
}

impl MacroMode {
    pub fn mode_config(self) -> u8 {
        match self {
            MacroMode::Hybrid => 0,
            MacroMode::Normal => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    /// All capacity, holding weights (normal mode).
    Whole,
    /// Input half of a hybrid macro.
    Input,
    /// Weight half of a hybrid macro.
    Weight,
}

impl Region {
    pub fn overlaps(self, other: Region) -> bool {
        self == other || self == Region::Whole || other == Region::Whole
    }

    pub fn tag(self) -> &'static str {
        match self {
            Region::Whole => "w",
            Region::Input => "i",
            Region::Weight => "k",
        }
    }

    pub fn from_tag(s: &str) -> Option<Region> {
        match s {
            "w" => Some(Region::Whole),
            "i" => Some(Region::Input),
            "k" => Some(Region::Weight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CoreId {
    Q,
    K,
    Tbr,
}

impl CoreId {
    pub const ALL: [CoreId; 3] = [CoreId::Q, CoreId::K, CoreId::Tbr];

    pub fn tag(self) -> &'static str {
        match self {
            CoreId::Q => "Q",
            CoreId::K => "K",
            CoreId::Tbr => "T",
        }
    }

    pub fn from_tag(s: &str) -> Option<CoreId> {
        match s {
            "Q" => Some(CoreId::Q),
            "K" => Some(CoreId::K),
            "T" => Some(CoreId::Tbr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MacroId {
    pub core: CoreId,
    pub index: usize,
}

impl MacroId {
    pub fn new(core: CoreId, index: usize) -> Self {
        MacroId { core, index }
    }
}

impl fmt::Display for MacroId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.core.tag(), self.index)
    }
}

/// Hardware configuration shared by scheduler, simulator and energy model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreLayout {
    pub geometry: MacroGeometry,
    pub macros_per_core: usize,
    pub input_buffer_bytes: usize,
    pub weight_buffer_bytes: usize,
    pub output_buffer_bytes: usize,
    /// CIM write bandwidth of one core's rewrite port.
    pub bus_bits_per_cycle: u64,
    pub offchip_bits_per_cycle: u64,
    /// Share of a hybrid macro given to the input region.
    pub hybrid_input_share: Ratio<u64>,
    /// Input vectors a macro consumes per cycle.
    pub vectors_per_cycle: Ratio<u64>,
    /// Softmax elements the SFU retires per cycle; 0 means one macro output
    /// row (`cols_per_array` elements) per cycle.
    pub sfu_elems_per_cycle: u64,
    pub dtpu_cols_per_cycle: u64,
    pub reconfig_cycles: u64,
}

impl Default for CoreLayout {
    fn default() -> Self {
        CoreLayout {
            geometry: MacroGeometry::default(),
            macros_per_core: 8,
            input_buffer_bytes: 64 * 1024,
            weight_buffer_bytes: 64 * 1024,
            output_buffer_bytes: 64 * 1024,
            bus_bits_per_cycle: 512,
            offchip_bits_per_cycle: 512,
            hybrid_input_share: Ratio::new(1, 2),
            vectors_per_cycle: Ratio::from_integer(1),
            sfu_elems_per_cycle: 0,
            dtpu_cols_per_cycle: 1,
            reconfig_cycles: 1,
        }
    }
}

impl CoreLayout {
    /// Calibration used to replay the analytic rewrite-latency example of a
    /// layer-streaming CIM design: compute runs at 8/3 vectors per cycle so
    /// that the QK^T phase of the 2048x512 INT8 benchmark takes 12288 cycles.
    pub fn trancim_profile() -> Self {
        CoreLayout {
            vectors_per_cycle: Ratio::new(8, 3),
            ..CoreLayout::default()
        }
    }

    pub fn core_bytes(&self) -> u64 {
        self.geometry.capacity_bits() * self.macros_per_core as u64 / 8
    }

    /// Words of `precision` a region holds in `mode`.
    pub fn region_words(&self, mode: MacroMode, region: Region, precision: Precision) -> usize {
        let words = self.geometry.words(precision) as u64;
        let share = match (mode, region) {
            (MacroMode::Normal, Region::Whole) => Ratio::from_integer(1),
            (MacroMode::Hybrid, Region::Input) => self.hybrid_input_share,
            (MacroMode::Hybrid, Region::Weight) => Ratio::from_integer(1) - self.hybrid_input_share,
            _ => Ratio::from_integer(0),
        };
        (share * Ratio::from_integer(words)).to_integer() as usize
    }

    pub fn region_bits(&self, mode: MacroMode, region: Region) -> u64 {
        self.region_words(mode, region, Precision::Int16) as u64 * 16
    }

    /// Cycles to push `vectors` input vectors through a macro.
    pub fn compute_cycles(&self, vectors: u64) -> u64 {
        (Ratio::from_integer(vectors) / self.vectors_per_cycle)
            .ceil()
            .to_integer()
    }

    pub fn rewrite_cycles(&self, bits: u64) -> u64 {
        bits.div_ceil(self.bus_bits_per_cycle)
    }

    pub fn offchip_cycles(&self, bits: u64) -> u64 {
        bits.div_ceil(self.offchip_bits_per_cycle)
    }

    pub fn sfu_rate(&self) -> u64 {
        if self.sfu_elems_per_cycle > 0 {
            self.sfu_elems_per_cycle
        } else {
            self.geometry.cols_per_array as u64
        }
    }

    pub fn sfu_cycles(&self, elements: u64) -> u64 {
        elements.div_ceil(self.sfu_rate())
    }

    pub fn validate(&self) -> Result<(), CimError> {
        let g = &self.geometry;
        if g.arrays_per_macro == 0 || g.rows_per_array == 0 || g.cols_per_array == 0 {
            return Err(CimError::Mode("macro geometry must be non-empty".into()));
        }
        if g.word_bits != 8 && g.word_bits != 16 {
            return Err(CimError::Mode(format!("unsupported word width {}", g.word_bits)));
        }
        if self.macros_per_core == 0 {
            return Err(CimError::Mode("a core needs at least one macro".into()));
        }
        if self.bus_bits_per_cycle == 0 || self.offchip_bits_per_cycle == 0 {
            return Err(CimError::Mode("bandwidths must be positive".into()));
        }
        if self.hybrid_input_share <= Ratio::from_integer(0)
            || self.hybrid_input_share >= Ratio::from_integer(1)
        {
            return Err(CimError::Mode("hybrid input share must lie in (0, 1)".into()));
        }
        if self.vectors_per_cycle <= Ratio::from_integer(0) {
            return Err(CimError::Mode("throughput must be positive".into()));
        }
        Ok(())
    }
}

/// A rectangle of a (possibly transposed) operand held in a macro region.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TileDescriptor {
    pub key: MatrixKey,
    /// Coordinates address the transpose of `key`.
    pub transposed: bool,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub precision: Precision,
}

impl TileDescriptor {
    pub fn words(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn bits(&self) -> u64 {
        self.words() as u64 * self.precision.bits() as u64
    }

    pub fn covers(&self, key: &MatrixKey, transposed: bool, rows: &Range<usize>, cols: &Range<usize>) -> bool {
        self.key == *key
            && self.transposed == transposed
            && self.rows.start <= rows.start
            && rows.end <= self.rows.end
            && self.cols.start <= cols.start
            && cols.end <= self.cols.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidentTile {
    pub desc: TileDescriptor,
    /// Row-major values in the tile's own coordinates.
    pub data: Vec<i32>,
}

impl ResidentTile {
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[(r - self.desc.rows.start) * self.desc.cols.len() + (c - self.desc.cols.start)]
    }
}

/// Which operand of the product the stationary tile is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// `out = v * T` (weights stationary).
    Right,
    /// `out = T * v` (inputs stationary, a weight column streams in).
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacroStatus {
    Idle,
    Computing,
    Rewriting,
}

#[derive(Debug, Clone)]
pub struct MacroState {
    pub id: MacroId,
    mode: MacroMode,
    tiles: BTreeMap<Region, ResidentTile>,
    computing: u32,
    rewriting: bool,
    macs: u64,
}

impl MacroState {
    pub fn new(id: MacroId, mode: MacroMode) -> Self {
        MacroState {
            id,
            mode,
            tiles: BTreeMap::new(),
            computing: 0,
            rewriting: false,
            macs: 0,
        }
    }

    pub fn mode(&self) -> MacroMode {
        self.mode
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn status(&self) -> MacroStatus {
        if self.rewriting {
            MacroStatus::Rewriting
        } else if self.computing > 0 {
            MacroStatus::Computing
        } else {
            MacroStatus::Idle
        }
    }

    pub fn tile(&self, region: Region) -> Option<&ResidentTile> {
        self.tiles.get(&region)
    }

    fn check_region(&self, region: Region) -> Result<(), CimError> {
        let ok = match self.mode {
            MacroMode::Normal => region == Region::Whole,
            MacroMode::Hybrid => region != Region::Whole,
        };
        if ok {
            Ok(())
        } else {
            Err(CimError::Mode(format!(
                "{}: region {region:?} unavailable in {:?} mode",
                self.id, self.mode
            )))
        }
    }

    /// Switches mode; resident tiles are lost. Costs one cycle unless the
    /// macro is already in `mode`.
    pub fn configure_mode(&mut self, mode: MacroMode, layout: &CoreLayout) -> Result<u64, CimError> {
        if self.status() != MacroStatus::Idle {
            return Err(CimError::Scheduling(format!(
                "{}: reconfigured while {:?}",
                self.id,
                self.status()
            )));
        }
        if self.mode == mode {
            return Ok(0);
        }
        self.mode = mode;
        self.tiles.clear();
        Ok(layout.reconfig_cycles)
    }

    /// Loads `tile` into `region` and marks the macro as rewriting. Returns
    /// the rewrite latency; call [`MacroState::end_rewrite`] when it elapses.
    pub fn write_tile(
        &mut self,
        region: Region,
        tile: ResidentTile,
        layout: &CoreLayout,
    ) -> Result<u64, CimError> {
        self.check_region(region)?;
        if self.status() == MacroStatus::Computing {
            return Err(CimError::Scheduling(format!("{}: rewrite while computing", self.id)));
        }
        let capacity = layout.region_bits(self.mode, region);
        let bits = tile.desc.bits();
        if bits > capacity {
            return Err(CimError::Capacity { bits, capacity });
        }
        if tile.data.len() != tile.desc.words() {
            return Err(CimError::Dataflow(format!(
                "{}: tile payload has {} words, descriptor {}",
                self.id,
                tile.data.len(),
                tile.desc.words()
            )));
        }
        let cycles = layout.rewrite_cycles(bits);
        self.rewriting = cycles > 0;
        self.tiles.insert(region, tile);
        Ok(cycles)
    }

    pub fn end_rewrite(&mut self) {
        self.rewriting = false;
    }

    pub fn begin_compute(&mut self) -> Result<(), CimError> {
        if self.rewriting {
            return Err(CimError::Scheduling(format!("{}: compute while rewriting", self.id)));
        }
        self.computing += 1;
        Ok(())
    }

    pub fn end_compute(&mut self) {
        self.computing = self.computing.saturating_sub(1);
    }

    /// One vector against the tile resident in `region`; returns the partial
    /// sums and adds `tile.rows * tile.cols` to the MAC counter.
    pub fn compute_step(&mut self, region: Region, side: Side, vector: &[i32]) -> Result<Vec<i64>, CimError> {
        if self.rewriting {
            return Err(CimError::Scheduling(format!("{}: compute while rewriting", self.id)));
        }
        let tile = self.tiles.get(&region).ok_or_else(|| {
            CimError::Dataflow(format!("{}: no operand resident in region {region:?}", self.id))
        })?;
        let (r, c) = (tile.desc.rows.len(), tile.desc.cols.len());
        let out = match side {
            Side::Right => {
                if vector.len() != r {
                    return Err(CimError::Dataflow(format!(
                        "{}: vector of {} against {r}-row tile",
                        self.id,
                        vector.len()
                    )));
                }
                let mut out = vec![0i64; c];
                for (k, &v) in vector.iter().enumerate() {
                    if v == 0 {
                        continue;
                    }
                    let row = &tile.data[k * c..(k + 1) * c];
                    for (o, &w) in out.iter_mut().zip(row) {
                        *o += v as i64 * w as i64;
                    }
                }
                out
            }
            Side::Left => {
                if vector.len() != c {
                    return Err(CimError::Dataflow(format!(
                        "{}: vector of {} against {c}-column tile",
                        self.id,
                        vector.len()
                    )));
                }
                (0..r)
                    .map(|i| {
                        tile.data[i * c..(i + 1) * c]
                            .iter()
                            .zip(vector)
                            .map(|(&a, &v)| a as i64 * v as i64)
                            .sum()
                    })
                    .collect()
            }
        };
        self.macs += (r * c) as u64;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{NodeId, Stream};
    use proptest::prelude::*;

    fn tile(rows: usize, cols: usize, precision: Precision, fill: i32) -> ResidentTile {
        ResidentTile {
            desc: TileDescriptor {
                key: MatrixKey::Weight {
                    node: NodeId(0),
                    head: 0,
                },
                transposed: false,
                rows: 0..rows,
                cols: 0..cols,
                precision,
            },
            data: vec![fill; rows * cols],
        }
    }

    fn id() -> MacroId {
        MacroId::new(CoreId::Tbr, 0)
    }

    #[test]
    fn geometry_capacity() {
        let g = MacroGeometry::default();
        assert_eq!(g.capacity_bits(), 65536);
        assert_eq!(g.capacity_bits() / 8, 8 * 1024);
        assert_eq!(CoreLayout::default().core_bytes(), 64 * 1024);
        assert_eq!(g.macs_per_cycle(Precision::Int16), 4096);
        assert_eq!(g.macs_per_cycle(Precision::Int8), 8192);
        assert_eq!(g.vector_len(Precision::Int8), 64);
    }

    #[test]
    fn hybrid_to_normal_frees_weight_capacity() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Hybrid);
        assert_eq!(layout.region_bits(MacroMode::Hybrid, Region::Weight), 4 * 8192);
        assert_eq!(m.configure_mode(MacroMode::Normal, &layout).unwrap(), 1);
        assert_eq!(layout.region_bits(m.mode(), Region::Whole), 8 * 8192);
        assert_eq!(m.configure_mode(MacroMode::Normal, &layout).unwrap(), 0);
    }

    #[test]
    fn reconfigure_while_computing_is_rejected() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Normal);
        m.write_tile(Region::Whole, tile(32, 128, Precision::Int16, 1), &layout).unwrap();
        m.end_rewrite();
        m.begin_compute().unwrap();
        assert!(matches!(
            m.configure_mode(MacroMode::Hybrid, &layout),
            Err(CimError::Scheduling(_))
        ));
    }

    #[test]
    fn reconfigure_invalidates_tiles() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Normal);
        m.write_tile(Region::Whole, tile(4, 4, Precision::Int16, 1), &layout).unwrap();
        m.end_rewrite();
        m.configure_mode(MacroMode::Hybrid, &layout).unwrap();
        assert!(m.tile(Region::Whole).is_none());
    }

    #[test]
    fn write_cycles() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Normal);
        // a full 8 KB tile over a 512-bit port
        assert_eq!(m.write_tile(Region::Whole, tile(32, 128, Precision::Int16, 0), &layout).unwrap(), 128);
        assert_eq!(m.status(), MacroStatus::Rewriting);
        m.end_rewrite();
        assert_eq!(m.write_tile(Region::Whole, tile(0, 0, Precision::Int16, 0), &layout).unwrap(), 0);
        assert_eq!(m.status(), MacroStatus::Idle);
        // 2048x512 INT8 split into 128 macro tiles of 64x128
        let total: u64 = (0..128)
            .map(|_| {
                let c = m.write_tile(Region::Whole, tile(64, 128, Precision::Int8, 0), &layout).unwrap();
                m.end_rewrite();
                c
            })
            .sum();
        assert_eq!(total, 2048 * 512 * 8 / 512);
        assert_eq!(total, 16384);
    }

    #[test]
    fn overflowing_tile_is_rejected() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Hybrid);
        let err = m.write_tile(Region::Input, tile(32, 128, Precision::Int16, 0), &layout).unwrap_err();
        assert!(matches!(err, CimError::Capacity { .. }));
    }

    #[test]
    fn compute_step_counts_macs() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Normal);
        m.write_tile(Region::Whole, tile(32, 128, Precision::Int16, 1), &layout).unwrap();
        m.end_rewrite();
        let out = m.compute_step(Region::Whole, Side::Right, &[1; 32]).unwrap();
        assert_eq!(m.macs(), 4096);
        assert_eq!(out, vec![32; 128]);
    }

    #[test]
    fn compute_during_rewrite_is_rejected() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Normal);
        m.write_tile(Region::Whole, tile(32, 128, Precision::Int16, 1), &layout).unwrap();
        assert!(matches!(
            m.compute_step(Region::Whole, Side::Right, &[1; 32]),
            Err(CimError::Scheduling(_))
        ));
        assert!(m.begin_compute().is_err());
    }

    #[test]
    fn compute_without_operand_is_dataflow_error() {
        let mut m = MacroState::new(id(), MacroMode::Hybrid);
        assert!(matches!(
            m.compute_step(Region::Input, Side::Left, &[1]),
            Err(CimError::Dataflow(_))
        ));
    }

    #[test]
    fn left_side_multiplies_columns() {
        let layout = CoreLayout::default();
        let mut m = MacroState::new(id(), MacroMode::Hybrid);
        let mut t = tile(2, 3, Precision::Int16, 0);
        t.data = vec![1, 2, 3, 4, 5, 6];
        t.desc.key = MatrixKey::Input { layer: 0, stream: Stream::X };
        m.write_tile(Region::Input, t, &layout).unwrap();
        m.end_rewrite();
        assert_eq!(m.compute_step(Region::Input, Side::Left, &[1, 0, -1]).unwrap(), vec![-2, -2]);
    }

    proptest! {
        #[test]
        fn region_capacity_is_enforced(rows in 0usize..96, cols in 0usize..160, hybrid in any::<bool>(), int8 in any::<bool>()) {
            let layout = CoreLayout::default();
            let precision = if int8 { Precision::Int8 } else { Precision::Int16 };
            let (mode, region) = if hybrid {
                (MacroMode::Hybrid, Region::Weight)
            } else {
                (MacroMode::Normal, Region::Whole)
            };
            let mut m = MacroState::new(id(), mode);
            let t = tile(rows, cols, precision, 0);
            let bits = t.desc.bits();
            let capacity = layout.region_bits(mode, region);
            match m.write_tile(region, t, &layout) {
                Ok(c) => {
                    prop_assert!(bits <= capacity);
                    prop_assert_eq!(c, bits.div_ceil(512));
                }
                Err(CimError::Capacity { .. }) => prop_assert!(bits > capacity),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn rewrite_cycles_are_additive_up_to_rounding(total_words in 0u64..200_000, parts in 1u64..64) {
            let layout = CoreLayout::default();
            let whole = layout.rewrite_cycles(total_words * 16);
            let base = total_words / parts;
            let mut split = 0;
            for i in 0..parts {
                let w = base + u64::from(i < total_words % parts);
                split += layout.rewrite_cycles(w * 16);
            }
            prop_assert!(split >= whole);
            prop_assert!(split <= whole + parts);
        }
    }
}
