//! Partitioning of operand matrices into macro-sized tiles.

use std::ops::Range;

use crate::cim::{CoreLayout, MacroMode, Region};
use crate::fixed::Precision;

use super::ScheduleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    RowWise,
    ColumnWise,
}

/// Where a plan's tiles go: `macros` macros of `capacity_words` each, with
/// columns laid across at most `col_width` physical columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileTarget {
    pub macros: usize,
    pub capacity_words: usize,
    pub col_width: usize,
}

impl TileTarget {
    pub fn new(layout: &CoreLayout, mode: MacroMode, region: Region, precision: Precision, macros: usize) -> Self {
        TileTarget {
            macros,
            capacity_words: layout.region_words(mode, region, precision),
            col_width: layout.geometry.cols_per_array,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedTile {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    /// Index into the macros the plan targets.
    pub slot: usize,
    pub pass: usize,
}

impl PlannedTile {
    pub fn words(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub precision: Precision,
    pub orientation: Orientation,
    pub macros: usize,
    pub tiles: Vec<PlannedTile>,
}

impl TilePlan {
    pub fn passes(&self) -> usize {
        self.tiles.last().map_or(0, |t| t.pass + 1)
    }

    pub fn pass(&self, pass: usize) -> impl Iterator<Item = &PlannedTile> {
        self.tiles.iter().filter(move |t| t.pass == pass)
    }

    pub fn total_bits(&self) -> u64 {
        self.tiles.iter().map(|t| t.words() as u64).sum::<u64>() * self.precision.bits() as u64
    }
}

/// Splits a `rows x cols` matrix into tiles no larger than one macro region.
///
/// Row-wise plans cut column blocks of at most `col_width` columns, give each
/// column block an equal share of the macros and cut rows so that one pass
/// spans the macros. Tile `t` lands on macro `t mod macros`; passes follow in
/// row-major order. Column-wise plans are the transpose of the row-wise plan
/// of the transposed matrix.
pub fn tile_partition(
    rows: usize,
    cols: usize,
    precision: Precision,
    target: &TileTarget,
    orientation: Orientation,
) -> Result<TilePlan, ScheduleError> {
    if rows == 0 || cols == 0 {
        return Err(ScheduleError::Shape(format!("cannot tile a {rows}x{cols} matrix")));
    }
    if target.macros == 0 || target.capacity_words == 0 {
        return Err(ScheduleError::Config("tiling target has no capacity".into()));
    }
    let (r, c) = match orientation {
        Orientation::RowWise => (rows, cols),
        Orientation::ColumnWise => (cols, rows),
    };
    let width = c.min(target.col_width).min(target.capacity_words).max(1);
    let col_blocks = c.div_ceil(width);
    let macros_per_block = (target.macros / col_blocks).max(1);
    let rows_per_tile = (target.capacity_words / width).min(r.div_ceil(macros_per_block)).max(1);
    let mut tiles = Vec::new();
    for r0 in (0..r).step_by(rows_per_tile) {
        for c0 in (0..c).step_by(width) {
            let t = tiles.len();
            let (tr, tc) = (r0..(r0 + rows_per_tile).min(r), c0..(c0 + width).min(c));
            let (tr, tc) = match orientation {
                Orientation::RowWise => (tr, tc),
                Orientation::ColumnWise => (tc, tr),
            };
            tiles.push(PlannedTile {
                rows: tr,
                cols: tc,
                slot: t % target.macros,
                pass: t / target.macros,
            });
        }
    }
    Ok(TilePlan {
        rows,
        cols,
        precision,
        orientation,
        macros: target.macros,
        tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn core(precision: Precision) -> TileTarget {
        TileTarget::new(&CoreLayout::default(), MacroMode::Normal, Region::Whole, precision, 8)
    }

    #[test]
    fn even_row_split() {
        let p = tile_partition(256, 64, Precision::Int16, &core(Precision::Int16), Orientation::RowWise).unwrap();
        assert_eq!(p.tiles.len(), 8);
        assert!(p.tiles.iter().all(|t| t.rows.len() == 32 && t.cols == (0..64)));
        assert_eq!(p.tiles.iter().map(|t| t.slot).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert_eq!(p.passes(), 1);
    }

    #[test]
    fn one_row_per_macro() {
        let p = tile_partition(8, 8, Precision::Int16, &core(Precision::Int16), Orientation::RowWise).unwrap();
        assert_eq!(p.tiles.len(), 8);
        assert!(p.tiles.iter().enumerate().all(|(i, t)| t.rows == (i..i + 1) && t.cols == (0..8)));
    }

    #[test]
    fn large_int8_matrix_is_multi_pass() {
        // K^T of a 2048x512 INT8 key matrix
        let p = tile_partition(512, 2048, Precision::Int8, &core(Precision::Int8), Orientation::RowWise).unwrap();
        assert_eq!(p.tiles.len(), 128);
        assert_eq!(p.passes(), 16);
        assert!(p.tiles.iter().all(|t| t.rows.len() == 64 && t.cols.len() == 128));
        assert_eq!(p.total_bits(), 2048 * 512 * 8);
    }

    #[test]
    fn wide_matrix_shares_macros_between_column_blocks() {
        let p = tile_partition(64, 256, Precision::Int16, &core(Precision::Int16), Orientation::RowWise).unwrap();
        assert_eq!(p.tiles.len(), 8);
        assert!(p.tiles.iter().all(|t| t.rows.len() == 16 && t.cols.len() == 128));
    }

    #[test]
    fn column_wise_cuts_column_blocks() {
        let p = tile_partition(128, 64, Precision::Int16, &core(Precision::Int16), Orientation::ColumnWise).unwrap();
        assert_eq!(p.tiles.len(), 8);
        assert!(p.tiles.iter().enumerate().all(|(i, t)| t.rows == (0..128) && t.cols == (8 * i..8 * i + 8)));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(matches!(
            tile_partition(0, 4, Precision::Int16, &core(Precision::Int16), Orientation::RowWise),
            Err(ScheduleError::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn tiles_partition_the_matrix(
            rows in 1usize..300,
            cols in 1usize..300,
            macros in 1usize..9,
            hybrid in any::<bool>(),
            column_wise in any::<bool>(),
        ) {
            let (mode, region) = if hybrid { (MacroMode::Hybrid, Region::Input) } else { (MacroMode::Normal, Region::Whole) };
            let target = TileTarget::new(&CoreLayout::default(), mode, region, Precision::Int16, macros);
            let orientation = if column_wise { Orientation::ColumnWise } else { Orientation::RowWise };
            let p = tile_partition(rows, cols, Precision::Int16, &target, orientation).unwrap();
            let mut hits = vec![0u8; rows * cols];
            for t in &p.tiles {
                prop_assert!(t.words() <= target.capacity_words);
                prop_assert!(t.slot < macros);
                for r in t.rows.clone() {
                    for c in t.cols.clone() {
                        hits[r * cols + c] += 1;
                    }
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
            for (i, t) in p.tiles.iter().enumerate() {
                prop_assert_eq!(t.slot, i % macros);
                prop_assert_eq!(t.pass, i / macros);
            }
        }
    }
}
