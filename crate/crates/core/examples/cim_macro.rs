//! One macro: capacity per mode, rewrite latency and the two compute sides.

use streamdcim::cim::{CoreId, CoreLayout, MacroId, MacroMode, MacroState, Region, ResidentTile, Side, TileDescriptor};
use streamdcim::fixed::Precision;
use streamdcim::workload::{MatrixKey, NodeId, Stream};

fn tile(key: MatrixKey, rows: usize, cols: usize) -> ResidentTile {
    ResidentTile {
        desc: TileDescriptor { key, transposed: false, rows: 0..rows, cols: 0..cols, precision: Precision::Int16 },
        data: (0..(rows * cols) as i32).map(|v| v % 7 - 3).collect(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layout = CoreLayout::default();
    let g = &layout.geometry;
    println!("macro: {} bits, {} INT16 words, {} INT16 MACs/cycle", g.capacity_bits(), g.words(Precision::Int16), g.macs_per_cycle(Precision::Int16));
    for (mode, region) in [(MacroMode::Normal, Region::Whole), (MacroMode::Hybrid, Region::Input), (MacroMode::Hybrid, Region::Weight)] {
        println!("  {mode:?}/{region:?}: {} words", layout.region_words(mode, region, Precision::Int16));
    }

    let mut m = MacroState::new(MacroId::new(CoreId::Tbr, 0), MacroMode::Normal);
    m.configure_mode(MacroMode::Hybrid, &layout)?;
    let weights = MatrixKey::Weight { node: NodeId(2), head: 0 };
    let inputs = MatrixKey::Input { layer: 0, stream: Stream::Y };
    for (region, t) in [(Region::Weight, tile(weights, 4, 3)), (Region::Input, tile(inputs, 2, 4))] {
        let cycles = m.write_tile(region, t, &layout)?;
        println!("rewrite {region:?}: {cycles} cycles");
        if let Err(e) = m.begin_compute() {
            println!("  {e}");
        }
        m.end_rewrite();
    }

    m.begin_compute()?;
    println!("x W   = {:?}", m.compute_step(Region::Weight, Side::Right, &[1, 2, 3, 4])?);
    println!("I y   = {:?}", m.compute_step(Region::Input, Side::Left, &[1, 0, -1, 2])?);
    m.end_compute();
    println!("{} MACs, status {:?}", m.macs(), m.status());

    let too_big = tile(weights, 64, 64);
    println!("oversized tile: {}", m.write_tile(Region::Weight, too_big, &layout).unwrap_err());
    Ok(())
}
