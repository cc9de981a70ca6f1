//! Replays a schedule with real payloads and checks every matrix against
//! the reference chain; then corrupts one event to show the diagnosis.

use streamdcim::cim::CoreLayout;
use streamdcim::fixed::Precision;
use streamdcim::operands::OperandSet;
use streamdcim::schedule::{schedule_workload, ExecMode, Payload, ScheduleOptions};
use streamdcim::sim::{simulate, verify_functional, SimMode};
use streamdcim::workload::{build_vilbert_workload, MatrixKey, ModelTable, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layout = CoreLayout::default();
    let g = build_vilbert_workload(&ModelTable::default(), "desk-base", 32, 32, Precision::Int16)?;
    let ops = OperandSet::synthetic(&g, 1);
    for mode in ExecMode::ALL {
        let s = schedule_workload(&g, mode, &layout, &ScheduleOptions::default())?;
        let (out, report) = simulate(&s, &layout, &g, &ops, SimMode::Functional)?;
        let v = verify_functional(&out, &g, &ops)?;
        println!(
            "{:<13} {} cycles, {} MACs, overlap {}, bubbles {}, {} matrices {}",
            mode.name(),
            report.total_cycles,
            report.mac_total,
            report.overlap_cycles,
            report.bubble_cycles,
            v.checked,
            if v.passed() { "bit-exact" } else { "DIFFER" }
        );
    }

    let mut s = schedule_workload(&g, ExecMode::LayerStream, &layout, &ScheduleOptions::default())?;
    let x = MatrixKey::Input { layer: 0, stream: Stream::X };
    let victim = s
        .events
        .iter_mut()
        .find_map(|e| match &mut e.payload {
            Payload::Compute { parts, .. } if parts[0].streamed.key == x => Some(parts),
            _ => None,
        })
        .expect("a compute streams the X input");
    for p in victim.iter_mut() {
        p.streamed.key = MatrixKey::Input { layer: 0, stream: Stream::Y };
    }
    let (out, _) = simulate(&s, &layout, &g, &ops, SimMode::Functional)?;
    match verify_functional(&out, &g, &ops)?.mismatch {
        Some(m) => println!("corrupted run: {m} (node {:?})", m.node),
        None => println!("corruption went unnoticed"),
    }
    Ok(())
}
