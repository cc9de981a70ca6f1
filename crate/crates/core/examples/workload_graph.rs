//! The two-stream attention stack as a graph of matrix operations.

use num_rational::Ratio;
use streamdcim::fixed::Precision;
use streamdcim::workload::{build_vilbert_workload, select_tokens, ModelTable, Stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = ModelTable::default();
    let g = build_vilbert_workload(&table, "desk-base", 256, 192, Precision::Int16)?;
    println!("{} layers, d_model {}, {} heads of {}", g.layers(), g.model.d_model, g.model.heads, g.d_head());
    for (i, op) in g.nodes.iter().enumerate().take(12) {
        println!("  n{i:<3} {:<28} {:>12} MACs", op.label(), op.macs());
    }
    println!("total {} MACs", g.total_macs());

    let full = build_vilbert_workload(&table, "base", 4096, 4096, Precision::Int16)?;
    println!("full-size base: {:.2e} MACs", full.total_macs() as f64);

    let scores: Vec<Ratio<i64>> = [5, 9, 9, 1, 7, 2].iter().map(|&s| Ratio::from_integer(s)).collect();
    println!("keep 1/2 of {:?} -> {:?}", [5, 9, 9, 1, 7, 2], select_tokens(&scores, Ratio::new(1, 2)));
    println!("stream X carries {} tokens into layer 1", g.tokens[1].get(Stream::X));
    Ok(())
}
