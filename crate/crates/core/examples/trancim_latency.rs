//! The analytic rewrite-latency case of a layer-streaming design, replayed
//! on the simulator.

use streamdcim::trancim::trancim_example;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{}", trancim_example()?);
    Ok(())
}
