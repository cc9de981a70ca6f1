//! Quantized products and the Q1.14 softmax every mode shares.

use streamdcim::fixed::{matmul, softmax_rows, transpose, FixedMatrix, Precision, Requant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = FixedMatrix::from_rows(&[&[3, -1, 2], &[0, 4, -2]], Precision::Int8);
    let k = FixedMatrix::from_rows(&[&[1, 2, 0], &[-3, 1, 1], &[2, 2, 2]], Precision::Int8);

    let scores = matmul(&q, &transpose(&k), Requant::new(0, Precision::Int16))?;
    println!("Q K^T = {:?}", scores.data());

    // a large accumulator saturates instead of wrapping
    let wide = FixedMatrix::from_rows(&[&[127, 127]], Precision::Int8);
    let sat = matmul(&wide, &transpose(&wide), Requant::new(0, Precision::Int8))?;
    println!("127*127*2 at INT8 -> {}", sat.get(0, 0));

    let p = softmax_rows(&scores, 1.0 / (3f64).sqrt())?;
    for r in 0..p.rows() {
        let row: Vec<i32> = (0..p.cols()).map(|c| p.get(r, c)).collect();
        println!("P[{r}] = {row:?} (sum {} of 16384)", row.iter().sum::<i32>());
    }
    Ok(())
}
