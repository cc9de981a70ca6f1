//! Quantized integer matrices and the arithmetic shared by the simulator and
//! its reference model.
//!
//! All products accumulate in `i64`. For INT16 operands a single product needs
//! 31 bits, so a dot product of length up to 2^32 cannot overflow; this is far
//! beyond any shape the simulator accepts.

use std::fmt;

use num_rational::Ratio;

/// Fractional bits of attention probabilities (Q1.14).
pub const PROB_FRAC_BITS: u32 = 14;
/// Fixed-point code for a probability of exactly 1.0.
pub const PROB_ONE: i32 = 1 << PROB_FRAC_BITS;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("value {value} at index {index} does not fit {precision}")]
    Range {
        value: i64,
        index: usize,
        precision: Precision,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Int8,
    Int16,
}

impl Precision {
    pub const fn bits(self) -> u32 {
        match self {
            Precision::Int8 => 8,
            Precision::Int16 => 16,
        }
    }

    pub const fn min(self) -> i64 {
        -(1i64 << (self.bits() - 1))
    }

    pub const fn max(self) -> i64 {
        (1i64 << (self.bits() - 1)) - 1
    }

    pub fn saturate(self, v: i64) -> i32 {
        v.clamp(self.min(), self.max()) as i32
    }

    pub fn contains(self, v: i64) -> bool {
        (self.min()..=self.max()).contains(&v)
    }

    pub fn parse(s: &str) -> Option<Precision> {
        match s.trim().to_ascii_lowercase().as_str() {
            "int8" | "i8" => Some(Precision::Int8),
            "int16" | "i16" => Some(Precision::Int16),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Int8 => f.write_str("int8"),
            Precision::Int16 => f.write_str("int16"),
        }
    }
}

/// Row-major quantized integer matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedMatrix {
    rows: usize,
    cols: usize,
    precision: Precision,
    frac_bits: u32,
    data: Vec<i32>,
}

impl FixedMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        precision: Precision,
        frac_bits: u32,
        data: Vec<i32>,
    ) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some((index, &v)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| !precision.contains(v as i64))
        {
            return Err(TensorError::Range {
                value: v as i64,
                index,
                precision,
            });
        }
        Ok(FixedMatrix {
            rows,
            cols,
            precision,
            frac_bits,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, precision: Precision, frac_bits: u32) -> Self {
        FixedMatrix {
            rows,
            cols,
            precision,
            frac_bits,
            data: vec![0; rows * cols],
        }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        let mut m = Self::zeros(n, n, precision, 0);
        for i in 0..n {
            m.data[i * n + i] = 1;
        }
        m
    }

    /// Builds a matrix from nested rows; panics on ragged input. Test helper.
    pub fn from_rows(rows: &[&[i32]], precision: Precision) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<i32> = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), cols, "ragged rows");
                r.iter().copied()
            })
            .collect();
        Self::new(rows.len(), cols, precision, 0, data).expect("values out of range")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bits(&self) -> u64 {
        (self.data.len() as u64) * self.precision.bits() as u64
    }

    /// Copies the rectangle `rows x cols` out of this matrix.
    pub fn submatrix(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> FixedMatrix {
        assert!(rows.end <= self.rows && cols.end <= self.cols);
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&self.data[r * self.cols + cols.start..r * self.cols + cols.end]);
        }
        FixedMatrix {
            rows: rows.len(),
            cols: cols.len(),
            precision: self.precision,
            frac_bits: self.frac_bits,
            data,
        }
    }

    /// Keeps the listed rows, in the order given.
    pub fn gather_rows(&self, keep: &[usize]) -> FixedMatrix {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &r in keep {
            data.extend_from_slice(self.row(r));
        }
        FixedMatrix {
            rows: keep.len(),
            cols: self.cols,
            precision: self.precision,
            frac_bits: self.frac_bits,
            data,
        }
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hconcat(parts: &[FixedMatrix]) -> Result<FixedMatrix, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("hconcat of nothing".into()))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(TensorError::Shape("hconcat with unequal row counts".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(FixedMatrix {
            rows,
            cols,
            precision: first.precision,
            frac_bits: first.frac_bits,
            data,
        })
    }

    pub fn with_frac_bits(mut self, frac_bits: u32) -> Self {
        self.frac_bits = frac_bits;
        self
    }

    pub fn dequantize(&self, r: usize, c: usize) -> f64 {
        self.get(r, c) as f64 / (1u64 << self.frac_bits) as f64
    }
}

/// Output quantization applied after an exact integer product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub shift: u32,
    pub precision: Precision,
}

impl Requant {
    pub const fn new(shift: u32, precision: Precision) -> Self {
        Requant { shift, precision }
    }

    pub fn apply(&self, acc: i64) -> i32 {
        self.precision.saturate(shift_round(acc, self.shift))
    }
}

/// Arithmetic right shift rounding half away from zero.
pub fn shift_round(x: i64, shift: u32) -> i64 {
    if shift == 0 {
        return x;
    }
    let half = 1i64 << (shift - 1);
    if x >= 0 {
        (x + half) >> shift
    } else {
        -((-x + half) >> shift)
    }
}

/// Exact integer product `a * b`, requantized by `rq`.
///
/// Operand precisions may differ (probabilities are always INT16); the output
/// carries `a.frac + b.frac - shift` fractional bits (floored at 0).
pub fn matmul(a: &FixedMatrix, b: &FixedMatrix, rq: Requant) -> Result<FixedMatrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let acc = matmul_acc(a, b);
    let data = acc.into_iter().map(|v| rq.apply(v)).collect();
    Ok(FixedMatrix {
        rows: a.rows,
        cols: b.cols,
        precision: rq.precision,
        frac_bits: (a.frac_bits + b.frac_bits).saturating_sub(rq.shift),
        data,
    })
}

/// Raw accumulators of `a * b` before requantization.
pub fn matmul_acc(a: &FixedMatrix, b: &FixedMatrix) -> Vec<i64> {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut acc = vec![0i64; m * n];
    for i in 0..m {
        let out = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p] as i64;
            if av == 0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv as i64;
            }
        }
    }
    acc
}

pub fn transpose(a: &FixedMatrix) -> FixedMatrix {
    let mut data = vec![0; a.data.len()];
    for r in 0..a.rows {
        for c in 0..a.cols {
            data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    FixedMatrix {
        rows: a.cols,
        cols: a.rows,
        precision: a.precision,
        frac_bits: a.frac_bits,
        data,
    }
}

/// Row-stochastic matrix of Q1.14 probability codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl ProbMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    /// Wraps raw codes; used when probabilities come back from simulated hardware.
    pub fn from_codes(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape("probability codes do not match shape".into()));
        }
        Ok(ProbMatrix { rows, cols, data })
    }

    pub fn as_fixed(&self) -> FixedMatrix {
        FixedMatrix {
            rows: self.rows,
            cols: self.cols,
            precision: Precision::Int16,
            frac_bits: PROB_FRAC_BITS,
            data: self.data.clone(),
        }
    }
}

/// Softmax over each row of `a` after scaling by `scale`.
///
/// The exponentials are evaluated in `f64` and each probability is rounded
/// half away from zero to Q1.14. Every execution mode calls this same routine,
/// so its results are bit-identical across modes.
pub fn softmax_rows(a: &FixedMatrix, scale: f64) -> Result<ProbMatrix, TensorError> {
    if a.is_empty() {
        return Err(TensorError::Shape("softmax of an empty matrix".into()));
    }
    let unit = (1u64 << a.frac_bits) as f64;
    let mut data = Vec::with_capacity(a.data.len());
    let mut exps = vec![0f64; a.cols];
    for r in 0..a.rows {
        let row = a.row(r);
        let max = row
            .iter()
            .map(|&v| scale * v as f64 / unit)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (e, &v) in exps.iter_mut().zip(row) {
            *e = (scale * v as f64 / unit - max).exp();
            sum += *e;
        }
        data.extend(exps.iter().map(|e| {
            let q = (e / sum * PROB_ONE as f64).round();
            q.clamp(0.0, PROB_ONE as f64) as i32
        }));
    }
    Ok(ProbMatrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Exact column means of a probability matrix, in code units.
pub fn column_mean(p: &ProbMatrix) -> Vec<Ratio<i64>> {
    column_sums(p)
        .into_iter()
        .map(|s| Ratio::new(s, p.rows as i64))
        .collect()
}

pub fn column_sums(p: &ProbMatrix) -> Vec<i64> {
    let mut sums = vec![0i64; p.cols];
    for r in 0..p.rows {
        for (s, &v) in sums.iter_mut().zip(&p.data[r * p.cols..(r + 1) * p.cols]) {
            *s += v as i64;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const I16: Precision = Precision::Int16;

    #[test]
    fn schoolbook_product() {
        let a = FixedMatrix::from_rows(&[&[1, 2], &[3, 4]], I16);
        let b = FixedMatrix::from_rows(&[&[5, 6], &[7, 8]], I16);
        let c = matmul(&a, &b, Requant::new(0, I16)).unwrap();
        assert_eq!(c.data(), &[19, 22, 43, 50]);
    }

    #[test]
    fn identity_and_zero() {
        let m = FixedMatrix::from_rows(&[&[-7, 300], &[32767, -32768]], I16);
        let id = FixedMatrix::identity(2, I16);
        assert_eq!(matmul(&id, &m, Requant::new(0, I16)).unwrap(), m);
        assert_eq!(matmul(&m, &id, Requant::new(0, I16)).unwrap(), m);
        let z = FixedMatrix::zeros(3, 2, I16, 0);
        let out = matmul(&z, &m, Requant::new(0, I16)).unwrap();
        assert_eq!((out.rows(), out.cols()), (3, 2));
        assert!(out.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = FixedMatrix::zeros(2, 3, I16, 0);
        let b = FixedMatrix::zeros(2, 3, I16, 0);
        assert!(matches!(
            matmul(&a, &b, Requant::new(0, I16)),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn out_of_range_element_is_rejected() {
        let err = FixedMatrix::new(1, 2, Precision::Int8, 0, vec![1, 128]).unwrap_err();
        assert!(matches!(err, TensorError::Range { index: 1, .. }));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(shift_round(3, 1), 2);
        assert_eq!(shift_round(-3, 1), -2);
        assert_eq!(shift_round(5, 2), 1);
        assert_eq!(shift_round(6, 2), 2);
        assert_eq!(shift_round(-6, 2), -2);
        assert_eq!(Requant::new(0, Precision::Int8).apply(1000), 127);
        assert_eq!(Requant::new(0, Precision::Int8).apply(-1000), -128);
    }

    #[test]
    fn transpose_small() {
        let m = FixedMatrix::from_rows(&[&[1, 2], &[3, 4]], I16);
        assert_eq!(transpose(&m).data(), &[1, 3, 2, 4]);
        let row = FixedMatrix::from_rows(&[&[1, 2, 3, 4, 5]], I16);
        let col = transpose(&row);
        assert_eq!((col.rows(), col.cols()), (5, 1));
    }

    #[test]
    fn softmax_uniform_row() {
        let a = FixedMatrix::from_rows(&[&[9, 9, 9, 9]], I16);
        let p = softmax_rows(&a, 1.0).unwrap();
        assert_eq!(p.data(), &[4096; 4]);
    }

    #[test]
    fn softmax_one_hot_limit() {
        let a = FixedMatrix::from_rows(&[&[1000, 0, 0, 0]], I16);
        let p = softmax_rows(&a, 1.0).unwrap();
        assert!((p.get(0, 0) - PROB_ONE).abs() <= 1);
        assert_eq!(&p.data()[1..], &[0, 0, 0]);
    }

    #[test]
    fn softmax_thirds() {
        // Double-precision oracle: logits [0, ln 2] give [1/3, 2/3].
        let code = (std::f64::consts::LN_2 * PROB_ONE as f64).round() as i32;
        let a = FixedMatrix::new(1, 2, I16, 14, vec![0, code]).unwrap();
        let p = softmax_rows(&a, 1.0).unwrap();
        let x = code as f64 / PROB_ONE as f64;
        let oracle = [1.0 / (1.0 + x.exp()), x.exp() / (1.0 + x.exp())];
        for (got, want) in p.data().iter().zip(oracle) {
            assert!((*got as f64 - want * PROB_ONE as f64).abs() <= 2.0);
        }
        assert!((p.get(0, 0) - 5461).abs() <= 2);
        assert!((p.get(0, 1) - 10923).abs() <= 2);
    }

    #[test]
    fn softmax_of_empty_matrix_fails() {
        let a = FixedMatrix::zeros(0, 0, I16, 0);
        assert!(softmax_rows(&a, 1.0).is_err());
    }

    #[test]
    fn column_mean_examples() {
        let uniform = ProbMatrix::from_codes(2, 4, vec![4096; 8]).unwrap();
        assert!(column_mean(&uniform).iter().all(|s| *s == Ratio::from_integer(4096)));

        let one_hot = ProbMatrix::from_codes(
            3,
            3,
            vec![0, PROB_ONE, 0, 0, 0, PROB_ONE, PROB_ONE, 0, 0],
        )
        .unwrap();
        assert!(column_mean(&one_hot)
            .iter()
            .all(|s| *s == Ratio::new(PROB_ONE as i64, 3)));

        let p = ProbMatrix::from_codes(2, 2, vec![12288, 4096, 12288, 4096]).unwrap();
        assert_eq!(
            column_mean(&p),
            vec![Ratio::from_integer(12288), Ratio::from_integer(4096)]
        );
    }

    fn arb_matrix(max: usize, precision: Precision) -> impl Strategy<Value = FixedMatrix> {
        (1..=max, 1..=max).prop_flat_map(move |(r, c)| {
            proptest::collection::vec(precision.min() as i32..=precision.max() as i32, r * c)
                .prop_map(move |d| FixedMatrix::new(r, c, precision, 0, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matmul_matches_wide_oracle(
            (a, b) in (1usize..=16, 1usize..=16, 1usize..=16).prop_flat_map(|(m, k, n)| {
                let lo = I16.min() as i32;
                let hi = I16.max() as i32;
                (
                    proptest::collection::vec(lo..=hi, m * k)
                        .prop_map(move |d| FixedMatrix::new(m, k, I16, 0, d).unwrap()),
                    proptest::collection::vec(lo..=hi, k * n)
                        .prop_map(move |d| FixedMatrix::new(k, n, I16, 0, d).unwrap()),
                )
            })
        ) {
            let got = matmul_acc(&a, &b);
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    let mut want: i128 = 0;
                    for p in 0..a.cols() {
                        want += a.get(i, p) as i128 * b.get(p, j) as i128;
                    }
                    prop_assert_eq!(got[i * b.cols() + j] as i128, want);
                }
            }
            // Requantization with shift 0 is exact saturation of the same sums.
            let c = matmul(&a, &b, Requant::new(0, I16)).unwrap();
            for (v, acc) in c.data().iter().zip(&got) {
                prop_assert_eq!(*v as i64, (*acc).clamp(I16.min(), I16.max()));
            }
        }

        #[test]
        fn identity_is_neutral(m in arb_matrix(12, I16)) {
            let left = FixedMatrix::identity(m.rows(), I16);
            let right = FixedMatrix::identity(m.cols(), I16);
            prop_assert_eq!(&matmul(&left, &m, Requant::new(0, I16)).unwrap(), &m);
            prop_assert_eq!(&matmul(&m, &right, Requant::new(0, I16)).unwrap(), &m);
        }

        #[test]
        fn transpose_is_involution(m in arb_matrix(16, Precision::Int8)) {
            prop_assert_eq!(transpose(&transpose(&m)), m);
        }

        #[test]
        fn softmax_rows_sum_to_one(m in arb_matrix(12, I16), frac in 0u32..12, scale in 0.01f64..2.0) {
            let a = m.with_frac_bits(frac);
            let p = softmax_rows(&a, scale).unwrap();
            let tol = p.cols() as f64 / PROB_ONE as f64;
            for r in 0..p.rows() {
                let mut sum = 0.0;
                for c in 0..p.cols() {
                    prop_assert!(p.get(r, c) >= 0);
                    sum += p.get(r, c) as f64 / PROB_ONE as f64;
                }
                prop_assert!((sum - 1.0).abs() <= tol, "row {} sums to {}", r, sum);
            }
        }

        #[test]
        fn column_mean_is_permutation_equivariant(
            (rows, cols, codes, perm) in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
                (
                    Just(r),
                    Just(c),
                    proptest::collection::vec(0..=PROB_ONE, r * c),
                    Just((0..c).collect::<Vec<_>>()).prop_shuffle(),
                )
            })
        ) {
            let p = ProbMatrix::from_codes(rows, cols, codes.clone()).unwrap();
            let mut permuted = vec![0; rows * cols];
            for r in 0..rows {
                for (dst, &src) in perm.iter().enumerate() {
                    permuted[r * cols + dst] = codes[r * cols + src];
                }
            }
            let q = ProbMatrix::from_codes(rows, cols, permuted).unwrap();
            let sp = column_mean(&p);
            let sq = column_mean(&q);
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert_eq!(sq[dst], sp[src]);
            }
        }
    }
}
