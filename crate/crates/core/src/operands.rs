//! Seeded synthetic operands: layer-0 token matrices and every per-head
//! generation weight.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fixed::{FixedMatrix, Precision};
use crate::workload::{MatrixKey, OpKind, Stream, WorkloadGraph};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OperandSet {
    values: BTreeMap<MatrixKey, FixedMatrix>,
}

impl OperandSet {
    /// Draws every operand uniformly over the full precision range. Each
    /// matrix has its own stream derived from `(seed, key)`, so operands do
    /// not change when unrelated parts of the workload do.
    pub fn synthetic(graph: &WorkloadGraph, seed: u64) -> Self {
        let mut values = BTreeMap::new();
        let d_model = graph.model.d_model;
        for s in Stream::BOTH {
            let key = MatrixKey::Input { layer: 0, stream: s };
            values.insert(key, random_matrix(seed, key, graph.tokens[0].get(s), d_model, graph.precision));
        }
        for op in &graph.nodes {
            if !op.kind.is_generation() {
                continue;
            }
            for head in 0..op.heads {
                let key = MatrixKey::Weight { node: op.id, head };
                values.insert(key, random_matrix(seed, key, d_model, graph.d_head(), graph.precision));
            }
        }
        OperandSet { values }
    }

    pub fn get(&self, key: &MatrixKey) -> Option<&FixedMatrix> {
        self.values.get(key)
    }

    pub fn insert(&mut self, key: MatrixKey, value: FixedMatrix) {
        self.values.insert(key, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MatrixKey, &FixedMatrix)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight of generation node `kind` at `(layer, stream)` for one head.
    pub fn weight(&self, graph: &WorkloadGraph, layer: usize, stream: Stream, kind: OpKind, head: usize) -> Option<&FixedMatrix> {
        self.get(&MatrixKey::Weight {
            node: graph.node_id(layer, stream, kind),
            head,
        })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key_seed(seed: u64, key: MatrixKey) -> u64 {
    let parts: [u64; 3] = match key {
        MatrixKey::Input { layer, stream } => [1, layer as u64, stream.index() as u64],
        MatrixKey::Weight { node, head } => [2, node.0 as u64, head as u64],
        MatrixKey::Result { node, head } => [3, node.0 as u64, head as u64],
    };
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

fn random_matrix(seed: u64, key: MatrixKey, rows: usize, cols: usize, precision: Precision) -> FixedMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(key_seed(seed, key));
    let (lo, hi) = (precision.min() as i32, precision.max() as i32);
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..=hi)).collect();
    FixedMatrix::new(rows, cols, precision, 0, data).expect("values drawn inside the precision range")
}
