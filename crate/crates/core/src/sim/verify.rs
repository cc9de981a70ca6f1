use std::fmt;

use crate::operands::OperandSet;
use crate::reference::{evaluate, ReferenceError};
use crate::workload::{MatrixKey, NodeId, WorkloadGraph, NODES_PER_LAYER};

use super::SimOutputs;

/// First element where the simulated chain departs from the reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub key: MatrixKey,
    pub node: Option<NodeId>,
    pub head: Option<usize>,
    /// `(row, col)`; `None` when the matrix is missing or misshapen.
    pub index: Option<(usize, usize)>,
    pub expected: Option<i32>,
    pub actual: Option<i32>,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.index, self.expected, self.actual) {
            (Some((r, c)), Some(e), Some(a)) => write!(f, "{}[{r}][{c}]: expected {e}, got {a}", self.key),
            _ => write!(f, "{}: missing or misshapen", self.key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub checked: usize,
    pub mismatch: Option<Mismatch>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

/// Position in dataflow order: a layer's input precedes its nodes, which
/// precede the next layer's input.
fn dataflow_rank(key: &MatrixKey) -> (usize, usize) {
    match key {
        MatrixKey::Input { layer, stream } => (layer * (NODES_PER_LAYER + 1), stream.index()),
        MatrixKey::Weight { node, head } | MatrixKey::Result { node, head } => {
            let layer = node.0 / NODES_PER_LAYER;
            (layer * (NODES_PER_LAYER + 1) + 1 + node.0 % NODES_PER_LAYER, *head)
        }
    }
}

/// Compares every intermediate and output of the reference chain with the
/// simulated values, bit for bit, reporting the earliest divergence in
/// dataflow order.
pub fn verify_functional(
    outputs: &SimOutputs,
    graph: &WorkloadGraph,
    operands: &OperandSet,
) -> Result<Verification, ReferenceError> {
    let reference = evaluate(graph, operands)?;
    let mut checked = 0;
    let mut order: Vec<_> = reference.values.iter().collect();
    order.sort_by_key(|(k, _)| dataflow_rank(k));
    for (key, want) in order {
        let (node, head) = match key {
            MatrixKey::Result { node, head } => (Some(*node), Some(*head)),
            _ => (None, None),
        };
        let miss = |index, expected, actual| Mismatch {
            key: *key,
            node,
            head,
            index,
            expected,
            actual,
        };
        let Some(got) = outputs.get(key) else {
            return Ok(Verification {
                checked,
                mismatch: Some(miss(None, None, None)),
            });
        };
        if (got.rows(), got.cols()) != (want.rows(), want.cols()) {
            return Ok(Verification {
                checked,
                mismatch: Some(miss(None, None, None)),
            });
        }
        if let Some(i) = want.data().iter().zip(got.data()).position(|(a, b)| a != b) {
            let (r, c) = (i / want.cols(), i % want.cols());
            return Ok(Verification {
                checked,
                mismatch: Some(miss(Some((r, c)), Some(want.get(r, c)), Some(got.get(r, c)))),
            });
        }
        checked += 1;
    }
    Ok(Verification { checked, mismatch: None })
}
