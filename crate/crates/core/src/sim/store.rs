//! Matrices as the simulated hardware sees them: element by element, with
//! partial sums that become values once every contribution has arrived.

use std::collections::{BTreeMap, HashMap};

use crate::fixed::{FixedMatrix, Precision, Requant};
use crate::operands::OperandSet;
use crate::workload::{MatrixKey, OpKind, WorkloadGraph};

use super::SimError;

pub(super) struct Slot {
    pub rows: usize,
    pub cols: usize,
    pub precision: Precision,
    pub frac: u32,
    data: Vec<i32>,
    ready: Vec<bool>,
    acc: Vec<i64>,
    hits: Vec<u32>,
    inner: u32,
    rq: Requant,
}

impl Slot {
    fn complete(m: &FixedMatrix) -> Self {
        let n = m.rows() * m.cols();
        Slot {
            rows: m.rows(),
            cols: m.cols(),
            precision: m.precision(),
            frac: m.frac_bits(),
            data: m.data().to_vec(),
            ready: vec![true; n],
            acc: Vec::new(),
            hits: Vec::new(),
            inner: 0,
            rq: Requant::new(0, m.precision()),
        }
    }

    fn pending(rows: usize, cols: usize, precision: Precision, frac: u32, inner: usize, rq: Requant) -> Self {
        let n = rows * cols;
        Slot {
            rows,
            cols,
            precision,
            frac,
            data: vec![0; n],
            ready: vec![false; n],
            acc: vec![0; n],
            hits: vec![0; n],
            inner: inner as u32,
            rq,
        }
    }

    pub fn get(&self, key: &MatrixKey, r: usize, c: usize) -> Result<i32, SimError> {
        if r >= self.rows || c >= self.cols {
            return Err(SimError::Dataflow(format!("{key}[{r}][{c}] outside {}x{}", self.rows, self.cols)));
        }
        let i = r * self.cols + c;
        if !self.ready[i] {
            return Err(SimError::Dataflow(format!("{key}[{r}][{c}] read before it was produced")));
        }
        Ok(self.data[i])
    }

    fn is_complete(&self) -> bool {
        self.ready.iter().all(|&r| r)
    }

    fn to_matrix(&self) -> FixedMatrix {
        FixedMatrix::new(self.rows, self.cols, self.precision, self.frac, self.data.clone())
            .expect("slot values stay in range")
    }
}

pub(super) struct Store<'g> {
    graph: &'g WorkloadGraph,
    slots: HashMap<MatrixKey, Slot>,
}

impl<'g> Store<'g> {
    pub fn new(graph: &'g WorkloadGraph, operands: &OperandSet) -> Self {
        let slots = operands.iter().map(|(k, m)| (*k, Slot::complete(m))).collect();
        Store { graph, slots }
    }

    pub fn slot(&self, key: &MatrixKey) -> Result<&Slot, SimError> {
        self.slots
            .get(key)
            .ok_or_else(|| SimError::Dataflow(format!("{key} read before any part was produced")))
    }

    /// Partial-sum slot for a matrix product result.
    fn result_slot(&mut self, key: MatrixKey) -> Result<&mut Slot, SimError> {
        let MatrixKey::Result { node, .. } = key else {
            return Err(SimError::Dataflow(format!("{key} is not a product result")));
        };
        let g = self.graph;
        let op = g.nodes.get(node.0).ok_or_else(|| SimError::Dataflow(format!("unknown node {node}")))?;
        if op.kind == OpKind::Softmax {
            return Err(SimError::Dataflow(format!("{key} is produced by the SFU, not a macro")));
        }
        Ok(self.slots.entry(key).or_insert_with(|| {
            Slot::pending(
                op.rows,
                op.cols,
                g.result_precision(op.kind),
                g.result_frac(op.kind),
                op.inner,
                g.requant(op.kind),
            )
        }))
    }

    /// Adds `partial` to `out[rows][cols]`, with `contrib` inner-dimension
    /// terms per element.
    pub fn accumulate(
        &mut self,
        key: MatrixKey,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        partial: &[i64],
        contrib: usize,
    ) -> Result<(), SimError> {
        let slot = self.result_slot(key)?;
        if rows.end > slot.rows || cols.end > slot.cols {
            return Err(SimError::Dataflow(format!(
                "{key}: block [{rows:?}][{cols:?}] outside {}x{}",
                slot.rows, slot.cols
            )));
        }
        let width = cols.len();
        for (i, r) in rows.enumerate() {
            for (j, c) in cols.clone().enumerate() {
                let at = r * slot.cols + c;
                slot.acc[at] += partial[i * width + j];
                slot.hits[at] += contrib as u32;
                if slot.hits[at] > slot.inner {
                    return Err(SimError::Dataflow(format!("{key}[{r}][{c}] accumulated more than once")));
                }
                if slot.hits[at] == slot.inner {
                    slot.data[at] = slot.rq.apply(slot.acc[at]);
                    slot.ready[at] = true;
                }
            }
        }
        Ok(())
    }

    /// Stores finished rows (softmax output).
    pub fn put_rows(&mut self, key: MatrixKey, rows: std::ops::Range<usize>, block: &FixedMatrix, total_rows: usize) {
        let slot = self.slots.entry(key).or_insert_with(|| {
            Slot::pending(total_rows, block.cols(), block.precision(), block.frac_bits(), 0, Requant::new(0, block.precision()))
        });
        for (i, r) in rows.enumerate() {
            for c in 0..block.cols() {
                let at = r * slot.cols + c;
                slot.data[at] = block.get(i, c);
                slot.ready[at] = true;
            }
        }
    }

    pub fn matrix(&self, key: &MatrixKey) -> Result<FixedMatrix, SimError> {
        let slot = self.slot(key)?;
        if !slot.is_complete() {
            return Err(SimError::Dataflow(format!("{key} used before it was complete")));
        }
        Ok(slot.to_matrix())
    }

    pub fn rows(&self, key: &MatrixKey, rows: std::ops::Range<usize>) -> Result<FixedMatrix, SimError> {
        let slot = self.slot(key)?;
        let mut data = Vec::with_capacity(rows.len() * slot.cols);
        for r in rows.clone() {
            for c in 0..slot.cols {
                data.push(slot.get(key, r, c)?);
            }
        }
        Ok(FixedMatrix::new(rows.len(), slot.cols, slot.precision, slot.frac, data).expect("slot values stay in range"))
    }

    pub fn insert(&mut self, key: MatrixKey, m: &FixedMatrix) {
        self.slots.insert(key, Slot::complete(m));
    }

    /// Every finished matrix that is not a primary operand.
    pub fn outputs(self) -> BTreeMap<MatrixKey, FixedMatrix> {
        self.slots
            .iter()
            .filter(|(k, s)| {
                s.is_complete() && !matches!(k, MatrixKey::Weight { .. } | MatrixKey::Input { layer: 0, .. })
            })
            .map(|(k, s)| (*k, s.to_matrix()))
            .collect()
    }
}
