//! The reference attention chain every execution mode must reproduce
//! bit-exactly, and the token ranking that drives pruning.

use std::collections::BTreeMap;

use num_rational::Ratio;

use crate::fixed::{column_sums, matmul, softmax_rows, transpose, FixedMatrix, ProbMatrix, TensorError};
use crate::operands::OperandSet;
use crate::workload::{
    apply_pruning, select_tokens, LayerKeep, MatrixKey, OpKind, PruningPolicy, Stream, WorkloadError,
    WorkloadGraph,
};

#[derive(Debug, thiserror::Error)]
pub enum ReferenceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("missing operand {0}")]
    Missing(MatrixKey),
}

/// Every intermediate of the chain, keyed like the simulator's outputs.
/// Probabilities are stored as INT16 with 14 fractional bits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reference {
    pub values: BTreeMap<MatrixKey, FixedMatrix>,
}

impl Reference {
    pub fn get(&self, key: &MatrixKey) -> Option<&FixedMatrix> {
        self.values.get(key)
    }

    /// Output of the whole stack for one stream.
    pub fn output(&self, graph: &WorkloadGraph, stream: Stream) -> Option<&FixedMatrix> {
        self.get(&MatrixKey::Input {
            layer: graph.layers(),
            stream,
        })
    }
}

/// Head-averaged column means of the probability matrices ranking one
/// modality: `sum_h sum_i P_h[i][j] / (heads * rows)`.
pub fn head_averaged_scores(probs: &[&ProbMatrix]) -> Vec<Ratio<i64>> {
    let Some(first) = probs.first() else {
        return Vec::new();
    };
    let mut sums = vec![0i64; first.cols()];
    for p in probs {
        for (s, v) in sums.iter_mut().zip(column_sums(p)) {
            *s += v;
        }
    }
    let den = (probs.len() * first.rows()) as i64;
    sums.into_iter().map(|s| Ratio::new(s, den)).collect()
}

fn fetch<'a>(
    values: &'a BTreeMap<MatrixKey, FixedMatrix>,
    operands: &'a OperandSet,
    key: MatrixKey,
) -> Result<&'a FixedMatrix, ReferenceError> {
    values
        .get(&key)
        .or_else(|| operands.get(&key))
        .ok_or(ReferenceError::Missing(key))
}

/// Evaluates layer `layer`, reading its inputs from `values` (or the layer-0
/// operands) and writing every per-head result plus the next layer's inputs.
fn evaluate_layer(
    graph: &WorkloadGraph,
    layer: usize,
    operands: &OperandSet,
    values: &mut BTreeMap<MatrixKey, FixedMatrix>,
) -> Result<(), ReferenceError> {
    let heads = graph.model.heads;
    for s in Stream::BOTH {
        let input = fetch(values, operands, MatrixKey::Input { layer, stream: s })?.clone();
        for kind in [OpKind::GenQ, OpKind::GenK, OpKind::GenV] {
            let node = graph.node_id(layer, s, kind);
            for head in 0..heads {
                let w = fetch(values, operands, MatrixKey::Weight { node, head })?;
                let out = matmul(&input, w, graph.requant(kind))?;
                values.insert(MatrixKey::Result { node, head }, out);
            }
        }
    }
    for c in Stream::BOTH {
        let kv = graph.kind(layer).kv_stream(c);
        let id = |st, k| graph.node_id(layer, st, k);
        for head in 0..heads {
            let r = |node| MatrixKey::Result { node, head };
            let q = &values[&r(id(c, OpKind::GenQ))];
            let kt = transpose(&values[&r(id(kv, OpKind::GenK))]);
            let a = matmul(q, &kt, graph.requant(OpKind::QKt))?.with_frac_bits(graph.result_frac(OpKind::QKt));
            let p = softmax_rows(&a, graph.scale)?.as_fixed();
            let o = matmul(&p, &values[&r(id(kv, OpKind::GenV))], graph.requant(OpKind::PV))?;
            values.insert(r(id(c, OpKind::QKt)), a);
            values.insert(r(id(c, OpKind::Softmax)), p);
            values.insert(r(id(c, OpKind::PV)), o);
        }
    }
    for s in Stream::BOTH {
        let pv = graph.node_id(layer, s, OpKind::PV);
        let parts: Vec<FixedMatrix> = (0..heads)
            .map(|head| values[&MatrixKey::Result { node: pv, head }].clone())
            .collect();
        let mut out = FixedMatrix::hconcat(&parts)?;
        if let Some(keep) = graph.keep_set(layer, s) {
            out = out.gather_rows(keep);
        }
        values.insert(MatrixKey::Input { layer: layer + 1, stream: s }, out);
    }
    Ok(())
}

/// Probability matrices (all heads) ranking `modality` after `layer`.
pub fn ranking_probs(
    graph: &WorkloadGraph,
    layer: usize,
    modality: Stream,
    values: &BTreeMap<MatrixKey, FixedMatrix>,
) -> Vec<ProbMatrix> {
    let node = graph.node_id(layer, graph.ranking_consumer(layer, modality), OpKind::Softmax);
    (0..graph.model.heads)
        .filter_map(|head| values.get(&MatrixKey::Result { node, head }))
        .map(|m| ProbMatrix::from_codes(m.rows(), m.cols(), m.data().to_vec()).expect("stored probabilities are valid"))
        .collect()
}

/// Computes the full chain for `graph` as built (including its keep sets).
pub fn evaluate(graph: &WorkloadGraph, operands: &OperandSet) -> Result<Reference, ReferenceError> {
    let mut values = BTreeMap::new();
    for layer in 0..graph.layers() {
        evaluate_layer(graph, layer, operands, &mut values)?;
    }
    Ok(Reference { values })
}

/// Runs the chain layer by layer, ranking tokens from each pruned layer's
/// probabilities, and returns the graph with the resulting keep sets.
pub fn derive_keep_sets(
    graph: &WorkloadGraph,
    operands: &OperandSet,
    policy: &PruningPolicy,
) -> Result<WorkloadGraph, ReferenceError> {
    let mut keeps = vec![LayerKeep::default(); graph.layers()];
    let mut g = apply_pruning(graph, &keeps)?;
    let mut values = BTreeMap::new();
    for layer in 0..graph.layers() {
        evaluate_layer(&g, layer, operands, &mut values)?;
        if policy.prunes(layer) {
            for s in Stream::BOTH {
                let probs = ranking_probs(&g, layer, s, &values);
                let refs: Vec<&ProbMatrix> = probs.iter().collect();
                keeps[layer].set(s, Some(select_tokens(&head_averaged_scores(&refs), policy.ratio(layer))));
            }
            g = apply_pruning(&g, &keeps)?;
            // same layer results, next-layer inputs now gathered
            evaluate_layer(&g, layer, operands, &mut values)?;
        }
    }
    g.pruning = policy.clone();
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::{Precision, Requant, PROB_ONE};
    use crate::workload::{build_vilbert_workload, ModelTable};

    fn setup(n: usize) -> (WorkloadGraph, OperandSet) {
        let g = build_vilbert_workload(&ModelTable::default(), "desk-base", n, n + 4, Precision::Int16).unwrap();
        let ops = OperandSet::synthetic(&g, 11);
        (g, ops)
    }

    #[test]
    fn chain_shapes() {
        let (g, ops) = setup(8);
        let r = evaluate(&g, &ops).unwrap();
        let a = r.get(&MatrixKey::Result { node: g.node_id(0, Stream::X, OpKind::QKt), head: 1 }).unwrap();
        assert_eq!((a.rows(), a.cols()), (8, 12));
        let out = r.output(&g, Stream::Y).unwrap();
        assert_eq!((out.rows(), out.cols()), (12, 128));
    }

    #[test]
    fn head_average_of_uniform_rows() {
        let p = ProbMatrix::from_codes(2, 4, vec![4096; 8]).unwrap();
        let s = head_averaged_scores(&[&p, &p]);
        assert_eq!(s, vec![Ratio::from_integer(4096); 4]);
        let one_hot = ProbMatrix::from_codes(1, 2, vec![PROB_ONE, 0]).unwrap();
        let flat = ProbMatrix::from_codes(1, 2, vec![8192, 8192]).unwrap();
        assert_eq!(
            head_averaged_scores(&[&one_hot, &flat]),
            vec![Ratio::from_integer(12288), Ratio::from_integer(4096)]
        );
    }

    #[test]
    fn keep_ratio_one_changes_nothing() {
        let (g, ops) = setup(8);
        let policy = PruningPolicy::uniform(g.layers(), Ratio::from_integer(1));
        let pruned = derive_keep_sets(&g, &ops, &policy).unwrap();
        assert_eq!(pruned.tokens, g.tokens);
        assert_eq!(evaluate(&pruned, &ops).unwrap().output(&g, Stream::X), evaluate(&g, &ops).unwrap().output(&g, Stream::X));
    }

    #[test]
    fn pruning_halves_tokens_and_matches_select_then_compute() {
        let (g, ops) = setup(16);
        let policy = PruningPolicy::uniform(g.layers(), Ratio::new(1, 2));
        let pruned = derive_keep_sets(&g, &ops, &policy).unwrap();
        assert_eq!(pruned.tokens[1].x, 8);
        assert_eq!(pruned.tokens[1].y, 10);
        assert_eq!(pruned.tokens[2].x, 4);
        let full = evaluate(&g, &ops).unwrap();
        let r = evaluate(&pruned, &ops).unwrap();
        // layer 0 is untouched by pruning decisions
        let k0 = MatrixKey::Result { node: g.node_id(0, Stream::X, OpKind::PV), head: 0 };
        assert_eq!(full.get(&k0), r.get(&k0));
        // the layer-1 input is the kept rows of the unpruned layer-0 output
        let keep = pruned.keep_set(0, Stream::X).unwrap();
        let parts: Vec<FixedMatrix> = (0..2)
            .map(|h| full.get(&MatrixKey::Result { node: g.node_id(0, Stream::X, OpKind::PV), head: h }).unwrap().clone())
            .collect();
        let expect = FixedMatrix::hconcat(&parts).unwrap().gather_rows(keep);
        assert_eq!(r.get(&MatrixKey::Input { layer: 1, stream: Stream::X }), Some(&expect));
        // generation on the kept rows equals the kept rows of generation on all rows
        let w = ops.weight(&g, 1, Stream::X, OpKind::GenQ, 0).unwrap();
        let kq = MatrixKey::Result { node: g.node_id(1, Stream::X, OpKind::GenQ), head: 0 };
        let all_rows = matmul(&FixedMatrix::hconcat(&parts).unwrap(), w, g.requant(OpKind::GenQ)).unwrap();
        assert_eq!(r.get(&kq), Some(&all_rows.gather_rows(keep)));
        // keep sets come from the head-averaged ranking
        let probs = ranking_probs(&g, 0, Stream::X, &full.values);
        let refs: Vec<&ProbMatrix> = probs.iter().collect();
        assert_eq!(keep, &select_tokens(&head_averaged_scores(&refs), Ratio::new(1, 2)));
    }

    #[test]
    fn chain_uses_cross_modal_operands() {
        let (g, ops) = setup(4);
        let r = evaluate(&g, &ops).unwrap();
        let q = r.get(&MatrixKey::Result { node: g.node_id(0, Stream::X, OpKind::GenQ), head: 0 }).unwrap();
        let k = r.get(&MatrixKey::Result { node: g.node_id(0, Stream::Y, OpKind::GenK), head: 0 }).unwrap();
        let a = matmul(q, &transpose(k), Requant::new(g.quant.score_shift, g.precision)).unwrap();
        let got = r.get(&MatrixKey::Result { node: g.node_id(0, Stream::X, OpKind::QKt), head: 0 }).unwrap();
        assert_eq!(got.data(), a.data());
    }
}
