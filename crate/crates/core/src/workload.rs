//! Multimodal attention workloads: the per-layer operation graph of a
//! two-stream encoder stack, and dynamic token pruning between layers.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;

use crate::fixed::{Precision, Requant, PROB_FRAC_BITS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkloadError {
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
}

/// One of the two modality streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    X,
    Y,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::X, Stream::Y];

    pub fn other(self) -> Stream {
        match self {
            Stream::X => Stream::Y,
            Stream::Y => Stream::X,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Stream::X => 0,
            Stream::Y => 1,
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stream::X => f.write_str("X"),
            Stream::Y => f.write_str("Y"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    SelfModal,
    CrossModal,
}

impl AttentionKind {
    /// Stream providing keys and values to queries of `consumer`.
    pub fn kv_stream(self, consumer: Stream) -> Stream {
        match self {
            AttentionKind::SelfModal => consumer,
            AttentionKind::CrossModal => consumer.other(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    GenQ,
    GenK,
    GenV,
    QKt,
    Softmax,
    PV,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::GenQ,
        OpKind::GenK,
        OpKind::GenV,
        OpKind::QKt,
        OpKind::Softmax,
        OpKind::PV,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::GenQ => "GenQ",
            OpKind::GenK => "GenK",
            OpKind::GenV => "GenV",
            OpKind::QKt => "QKt",
            OpKind::Softmax => "Softmax",
            OpKind::PV => "PV",
        }
    }

    pub fn is_generation(self) -> bool {
        matches!(self, OpKind::GenQ | OpKind::GenK | OpKind::GenV)
    }

    pub fn dataflow(self) -> DataflowClass {
        match self {
            OpKind::GenQ | OpKind::GenK | OpKind::PV => DataflowClass::WeightStationary,
            OpKind::GenV | OpKind::QKt => DataflowClass::CrossForwarding,
            OpKind::Softmax => DataflowClass::Sfu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataflowClass {
    WeightStationary,
    CrossForwarding,
    Sfu,
}

/// Encoder dimensions. `layers` lists the attention kind of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    pub layers: Vec<AttentionKind>,
}

impl ModelConfig {
    pub fn new(name: &str, d_model: usize, heads: usize, layers: Vec<AttentionKind>) -> Self {
        ModelConfig {
            name: name.to_string(),
            d_model,
            heads,
            layers,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.d_model == 0 || self.heads == 0 || self.layers.is_empty() {
            return Err(WorkloadError::Config(format!(
                "model {}: d_model, heads and layer count must be positive",
                self.name
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(WorkloadError::Config(format!(
                "model {}: d_model {} is not divisible by {} heads",
                self.name, self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Editable table of named model configurations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelTable {
    models: BTreeMap<String, ModelConfig>,
}

impl Default for ModelTable {
    fn default() -> Self {
        let cross = |n| vec![AttentionKind::CrossModal; n];
        let mut t = ModelTable {
            models: BTreeMap::new(),
        };
        t.insert(ModelConfig::new("base", 768, 12, cross(6)));
        t.insert(ModelConfig::new("large", 1024, 16, cross(6)));
        // Reduced stacks with the same head width, small enough to simulate
        // with full functional payloads.
        t.insert(ModelConfig::new("desk-base", 128, 2, cross(2)));
        t.insert(ModelConfig::new("desk-large", 256, 4, cross(2)));
        t
    }
}

impl ModelTable {
    pub fn insert(&mut self, model: ModelConfig) {
        self.models.insert(model.name.clone(), model);
    }

    pub fn get(&self, name: &str) -> Result<&ModelConfig, WorkloadError> {
        self.models
            .get(name)
            .ok_or_else(|| WorkloadError::Config(format!("unknown model `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ModelConfig> {
        self.models.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayerSpec {
    pub stream: Stream,
    pub kind: AttentionKind,
    pub n_q: usize,
    pub n_kv: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub heads: usize,
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// One matrix operation. Shapes are per head: `rows x inner` times
/// `inner x cols`. Generation nodes are tagged with the stream whose tokens
/// they consume; the other nodes with the stream whose queries they serve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixOp {
    pub id: NodeId,
    pub layer: usize,
    pub stream: Stream,
    pub kind: OpKind,
    pub rows: usize,
    pub inner: usize,
    pub cols: usize,
    pub heads: usize,
    pub dataflow: DataflowClass,
    pub precision: Precision,
}

impl MatrixOp {
    pub fn macs_per_head(&self) -> u64 {
        match self.kind {
            OpKind::Softmax => 0,
            _ => (self.rows * self.inner * self.cols) as u64,
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs_per_head() * self.heads as u64
    }

    pub fn label(&self) -> String {
        format!("L{}.{}.{}", self.layer, self.kind.name(), self.stream)
    }
}

/// Names every matrix the workload reads or produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixKey {
    /// Token matrix entering `layer` for `stream`; `layer == layers` is the
    /// final output of the stack.
    Input { layer: usize, stream: Stream },
    /// Per-head weight slice of a generation node (`d_model x d_head`).
    Weight { node: NodeId, head: usize },
    /// Per-head output of a node.
    Result { node: NodeId, head: usize },
}

impl fmt::Display for MatrixKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixKey::Input { layer, stream } => write!(f, "I{stream}@{layer}"),
            MatrixKey::Weight { node, head } => write!(f, "W{}h{head}", node.0),
            MatrixKey::Result { node, head } => write!(f, "R{}h{head}", node.0),
        }
    }
}

/// Per-layer keep ratios; the ratio for layer `l` prunes tokens after it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruningPolicy {
    keep: BTreeMap<usize, Ratio<u64>>,
}

impl PruningPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn uniform(layers: usize, ratio: Ratio<u64>) -> Self {
        let mut p = Self::default();
        for l in 0..layers {
            p.set(l, ratio);
        }
        p
    }

    pub fn set(&mut self, layer: usize, ratio: Ratio<u64>) {
        assert!(
            ratio > Ratio::from_integer(0) && ratio <= Ratio::from_integer(1),
            "keep ratio must lie in (0, 1]"
        );
        self.keep.insert(layer, ratio);
    }

    pub fn ratio(&self, layer: usize) -> Ratio<u64> {
        self.keep
            .get(&layer)
            .copied()
            .unwrap_or_else(|| Ratio::from_integer(1))
    }

    pub fn prunes(&self, layer: usize) -> bool {
        self.ratio(layer) < Ratio::from_integer(1)
    }

    pub fn is_active(&self) -> bool {
        self.keep.values().any(|r| *r < Ratio::from_integer(1))
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, Ratio<u64>)> + '_ {
        self.keep.iter().map(|(l, r)| (*l, *r))
    }
}

/// `ceil(ratio * n)`, never below one.
pub fn keep_count(n: usize, ratio: Ratio<u64>) -> usize {
    let k = (ratio * Ratio::from_integer(n as u64)).ceil().to_integer() as usize;
    k.clamp(1, n.max(1))
}

/// Indices of the `ceil(keep_ratio * n)` highest scores, ties going to the
/// lower index, returned in ascending order.
pub fn select_tokens(scores: &[Ratio<i64>], keep_ratio: Ratio<u64>) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let k = keep_count(scores.len(), keep_ratio);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// Tokens kept after a layer, per stream. `None` keeps everything.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerKeep {
    pub x: Option<Vec<usize>>,
    pub y: Option<Vec<usize>>,
}

impl LayerKeep {
    pub fn get(&self, s: Stream) -> Option<&Vec<usize>> {
        match s {
            Stream::X => self.x.as_ref(),
            Stream::Y => self.y.as_ref(),
        }
    }

    pub fn set(&mut self, s: Stream, keep: Option<Vec<usize>>) {
        match s {
            Stream::X => self.x = keep,
            Stream::Y => self.y = keep,
        }
    }
}

/// Output shifts and formats of the attention chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantPolicy {
    /// Right shift after `I * W`.
    pub gen_shift: u32,
    /// Right shift after `Q * K^T`.
    pub score_shift: u32,
    /// Fractional bits the scores carry into the softmax.
    pub score_frac: u32,
    /// Right shift after `P * V` (P is Q1.14).
    pub out_shift: u32,
}

impl QuantPolicy {
    /// Shifts sized so that a dot product of uniformly distributed full-range
    /// operands lands back inside the output range with modest saturation.
    pub fn for_dims(precision: Precision, d_model: usize, d_head: usize) -> Self {
        let half_log = |n: usize| (usize::BITS - n.max(1).leading_zeros()).div_ceil(2);
        QuantPolicy {
            gen_shift: precision.bits() - 1 + half_log(d_model),
            score_shift: precision.bits() - 1 + half_log(d_head),
            score_frac: precision.bits() / 2,
            out_shift: crate::fixed::PROB_FRAC_BITS,
        }
    }
}

/// Tokens entering one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerTokens {
    pub x: usize,
    pub y: usize,
}

impl LayerTokens {
    pub fn get(&self, s: Stream) -> usize {
        match s {
            Stream::X => self.x,
            Stream::Y => self.y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadGraph {
    pub model: ModelConfig,
    pub precision: Precision,
    pub quant: QuantPolicy,
    /// Softmax input scale, `1/sqrt(d_head)` by default.
    pub scale: f64,
    pub pruning: PruningPolicy,
    /// `tokens[l]` enters layer `l`; one extra entry for the stack output.
    pub tokens: Vec<LayerTokens>,
    /// Applied after each layer; empty entries keep all tokens.
    pub keep_sets: Vec<LayerKeep>,
    pub nodes: Vec<MatrixOp>,
    pub edges: Vec<(NodeId, NodeId)>,
}

pub const NODES_PER_LAYER: usize = 12;

impl WorkloadGraph {
    pub fn layers(&self) -> usize {
        self.model.layers.len()
    }

    pub fn d_head(&self) -> usize {
        self.model.d_head()
    }

    pub fn node_id(&self, layer: usize, stream: Stream, kind: OpKind) -> NodeId {
        NodeId(layer * NODES_PER_LAYER + stream.index() * OpKind::ALL.len() + kind.index())
    }

    pub fn node(&self, id: NodeId) -> &MatrixOp {
        &self.nodes[id.0]
    }

    pub fn op(&self, layer: usize, stream: Stream, kind: OpKind) -> &MatrixOp {
        self.node(self.node_id(layer, stream, kind))
    }

    pub fn kind(&self, layer: usize) -> AttentionKind {
        self.model.layers[layer]
    }

    pub fn layer_spec(&self, layer: usize, consumer: Stream) -> AttentionLayerSpec {
        let kind = self.kind(layer);
        let t = self.tokens[layer];
        AttentionLayerSpec {
            stream: consumer,
            kind,
            n_q: t.get(consumer),
            n_kv: t.get(kind.kv_stream(consumer)),
            d_model: self.model.d_model,
            d_head: self.d_head(),
            heads: self.model.heads,
            precision: self.precision,
        }
    }

    /// Consumer stream whose attention probabilities rank the tokens of
    /// `modality` at `layer`.
    pub fn ranking_consumer(&self, layer: usize, modality: Stream) -> Stream {
        match self.kind(layer) {
            AttentionKind::SelfModal => modality,
            AttentionKind::CrossModal => modality.other(),
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(MatrixOp::macs).sum()
    }

    pub fn keep_set(&self, layer: usize, s: Stream) -> Option<&Vec<usize>> {
        self.keep_sets.get(layer).and_then(|k| k.get(s))
    }

    /// Topological order check over the dependency edges.
    pub fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            indeg[b.0] += 1;
            succ[a.0].push(b.0);
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
        seen == n
    }

    /// Requantization applied to the accumulated output of `kind`.
    pub fn requant(&self, kind: OpKind) -> Requant {
        let shift = match kind {
            OpKind::GenQ | OpKind::GenK | OpKind::GenV => self.quant.gen_shift,
            OpKind::QKt => self.quant.score_shift,
            OpKind::Softmax => 0,
            OpKind::PV => self.quant.out_shift,
        };
        Requant::new(shift, self.result_precision(kind))
    }

    pub fn result_precision(&self, kind: OpKind) -> Precision {
        match kind {
            OpKind::Softmax => Precision::Int16,
            _ => self.precision,
        }
    }

    /// Fractional bits carried by the per-head result of `kind`.
    pub fn result_frac(&self, kind: OpKind) -> u32 {
        match kind {
            OpKind::QKt => self.quant.score_frac,
            OpKind::Softmax => PROB_FRAC_BITS,
            _ => 0,
        }
    }

    fn rebuild(&mut self) {
        let d_model = self.model.d_model;
        let d_head = self.d_head();
        let heads = self.model.heads;
        let mut nodes = Vec::with_capacity(self.layers() * NODES_PER_LAYER);
        let mut edges = Vec::new();
        for layer in 0..self.layers() {
            let t = self.tokens[layer];
            let kind = self.kind(layer);
            for s in Stream::BOTH {
                let kv = kind.kv_stream(s);
                for op in OpKind::ALL {
                    let (rows, inner, cols) = match op {
                        OpKind::GenQ | OpKind::GenK | OpKind::GenV => (t.get(s), d_model, d_head),
                        OpKind::QKt => (t.get(s), d_head, t.get(kv)),
                        OpKind::Softmax => (t.get(s), 1, t.get(kv)),
                        OpKind::PV => (t.get(s), t.get(kv), d_head),
                    };
                    nodes.push(MatrixOp {
                        id: self.node_id(layer, s, op),
                        layer,
                        stream: s,
                        kind: op,
                        rows,
                        inner,
                        cols,
                        heads,
                        dataflow: op.dataflow(),
                        precision: self.precision,
                    });
                }
                let id = |st, op| self.node_id(layer, st, op);
                edges.push((id(s, OpKind::GenQ), id(s, OpKind::QKt)));
                edges.push((id(kv, OpKind::GenK), id(s, OpKind::QKt)));
                edges.push((id(s, OpKind::QKt), id(s, OpKind::Softmax)));
                edges.push((id(s, OpKind::Softmax), id(s, OpKind::PV)));
                edges.push((id(kv, OpKind::GenV), id(s, OpKind::PV)));
            }
            if layer + 1 < self.layers() {
                for s in Stream::BOTH {
                    for g in [OpKind::GenQ, OpKind::GenK, OpKind::GenV] {
                        let next = self.node_id(layer + 1, s, g);
                        edges.push((self.node_id(layer, s, OpKind::PV), next));
                        if self.keep_set(layer, s).is_some() {
                            let c = self.ranking_consumer(layer, s);
                            edges.push((self.node_id(layer, c, OpKind::Softmax), next));
                        }
                    }
                }
            }
        }
        self.nodes = nodes;
        self.edges = edges;
    }
}

/// Builds the two-stream attention stack for a named model.
pub fn build_vilbert_workload(
    table: &ModelTable,
    model: &str,
    n_x: usize,
    n_y: usize,
    precision: Precision,
) -> Result<WorkloadGraph, WorkloadError> {
    build_workload(table.get(model)?.clone(), n_x, n_y, precision)
}

pub fn build_workload(
    model: ModelConfig,
    n_x: usize,
    n_y: usize,
    precision: Precision,
) -> Result<WorkloadGraph, WorkloadError> {
    model.validate()?;
    if n_x == 0 || n_y == 0 {
        return Err(WorkloadError::Config("token counts must be at least 1".into()));
    }
    let layers = model.layers.len();
    let d_head = model.d_head();
    let mut g = WorkloadGraph {
        quant: QuantPolicy::for_dims(precision, model.d_model, d_head),
        scale: 1.0 / (d_head as f64).sqrt(),
        model,
        precision,
        pruning: PruningPolicy::none(),
        tokens: vec![LayerTokens { x: n_x, y: n_y }; layers + 1],
        keep_sets: vec![LayerKeep::default(); layers],
        nodes: Vec::new(),
        edges: Vec::new(),
    };
    g.rebuild();
    Ok(g)
}

/// Shrinks every layer after a pruned one to the kept token counts.
///
/// `keep_sets[l]` applies after layer `l`. Indices must be strictly
/// ascending and within the token count entering layer `l`.
pub fn apply_pruning(
    graph: &WorkloadGraph,
    keep_sets: &[LayerKeep],
) -> Result<WorkloadGraph, WorkloadError> {
    if keep_sets.len() > graph.layers() {
        return Err(WorkloadError::Validation(format!(
            "{} keep sets for {} layers",
            keep_sets.len(),
            graph.layers()
        )));
    }
    let mut g = graph.clone();
    g.keep_sets = vec![LayerKeep::default(); g.layers()];
    g.keep_sets[..keep_sets.len()].clone_from_slice(keep_sets);
    for layer in 0..g.layers() {
        let mut next = g.tokens[layer];
        for s in Stream::BOTH {
            let n = g.tokens[layer].get(s);
            let Some(keep) = g.keep_sets[layer].get(s) else {
                continue;
            };
            if keep.is_empty() {
                return Err(WorkloadError::Validation(format!(
                    "layer {layer} stream {s}: empty keep set"
                )));
            }
            if let Some(&bad) = keep.iter().find(|&&i| i >= n) {
                return Err(WorkloadError::Validation(format!(
                    "layer {layer} stream {s}: index {bad} out of range for {n} tokens"
                )));
            }
            if keep.windows(2).any(|w| w[0] >= w[1]) {
                return Err(WorkloadError::Validation(format!(
                    "layer {layer} stream {s}: keep set not strictly ascending"
                )));
            }
            match s {
                Stream::X => next.x = keep.len(),
                Stream::Y => next.y = keep.len(),
            }
        }
        g.tokens[layer + 1] = next;
    }
    g.rebuild();
    Ok(g)
}
