//! Symbolic dependency graph of one block, used to measure path lengths
//! between sequence positions.
//!
//! Every position `(s, k)` has an input node and an output node. Recurrent
//! layers add a chain of hidden-state nodes per direction; attentive layers
//! connect every position of a sequence to every other in one edge; low-dim
//! maps connect every `k` to every `q` of the same segment.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BlockKind, BlockVariant};

/// Asymptotic class of the longest shortest path between two positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MplClass {
    #[serde(rename = "O(K)")]
    K,
    #[serde(rename = "O(S+K)")]
    SPlusK,
}

impl fmt::Display for MplClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MplClass::K => "O(K)",
            MplClass::SPlusK => "O(S+K)",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    /// Input to a hidden state, hidden state to output, residual paths.
    Pointwise,
    /// Hidden state to the next hidden state.
    Recurrence,
    /// Query position to key position within one attention call.
    Attention,
    /// Dense map along the intra-segment axis.
    Affine,
}

#[derive(Debug, Clone, Default)]
pub struct DepGraph {
    edges: Vec<Vec<(usize, EdgeKind)>>,
}

impl DepGraph {
    pub fn node(&mut self) -> usize {
        self.edges.push(Vec::new());
        self.edges.len() - 1
    }

    fn nodes(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.node()).collect()
    }

    pub fn edge(&mut self, from: usize, to: usize, kind: EdgeKind) {
        self.edges[from].push((to, kind));
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Shortest distances from `src` where each edge costs `cost(kind)`, which
    /// must be 0 or 1 (0-1 BFS).
    pub fn distances(&self, src: usize, cost: impl Fn(EdgeKind) -> usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::new();
        dist[src] = Some(0);
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes are reached");
            for &(v, kind) in &self.edges[u] {
                let w = cost(kind);
                debug_assert!(w <= 1);
                if dist[v].is_none_or(|dv| du + w < dv) {
                    dist[v] = Some(du + w);
                    if w == 0 {
                        queue.push_front(v);
                    } else {
                        queue.push_back(v);
                    }
                }
            }
        }
        dist
    }
}

/// Dependency graph of one block over an `S × K` grid.
#[derive(Debug, Clone)]
pub struct BlockGraph {
    pub graph: DepGraph,
    pub segments: usize,
    pub seg_len: usize,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

impl BlockGraph {
    /// `q` is only used when the variant enables the low-dim map.
    pub fn build(variant: BlockVariant, segments: usize, seg_len: usize, q: usize) -> Self {
        let (s_n, k_n) = (segments, seg_len);
        let at = |s: usize, k: usize| s * k_n + k;
        let mut g = DepGraph::default();
        let inputs = g.nodes(s_n * k_n);
        let mid = g.nodes(s_n * k_n);
        let outputs = g.nodes(s_n * k_n);

        // local layer: sequences along k for each s
        let local_seqs: Vec<Vec<usize>> = (0..s_n)
            .map(|s| (0..k_n).map(|k| at(s, k)).collect())
            .collect();
        layer(&mut g, variant.local, &local_seqs, &inputs, &mid);

        let global_seqs: Vec<Vec<usize>> = (0..k_n)
            .map(|k| (0..s_n).map(|s| at(s, k)).collect())
            .collect();
        if variant.use_lowdim && variant.global == BlockKind::Attentive {
            let mapped = g.nodes(s_n * q);
            let attended = g.nodes(s_n * q);
            for s in 0..s_n {
                for k in 0..k_n {
                    for j in 0..q {
                        g.edge(mid[at(s, k)], mapped[s * q + j], EdgeKind::Affine);
                        g.edge(attended[s * q + j], outputs[at(s, k)], EdgeKind::Affine);
                    }
                }
            }
            let seqs: Vec<Vec<usize>> = (0..q)
                .map(|j| (0..s_n).map(|s| s * q + j).collect())
                .collect();
            layer(&mut g, BlockKind::Attentive, &seqs, &mapped, &attended);
            for i in 0..s_n * k_n {
                g.edge(mid[i], outputs[i], EdgeKind::Pointwise);
            }
        } else {
            layer(&mut g, variant.global, &global_seqs, &mid, &outputs);
        }
        BlockGraph {
            graph: g,
            segments,
            seg_len,
            inputs,
            outputs,
        }
    }

    pub fn input(&self, s: usize, k: usize) -> usize {
        self.inputs[s * self.seg_len + k]
    }

    pub fn output(&self, s: usize, k: usize) -> usize {
        self.outputs[s * self.seg_len + k]
    }

    /// Fewest edges from input `(s1, k1)` to output `(s2, k2)`.
    pub fn path_length(&self, from: (usize, usize), to: (usize, usize)) -> Option<usize> {
        self.graph.distances(self.input(from.0, from.1), |_| 1)[self.output(to.0, to.1)]
    }

    /// Fewest attention edges on any path from input `from` to output `to`.
    pub fn attention_hops(&self, from: (usize, usize), to: (usize, usize)) -> Option<usize> {
        self.graph.distances(self.input(from.0, from.1), |k| {
            usize::from(k == EdgeKind::Attention)
        })[self.output(to.0, to.1)]
    }

    /// Longest shortest path over all input/output position pairs.
    pub fn max_path_length(&self) -> usize {
        let mut worst = 0;
        for &src in &self.inputs {
            let d = self.graph.distances(src, |_| 1);
            for &dst in &self.outputs {
                worst = worst.max(d[dst].expect("every output depends on every input"));
            }
        }
        worst
    }
}

/// Wires `inputs[seq[t]] -> outputs[seq[t]]` through a layer of `kind` for each sequence.
fn layer(
    g: &mut DepGraph,
    kind: BlockKind,
    seqs: &[Vec<usize>],
    inputs: &[usize],
    outputs: &[usize],
) {
    for seq in seqs {
        for &p in seq {
            g.edge(inputs[p], outputs[p], EdgeKind::Pointwise);
        }
        match kind {
            BlockKind::Recurrent => {
                for reverse in [false, true] {
                    let hidden = g.nodes(seq.len());
                    for (t, &p) in seq.iter().enumerate() {
                        g.edge(inputs[p], hidden[t], EdgeKind::Pointwise);
                        g.edge(hidden[t], outputs[p], EdgeKind::Pointwise);
                        if t + 1 < seq.len() {
                            let (a, b) = if reverse { (t + 1, t) } else { (t, t + 1) };
                            g.edge(hidden[a], hidden[b], EdgeKind::Recurrence);
                        }
                    }
                }
            }
            BlockKind::Attentive => {
                for &src in seq {
                    for &dst in seq {
                        g.edge(inputs[src], outputs[dst], EdgeKind::Attention);
                    }
                }
            }
        }
    }
}

/// Classifies how the longest path grows: measured on two grids that vary S
/// with K fixed.
pub fn classify(variant: BlockVariant) -> MplClass {
    let (k, q) = (4, 2);
    let a = BlockGraph::build(variant, 4, k, q).max_path_length();
    let b = BlockGraph::build(variant, 12, k, q).max_path_length();
    if b > a {
        MplClass::SPlusK
    } else {
        MplClass::K
    }
}
