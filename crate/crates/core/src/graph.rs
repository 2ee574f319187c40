//! Token-level routing graphs induced by attention.
//!
//! Nodes are (node_layer, position) with node layers 0..=L for L attention
//! layers. An attention edge (l, i) -> (l, j) exists when some head gives
//! weight above epsilon to j from row i at layer l. Residual lifts
//! (l, i) -> (l + 1, i) are always present and never materialized: content a
//! row has read becomes available to later layers through the residual
//! stream, so multi-layer routes alternate attention edges and lifts.
//!
//! Compression keeps an edge label h only while the target stays cached for
//! h's KV group; a row whose group lost its whole causal prefix collapses to
//! a weight-1 self-loop, which therefore survives any epsilon below 1.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::attention::AttentionTensor;
use crate::mask::SurvivalMask;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("epsilon must be finite and >= 0, got {0}")]
    BadEpsilon(f64),
    #[error("query position {q} out of range for seq_len {seq}")]
    QueryOutOfRange { q: usize, seq: usize },
    #[error("query layer {layer} exceeds top node layer {max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("answer set is empty")]
    EmptyAnswerSet,
    #[error("answer position {t} out of range for seq_len {seq}")]
    AnswerOutOfRange { t: usize, seq: usize },
    #[error("mask kv_heads {kv_heads} incompatible with graph head labels {heads}")]
    GroupMismatch { heads: usize, kv_heads: usize },
    #[error("mask covers {mask_layers} layers / seq {mask_seq}, graph has {layers} / {seq}")]
    MaskShape {
        mask_layers: usize,
        mask_seq: usize,
        layers: usize,
        seq: usize,
    },
    #[error("no route from query {q} to any answer position")]
    NoRoute { q: usize },
    #[error("head-disjoint path count is unbounded when query equals target")]
    DegenerateFlowQuery,
}

/// Minimum hop distances of every position reachable from one query.
/// Hops count attention edges; residual lifts are free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilitySet {
    hops: BTreeMap<usize, usize>,
}

impl ReachabilitySet {
    pub fn contains(&self, pos: usize) -> bool {
        self.hops.contains_key(&pos)
    }

    pub fn hop_count(&self, pos: usize) -> Option<usize> {
        self.hops.get(&pos).copied()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.hops.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }
}

/// Attention routing graph at one compression level.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRouteGraph {
    /// edges[l] maps (i, j) to the sorted head labels carrying that edge.
    edges: Vec<BTreeMap<(usize, usize), Vec<usize>>>,
    seq_len: usize,
    heads: usize,
    causal: bool,
    epsilon: f64,
}

fn check_epsilon(epsilon: f64) -> Result<(), GraphError> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(GraphError::BadEpsilon(epsilon));
    }
    Ok(())
}

/// Edges wherever any head exceeds `epsilon`: an O(L * H * S^2) scan.
pub fn build_graph(attn: &AttentionTensor, epsilon: f64) -> Result<TokenRouteGraph, GraphError> {
    check_epsilon(epsilon)?;
    let s = attn.seq_len();
    let mut edges = Vec::with_capacity(attn.layers());
    for l in 0..attn.layers() {
        let mut layer: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for h in 0..attn.heads() {
            for i in 0..s {
                for (j, &w) in attn.row(l, h, i).iter().enumerate() {
                    if w > epsilon {
                        layer.entry((i, j)).or_default().push(h);
                    }
                }
            }
        }
        for labels in layer.values_mut() {
            labels.sort_unstable();
            labels.dedup();
        }
        edges.push(layer);
    }
    Ok(TokenRouteGraph {
        edges,
        seq_len: s,
        heads: attn.heads(),
        causal: attn.causal(),
        epsilon,
    })
}

impl TokenRouteGraph {
    pub fn attention_layers(&self) -> usize {
        self.edges.len()
    }

    /// Node layers run 0..=attention_layers().
    pub fn node_layers(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(|l| l.len()).sum()
    }

    pub fn edge_labels(&self, layer: usize, i: usize, j: usize) -> Option<&[usize]> {
        self.edges[layer].get(&(i, j)).map(|v| v.as_slice())
    }

    pub fn layer_edges(
        &self,
        layer: usize,
    ) -> impl Iterator<Item = (usize, usize, &[usize])> + '_ {
        self.edges[layer]
            .iter()
            .map(|(&(i, j), labels)| (i, j, labels.as_slice()))
    }

    /// Hand-built graph for synthetic routing instances. Edges are given as
    /// (layer, i, j, head labels); labels are deduplicated and sorted.
    pub fn from_edges(
        attention_layers: usize,
        seq_len: usize,
        heads: usize,
        causal: bool,
        epsilon: f64,
        edge_list: &[(usize, usize, usize, Vec<usize>)],
    ) -> Result<Self, GraphError> {
        check_epsilon(epsilon)?;
        let mut edges: Vec<BTreeMap<(usize, usize), Vec<usize>>> =
            vec![BTreeMap::new(); attention_layers];
        for (layer, i, j, labels) in edge_list {
            if *layer >= attention_layers {
                return Err(GraphError::LayerOutOfRange {
                    layer: *layer,
                    max: attention_layers,
                });
            }
            if *i >= seq_len || *j >= seq_len {
                return Err(GraphError::QueryOutOfRange {
                    q: (*i).max(*j),
                    seq: seq_len,
                });
            }
            let entry = edges[*layer].entry((*i, *j)).or_default();
            entry.extend(labels.iter().copied().filter(|&h| h < heads));
            entry.sort_unstable();
            entry.dedup();
        }
        Ok(TokenRouteGraph {
            edges,
            seq_len,
            heads,
            causal,
            epsilon,
        })
    }

    /// Surviving routes under `mask`: label h stays on (i, j) only while j
    /// is cached for h's KV group; rows whose group kept nothing in the
    /// causal prefix gain a weight-1 self-loop for the affected heads.
    /// Equivalent to rebuilding the graph from masked, unrenormalized
    /// attention with the forward pass's self-fallback applied.
    pub fn compress(&self, mask: &SurvivalMask) -> Result<TokenRouteGraph, GraphError> {
        let kv = mask.kv_heads();
        if kv == 0 || self.heads % kv != 0 {
            return Err(GraphError::GroupMismatch {
                heads: self.heads,
                kv_heads: kv,
            });
        }
        if mask.num_layers() != self.attention_layers() || mask.seq_len != self.seq_len {
            return Err(GraphError::MaskShape {
                mask_layers: mask.num_layers(),
                mask_seq: mask.seq_len,
                layers: self.attention_layers(),
                seq: self.seq_len,
            });
        }
        let group = self.heads / kv;
        let mut edges = Vec::with_capacity(self.edges.len());
        for (l, layer) in self.edges.iter().enumerate() {
            let mut out: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
            for (&(i, j), labels) in layer {
                let kept: Vec<usize> = labels
                    .iter()
                    .copied()
                    .filter(|&h| mask.survives(l, h / group, j))
                    .collect();
                if !kept.is_empty() {
                    out.insert((i, j), kept);
                }
            }
            // Fallback self-loops carry weight exactly 1.
            if self.epsilon < 1.0 {
                for i in 0..self.seq_len {
                    let limit = if self.causal { i + 1 } else { self.seq_len };
                    for k in 0..kv {
                        let emptied = !mask.survivors(l, k).iter().any(|&j| j < limit);
                        if emptied {
                            let entry = out.entry((i, i)).or_default();
                            entry.extend((k * group)..((k + 1) * group));
                            entry.sort_unstable();
                            entry.dedup();
                        }
                    }
                }
            }
            edges.push(out);
        }
        Ok(TokenRouteGraph {
            edges,
            seq_len: self.seq_len,
            heads: self.heads,
            causal: self.causal,
            epsilon: self.epsilon,
        })
    }

    /// Positions reachable from (q_layer, q) through attention edges and
    /// residual lifts, with minimum attention-hop counts (lifts are free).
    pub fn reachable(&self, q: usize, q_layer: usize) -> Result<ReachabilitySet, GraphError> {
        if q >= self.seq_len {
            return Err(GraphError::QueryOutOfRange {
                q,
                seq: self.seq_len,
            });
        }
        if q_layer >= self.node_layers() {
            return Err(GraphError::LayerOutOfRange {
                layer: q_layer,
                max: self.node_layers() - 1,
            });
        }
        let layers = self.node_layers();
        let mut dist = vec![vec![usize::MAX; self.seq_len]; layers];
        let mut deque = VecDeque::new();
        dist[q_layer][q] = 0;
        deque.push_back((q_layer, q));
        while let Some((l, i)) = deque.pop_front() {
            let d = dist[l][i];
            // Residual lift, zero cost.
            if l + 1 < layers && d < dist[l + 1][i] {
                dist[l + 1][i] = d;
                deque.push_front((l + 1, i));
            }
            if l < self.attention_layers() {
                for (&(src, j), _) in self.edges[l].range((i, 0)..=(i, usize::MAX)) {
                    debug_assert_eq!(src, i);
                    if d + 1 < dist[l][j] {
                        dist[l][j] = d + 1;
                        deque.push_back((l, j));
                    }
                }
            }
        }
        let mut hops = BTreeMap::new();
        for l in 0..layers {
            for i in 0..self.seq_len {
                if dist[l][i] != usize::MAX {
                    let entry = hops.entry(i).or_insert(usize::MAX);
                    *entry = (*entry).min(dist[l][i]);
                }
            }
        }
        Ok(ReachabilitySet { hops })
    }

    /// True when any answer position is reachable from the query entering at
    /// node layer 0.
    pub fn answer_reachable(&self, q: usize, t_ans: &[usize]) -> Result<bool, GraphError> {
        if t_ans.is_empty() {
            return Err(GraphError::EmptyAnswerSet);
        }
        for &t in t_ans {
            if t >= self.seq_len {
                return Err(GraphError::AnswerOutOfRange {
                    t,
                    seq: self.seq_len,
                });
            }
        }
        let r = self.reachable(q, 0)?;
        Ok(t_ans.iter().any(|&t| r.contains(t)))
    }

    /// Maximum number of q -> t paths sharing no (edge, head label) pair:
    /// max-flow where each attention edge carries one capacity unit per head
    /// label and residual lifts are uncapacitated.
    pub fn head_disjoint_paths(&self, q: usize, t: usize) -> Result<usize, GraphError> {
        if q >= self.seq_len {
            return Err(GraphError::QueryOutOfRange {
                q,
                seq: self.seq_len,
            });
        }
        if t >= self.seq_len {
            return Err(GraphError::AnswerOutOfRange {
                t,
                seq: self.seq_len,
            });
        }
        if q == t {
            return Err(GraphError::DegenerateFlowQuery);
        }
        let layers = self.node_layers();
        let node = |l: usize, i: usize| l * self.seq_len + i;
        let sink = layers * self.seq_len;
        let total_labels: usize = self
            .edges
            .iter()
            .flat_map(|l| l.values())
            .map(|labels| labels.len())
            .sum();
        let inf = (total_labels + 1) as i64;
        let mut flow = MaxFlow::new(sink + 1);
        for l in 0..layers {
            for i in 0..self.seq_len {
                if l + 1 < layers {
                    flow.add_edge(node(l, i), node(l + 1, i), inf);
                }
            }
            if l < self.attention_layers() {
                for (&(i, j), labels) in &self.edges[l] {
                    flow.add_edge(node(l, i), node(l, j), labels.len() as i64);
                }
            }
        }
        for l in 0..layers {
            flow.add_edge(node(l, t), sink, inf);
        }
        Ok(flow.run(node(0, q), sink) as usize)
    }

    /// Minimal routing backbone: the attention edges of one shortest
    /// (fewest attention hops) path from the query to the nearest answer
    /// position, returned as a subgraph. Deterministic tie-breaks: nodes
    /// settle in (hops, layer, position) order and earlier-settled parents
    /// win.
    pub fn extract_ticket(&self, q: usize, t_ans: &[usize]) -> Result<TokenRouteGraph, GraphError> {
        if t_ans.is_empty() {
            return Err(GraphError::EmptyAnswerSet);
        }
        for &t in t_ans {
            if t >= self.seq_len {
                return Err(GraphError::AnswerOutOfRange {
                    t,
                    seq: self.seq_len,
                });
            }
        }
        if q >= self.seq_len {
            return Err(GraphError::QueryOutOfRange {
                q,
                seq: self.seq_len,
            });
        }
        let layers = self.node_layers();
        let s = self.seq_len;
        let idx = |l: usize, i: usize| l * s + i;
        let mut dist = vec![usize::MAX; layers * s];
        // parent: (layer, pos, is_attention_edge)
        let mut parent: Vec<Option<(usize, usize, bool)>> = vec![None; layers * s];
        let mut heap = std::collections::BinaryHeap::new();
        dist[idx(0, q)] = 0;
        heap.push(std::cmp::Reverse((0usize, 0usize, q)));
        while let Some(std::cmp::Reverse((d, l, i))) = heap.pop() {
            if d > dist[idx(l, i)] {
                continue;
            }
            if l + 1 < layers && d < dist[idx(l + 1, i)] {
                dist[idx(l + 1, i)] = d;
                parent[idx(l + 1, i)] = Some((l, i, false));
                heap.push(std::cmp::Reverse((d, l + 1, i)));
            }
            if l < self.attention_layers() {
                for (&(src, j), _) in self.edges[l].range((i, 0)..=(i, usize::MAX)) {
                    debug_assert_eq!(src, i);
                    if d + 1 < dist[idx(l, j)] {
                        dist[idx(l, j)] = d + 1;
                        parent[idx(l, j)] = Some((l, i, true));
                        heap.push(std::cmp::Reverse((d + 1, l, j)));
                    }
                }
            }
        }
        // Nearest answer node: smallest (hops, layer, position).
        let mut best: Option<(usize, usize, usize)> = None;
        for l in 0..layers {
            for &t in t_ans {
                let d = dist[idx(l, t)];
                if d != usize::MAX {
                    let cand = (d, l, t);
                    if best.map_or(true, |b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
        }
        let (_, mut cl, mut ci) = best.ok_or(GraphError::NoRoute { q })?;
        let mut kept: Vec<(usize, usize, usize, Vec<usize>)> = Vec::new();
        while let Some((pl, pi, attn)) = parent[idx(cl, ci)] {
            if attn {
                let labels = self.edges[pl]
                    .get(&(pi, ci))
                    .expect("parent edge exists")
                    .clone();
                kept.push((pl, pi, ci, labels));
            }
            cl = pl;
            ci = pi;
        }
        TokenRouteGraph::from_edges(
            self.attention_layers(),
            s,
            self.heads,
            self.causal,
            self.epsilon,
            &kept,
        )
    }

    /// Edge-list text: one line `layer i j h1 h2 ...` per edge, sorted by
    /// (layer, i, j).
    pub fn to_edge_list_text(&self) -> String {
        let mut out = String::new();
        for (l, layer) in self.edges.iter().enumerate() {
            for (&(i, j), labels) in layer {
                let _ = write!(out, "{l} {i} {j}");
                for h in labels {
                    let _ = write!(out, " {h}");
                }
                out.push('\n');
            }
        }
        out
    }
}

struct MaxFlow {
    // to, cap, rev-index
    adj: Vec<Vec<(usize, i64, usize)>>,
}

impl MaxFlow {
    fn new(n: usize) -> Self {
        MaxFlow {
            adj: vec![Vec::new(); n],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: i64) {
        let rev_from = self.adj[to].len();
        let rev_to = self.adj[from].len();
        self.adj[from].push((to, cap, rev_from));
        self.adj[to].push((from, 0, rev_to));
    }

    /// Edmonds-Karp: repeated BFS augmentation.
    fn run(&mut self, source: usize, sink: usize) -> i64 {
        let mut total = 0;
        loop {
            let mut pred: Vec<Option<(usize, usize)>> = vec![None; self.adj.len()];
            let mut queue = VecDeque::from([source]);
            'bfs: while let Some(u) = queue.pop_front() {
                for (e, &(v, cap, _)) in self.adj[u].iter().enumerate() {
                    if cap > 0 && pred[v].is_none() && v != source {
                        pred[v] = Some((u, e));
                        if v == sink {
                            break 'bfs;
                        }
                        queue.push_back(v);
                    }
                }
            }
            if pred[sink].is_none() {
                return total;
            }
            let mut bottleneck = i64::MAX;
            let mut v = sink;
            while let Some((u, e)) = pred[v] {
                bottleneck = bottleneck.min(self.adj[u][e].1);
                v = u;
            }
            let mut v = sink;
            while let Some((u, e)) = pred[v] {
                self.adj[u][e].1 -= bottleneck;
                let rev = self.adj[u][e].2;
                self.adj[v][rev].1 += bottleneck;
                v = u;
            }
            total += bottleneck;
        }
    }
}
