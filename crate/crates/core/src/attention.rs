//! Seeded toy attention stack and the row-stochastic tensors it emits.
//!
//! The model is a measurement instrument, not a language model: random
//! near-orthogonal projections, hash embeddings, causal softmax attention
//! with grouped KV heads, residual stream, no training loop. Two knobs per
//! layer shape the routing statistics: `temperature` controls attention
//! entropy and `head_coupling` blends a shared logit pattern into every head
//! so cross-head consensus can be dialed from independent to unanimous.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::mask::SurvivalMask;
use crate::tol;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("tensor must have at least one layer, one head and one position")]
    Empty,
    #[error("ragged tensor shape at layer {layer}")]
    Ragged { layer: usize },
    #[error("layer {layer} head {head} row {row} sums to {sum} (tolerance {tol})")]
    RowNotStochastic {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
        tol: f64,
    },
    #[error("causal tensor has weight above the diagonal at layer {layer} head {head} ({row},{col})")]
    CausalViolation {
        layer: usize,
        head: usize,
        row: usize,
        col: usize,
    },
    #[error("kv_heads {kv_heads} must divide head count {heads}")]
    KvGrouping { heads: usize, kv_heads: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum ForwardError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("sequence length {seq} exceeds max_seq {max}")]
    SeqTooLong { seq: usize, max: usize },
    #[error("mask shape ({layers} layers, {kv_heads} kv heads, seq_len {seq_len}) does not match model/run ({want_layers}, {want_kv}, {want_seq})")]
    MaskShape {
        layers: usize,
        kv_heads: usize,
        seq_len: usize,
        want_layers: usize,
        want_kv: usize,
        want_seq: usize,
    },
    #[error("embedding override at position {pos} out of range for sequence of {seq}")]
    OverridePosition { pos: usize, seq: usize },
    #[error("embedding override at position {pos} has dim {got}, model dim is {want}")]
    OverrideShape { pos: usize, got: usize, want: usize },
}

/// Per-layer, per-attention-head row-stochastic matrices.
///
/// `kv_heads` records the grouping the matrices were produced under: head
/// `h` reads the KV cache of group `h / (heads / kv_heads)`. Tensors loaded
/// from dumps carry `kv_heads == heads` because the dump format stores no
/// grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    /// weights[layer][head] is row-major S x S.
    weights: Vec<Vec<Vec<f64>>>,
    seq_len: usize,
    causal: bool,
    kv_heads: usize,
}

impl AttentionTensor {
    /// Validates shape, row-stochasticity within `row_tol`, causal zeros and
    /// head grouping.
    pub fn from_rows(
        weights: Vec<Vec<Vec<f64>>>,
        seq_len: usize,
        causal: bool,
        kv_heads: usize,
        row_tol: f64,
    ) -> Result<Self, TensorError> {
        if weights.is_empty() || weights[0].is_empty() || seq_len == 0 {
            return Err(TensorError::Empty);
        }
        let heads = weights[0].len();
        if kv_heads == 0 || heads % kv_heads != 0 {
            return Err(TensorError::KvGrouping { heads, kv_heads });
        }
        for (layer, per_head) in weights.iter().enumerate() {
            if per_head.len() != heads {
                return Err(TensorError::Ragged { layer });
            }
            for (head, m) in per_head.iter().enumerate() {
                if m.len() != seq_len * seq_len {
                    return Err(TensorError::Ragged { layer });
                }
                for row in 0..seq_len {
                    let r = &m[row * seq_len..(row + 1) * seq_len];
                    let sum: f64 = r.iter().sum();
                    if (sum - 1.0).abs() > row_tol {
                        return Err(TensorError::RowNotStochastic {
                            layer,
                            head,
                            row,
                            sum,
                            tol: row_tol,
                        });
                    }
                    if causal {
                        for (col, &w) in r.iter().enumerate().skip(row + 1) {
                            if w != 0.0 {
                                return Err(TensorError::CausalViolation {
                                    layer,
                                    head,
                                    row,
                                    col,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(AttentionTensor {
            weights,
            seq_len,
            causal,
            kv_heads,
        })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn heads(&self) -> usize {
        self.weights[0].len()
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn group_size(&self) -> usize {
        self.heads() / self.kv_heads
    }

    /// KV group of attention head `head`.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn weight(&self, layer: usize, head: usize, row: usize, col: usize) -> f64 {
        self.weights[layer][head][row * self.seq_len + col]
    }

    pub fn row(&self, layer: usize, head: usize, row: usize) -> &[f64] {
        &self.weights[layer][head][row * self.seq_len..(row + 1) * self.seq_len]
    }

    /// Argmax token of a row; ties resolve to the lowest position.
    pub fn top_token(&self, layer: usize, head: usize, row: usize) -> usize {
        let r = self.row(layer, head, row);
        let mut best = 0usize;
        for (j, &w) in r.iter().enumerate() {
            if w > r[best] {
                best = j;
            }
        }
        best
    }

    /// Attention actually used under `mask`: per row, weights restricted to
    /// the surviving causal prefix and renormalized; a row left with nothing
    /// collapses onto itself with weight 1. Mathematically identical to
    /// rerunning the softmax over the surviving logits.
    pub fn masked_renormalized(&self, mask: &SurvivalMask) -> Result<AttentionTensor, TensorError> {
        let heads = self.heads();
        let kv_heads = mask.kv_heads();
        if kv_heads == 0 || heads % kv_heads != 0 || mask.num_layers() != self.layers() {
            return Err(TensorError::KvGrouping { heads, kv_heads });
        }
        let group = heads / kv_heads;
        let s = self.seq_len;
        let mut out = Vec::with_capacity(self.layers());
        for (layer, per_head) in self.weights.iter().enumerate() {
            let mut layer_out = Vec::with_capacity(heads);
            for (head, m) in per_head.iter().enumerate() {
                let survivors = mask.survivors(layer, head / group);
                let mut nm = vec![0.0; s * s];
                for row in 0..s {
                    let limit = if self.causal { row + 1 } else { s };
                    let kept: Vec<usize> =
                        survivors.iter().copied().filter(|&j| j < limit).collect();
                    if kept.is_empty() {
                        nm[row * s + row] = 1.0;
                        continue;
                    }
                    let total: f64 = kept.iter().map(|&j| m[row * s + j]).sum();
                    if total <= 0.0 {
                        nm[row * s + row] = 1.0;
                        continue;
                    }
                    for &j in &kept {
                        nm[row * s + j] = m[row * s + j] / total;
                    }
                }
                layer_out.push(nm);
            }
            out.push(layer_out);
        }
        AttentionTensor::from_rows(out, s, self.causal, self.kv_heads, tol::ROW_SUM_EXACT)
    }
}

/// Residual-stream snapshots from a forward pass: `levels[0]` holds the
/// embeddings, `levels[l + 1]` the stream after layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    levels: Vec<Vec<Vec<f64>>>,
    pooled: Vec<Vec<f64>>,
}

impl HiddenStates {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn seq_len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn dim(&self) -> usize {
        self.levels[0][0].len()
    }

    pub fn level(&self, level: usize) -> &[Vec<f64>] {
        &self.levels[level]
    }

    pub fn final_level(&self) -> &[Vec<f64>] {
        self.levels.last().expect("at least the embedding level")
    }

    /// Mean over all levels at one position.
    pub fn pooled(&self, pos: usize) -> &[f64] {
        &self.pooled[pos]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub attention: AttentionTensor,
    pub hidden: HiddenStates,
}

/// Entropy/consensus schedule of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerKnobs {
    /// Softmax temperature; lower is sharper.
    pub temperature: f64,
    /// Weight in [0,1] on the layer-shared logit pattern; 1 makes all heads
    /// of the layer identical.
    pub head_coupling: f64,
}

impl Default for LayerKnobs {
    fn default() -> Self {
        LayerKnobs {
            temperature: 1.0,
            head_coupling: 0.0,
        }
    }
}

/// Cross-head agreement schedules over depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusProfile {
    /// Heads stay independent at every layer.
    Flat,
    /// Broad early diversity narrowing to near-unanimity at the top.
    Funnel,
    /// Unanimous early layers fanning out to independent heads.
    InvertedFunnel,
}

impl ConsensusProfile {
    pub fn knobs(&self, num_layers: usize) -> Vec<LayerKnobs> {
        let ramp = |l: usize| {
            if num_layers <= 1 {
                1.0
            } else {
                l as f64 / (num_layers - 1) as f64
            }
        };
        (0..num_layers)
            .map(|l| {
                let coupling = match self {
                    ConsensusProfile::Flat => 0.0,
                    ConsensusProfile::Funnel => 0.05 + 0.9 * ramp(l),
                    ConsensusProfile::InvertedFunnel => 0.95 - 0.9 * ramp(l),
                };
                LayerKnobs {
                    temperature: 0.5,
                    head_coupling: coupling,
                }
            })
            .collect()
    }
}

struct Proj {
    rows: usize,
    cols: usize,
    a: Vec<f64>,
}

impl Proj {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &self.a[r * self.cols..(r + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xv * w;
            }
        }
        out
    }
}

/// Frozen random attention stack. Immutable after construction; forward
/// passes borrow it concurrently.
pub struct ToyModel {
    cfg: ModelConfig,
    knobs: Vec<LayerKnobs>,
    wq: Vec<Vec<Proj>>,
    wk: Vec<Vec<Proj>>,
    wv: Vec<Vec<Proj>>,
    wq_shared: Vec<Proj>,
    wk_shared: Vec<Proj>,
}

pub(crate) fn derived_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha20Rng {
    // FNV-1a over the tag keeps weight streams for different roles disjoint.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mixed = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h)
        .wrapping_add(a.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(b.wrapping_mul(0x94d0_49bb_1331_11eb));
    ChaCha20Rng::seed_from_u64(mixed)
}

pub(crate) fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller; the 1 - u shift keeps the log argument strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_proj(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Proj {
    let scale = 1.0 / (rows as f64).sqrt();
    let a = (0..rows * cols)
        .map(|_| standard_normal(rng) * scale)
        .collect();
    Proj { rows, cols, a }
}

impl ToyModel {
    pub fn build(cfg: &ModelConfig) -> Result<Self, ConfigError> {
        Self::with_knobs(cfg, vec![LayerKnobs::default(); cfg.num_layers])
    }

    pub fn with_profile(cfg: &ModelConfig, profile: ConsensusProfile) -> Result<Self, ConfigError> {
        Self::with_knobs(cfg, profile.knobs(cfg.num_layers))
    }

    pub fn with_knobs(cfg: &ModelConfig, knobs: Vec<LayerKnobs>) -> Result<Self, ConfigError> {
        cfg.validate()?;
        assert_eq!(knobs.len(), cfg.num_layers, "one knob set per layer");
        let d = cfg.model_dim();
        let dh = cfg.head_dim;
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        let mut wq_shared = Vec::new();
        let mut wk_shared = Vec::new();
        for l in 0..cfg.num_layers {
            wq.push(
                (0..cfg.num_query_heads)
                    .map(|h| {
                        random_proj(&mut derived_rng(cfg.seed, "wq", l as u64, h as u64), d, dh)
                    })
                    .collect(),
            );
            wk.push(
                (0..cfg.num_kv_heads)
                    .map(|k| {
                        random_proj(&mut derived_rng(cfg.seed, "wk", l as u64, k as u64), d, dh)
                    })
                    .collect(),
            );
            wv.push(
                (0..cfg.num_kv_heads)
                    .map(|k| {
                        random_proj(&mut derived_rng(cfg.seed, "wv", l as u64, k as u64), d, dh)
                    })
                    .collect(),
            );
            wq_shared.push(random_proj(
                &mut derived_rng(cfg.seed, "wq-shared", l as u64, 0),
                d,
                dh,
            ));
            wk_shared.push(random_proj(
                &mut derived_rng(cfg.seed, "wk-shared", l as u64, 0),
                d,
                dh,
            ));
        }
        Ok(ToyModel {
            cfg: cfg.clone(),
            knobs,
            wq,
            wk,
            wv,
            wq_shared,
            wk_shared,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Deterministic hash embedding of one token id; identical ids map to
    /// identical vectors regardless of position.
    pub fn embed(&self, token: u32) -> Vec<f64> {
        let d = self.cfg.model_dim();
        let mut rng = derived_rng(self.cfg.seed, "embed", token as u64, 0);
        let scale = 1.0 / (d as f64).sqrt();
        (0..d).map(|_| standard_normal(&mut rng) * scale).collect()
    }

    /// Candidate position whose token embedding is closest (squared L2) to
    /// the target token's. A candidate holding the target token itself is
    /// at distance zero and always wins; ties resolve to the lowest
    /// position. None when no candidate is in range.
    pub fn nearest_token(&self, target: u32, tokens: &[u32], candidates: &[usize]) -> Option<usize> {
        let e = self.embed(target);
        let mut best: Option<(f64, usize)> = None;
        for &c in candidates {
            if c >= tokens.len() {
                continue;
            }
            let f = self.embed(tokens[c]);
            let d: f64 = e.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
            match best {
                Some((bd, bc)) if d > bd || (d == bd && c >= bc) => {}
                _ => best = Some((d, c)),
            }
        }
        best.map(|(_, c)| c)
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        mask: Option<&SurvivalMask>,
    ) -> Result<ForwardOutput, ForwardError> {
        self.forward_with_overrides(tokens, mask, &BTreeMap::new())
    }

    /// Forward pass with selected token embeddings replaced, the hook used to
    /// show that pruned content cannot move a query's hidden state.
    pub fn forward_with_overrides(
        &self,
        tokens: &[u32],
        mask: Option<&SurvivalMask>,
        overrides: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<ForwardOutput, ForwardError> {
        let s = tokens.len();
        if let Some(m) = mask {
            if m.num_layers() != self.cfg.num_layers
                || m.kv_heads() != self.cfg.num_kv_heads
                || m.seq_len != s
            {
                return Err(ForwardError::MaskShape {
                    layers: m.num_layers(),
                    kv_heads: m.kv_heads(),
                    seq_len: m.seq_len,
                    want_layers: self.cfg.num_layers,
                    want_kv: self.cfg.num_kv_heads,
                    want_seq: s,
                });
            }
        }
        let group = self.cfg.group_size();
        let attend = move |l: usize, h: usize, i: usize| -> Vec<usize> {
            match mask {
                Some(m) => m
                    .survivors(l, h / group)
                    .iter()
                    .copied()
                    .filter(|&j| j <= i)
                    .collect(),
                None => (0..=i).collect(),
            }
        };
        self.forward_routed(tokens, &attend, overrides)
    }

    /// Forward pass with an arbitrary per-(layer, head, row) attendable-column
    /// policy. Columns beyond the causal prefix are dropped; a row left with
    /// no columns reads itself with weight 1.
    pub fn forward_routed(
        &self,
        tokens: &[u32],
        attend: &dyn Fn(usize, usize, usize) -> Vec<usize>,
        overrides: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<ForwardOutput, ForwardError> {
        let s = tokens.len();
        if s == 0 {
            return Err(ForwardError::EmptySequence);
        }
        if s > self.cfg.max_seq {
            return Err(ForwardError::SeqTooLong {
                seq: s,
                max: self.cfg.max_seq,
            });
        }
        let d = self.cfg.model_dim();
        for (&pos, v) in overrides {
            if pos >= s {
                return Err(ForwardError::OverridePosition { pos, seq: s });
            }
            if v.len() != d {
                return Err(ForwardError::OverrideShape {
                    pos,
                    got: v.len(),
                    want: d,
                });
            }
        }

        let dh = self.cfg.head_dim;
        let hq = self.cfg.num_query_heads;
        let group = self.cfg.group_size();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut stream: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| overrides.get(&i).cloned().unwrap_or_else(|| self.embed(t)))
            .collect();
        let mut levels = vec![stream.clone()];
        let mut attn_weights: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.cfg.num_layers);

        for l in 0..self.cfg.num_layers {
            let knobs = self.knobs[l];
            let keys: Vec<Vec<Vec<f64>>> = (0..self.cfg.num_kv_heads)
                .map(|k| stream.iter().map(|x| self.wk[l][k].apply(x)).collect())
                .collect();
            let values: Vec<Vec<Vec<f64>>> = (0..self.cfg.num_kv_heads)
                .map(|k| stream.iter().map(|x| self.wv[l][k].apply(x)).collect())
                .collect();
            let shared_q: Vec<Vec<f64>> =
                stream.iter().map(|x| self.wq_shared[l].apply(x)).collect();
            let shared_k: Vec<Vec<f64>> =
                stream.iter().map(|x| self.wk_shared[l].apply(x)).collect();

            let mut layer_attn: Vec<Vec<f64>> = vec![vec![0.0; s * s]; hq];
            let mut next: Vec<Vec<f64>> = stream.clone();

            for h in 0..hq {
                let k = h / group;
                let queries: Vec<Vec<f64>> =
                    stream.iter().map(|x| self.wq[l][h].apply(x)).collect();
                for i in 0..s {
                    let mut attendable: Vec<usize> = attend(l, h, i);
                    attendable.retain(|&j| j <= i);
                    attendable.sort_unstable();
                    attendable.dedup();
                    let row = &mut layer_attn[h][i * s..(i + 1) * s];
                    if attendable.is_empty() {
                        row[i] = 1.0;
                        let slot = &mut next[i][h * dh..(h + 1) * dh];
                        for (dst, src) in slot.iter_mut().zip(&values[k][i]) {
                            *dst += *src;
                        }
                        continue;
                    }
                    let mut logits = Vec::with_capacity(attendable.len());
                    for &j in &attendable {
                        let private: f64 = queries[i]
                            .iter()
                            .zip(&keys[k][j])
                            .map(|(a, b)| a * b)
                            .sum();
                        let shared: f64 = shared_q[i]
                            .iter()
                            .zip(&shared_k[j])
                            .map(|(a, b)| a * b)
                            .sum();
                        let z = ((1.0 - knobs.head_coupling) * private
                            + knobs.head_coupling * shared)
                            * inv_sqrt
                            / knobs.temperature;
                        logits.push(z);
                    }
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    let slot = &mut next[i][h * dh..(h + 1) * dh];
                    for (&j, &e) in attendable.iter().zip(&exps) {
                        let w = e / denom;
                        row[j] = w;
                        for (dst, src) in slot.iter_mut().zip(&values[k][j]) {
                            *dst += w * src;
                        }
                    }
                }
            }
            attn_weights.push(layer_attn);
            stream = next;
            levels.push(stream.clone());
        }

        let pooled: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                let mut acc = vec![0.0; d];
                for level in &levels {
                    for (a, v) in acc.iter_mut().zip(&level[i]) {
                        *a += v;
                    }
                }
                let n = levels.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            })
            .collect();

        let attention = AttentionTensor::from_rows(
            attn_weights,
            s,
            true,
            self.cfg.num_kv_heads,
            tol::ROW_SUM_EXACT,
        )
        .expect("forward emits row-stochastic causal attention");
        Ok(ForwardOutput {
            attention,
            hidden: HiddenStates { levels, pooled },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{PressKind, Regime};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            max_seq: 64,
            bytes_per_element: 2,
            seed: 7,
        }
    }

    fn tokens(n: usize) -> Vec<u32> {
        (0..n as u32).map(|t| t * 31 + 5).collect()
    }

    #[test]
    fn rows_are_stochastic_and_causal() {
        let model = ToyModel::build(&small_cfg()).unwrap();
        let out = model.forward(&tokens(12), None).unwrap();
        let a = &out.attention;
        for l in 0..a.layers() {
            for h in 0..a.heads() {
                for i in 0..a.seq_len() {
                    let row = a.row(l, h, i);
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= tol::ROW_SUM_EXACT);
                    for (j, &w) in row.iter().enumerate() {
                        assert!(w >= 0.0);
                        if j > i {
                            assert_eq!(w, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bits_different_seed_differs() {
        let cfg = small_cfg();
        let a = ToyModel::build(&cfg)
            .unwrap()
            .forward(&tokens(9), None)
            .unwrap();
        let b = ToyModel::build(&cfg)
            .unwrap()
            .forward(&tokens(9), None)
            .unwrap();
        assert_eq!(a.attention, b.attention);
        assert_eq!(a.hidden, b.hidden);

        let cfg2 = ModelConfig { seed: 8, ..cfg };
        let c = ToyModel::build(&cfg2)
            .unwrap()
            .forward(&tokens(9), None)
            .unwrap();
        assert_ne!(a.attention, c.attention);
    }

    #[test]
    fn full_mask_matches_unmasked_forward() {
        let cfg = small_cfg();
        let model = ToyModel::build(&cfg).unwrap();
        let toks = tokens(10);
        let full = SurvivalMask::full(
            Regime::Agnostic,
            PressKind::Chunk,
            cfg.num_layers,
            cfg.num_kv_heads,
            toks.len(),
        )
        .unwrap();
        let plain = model.forward(&toks, None).unwrap();
        let masked = model.forward(&toks, Some(&full)).unwrap();
        assert_eq!(plain.attention, masked.attention);
        assert_eq!(plain.hidden, masked.hidden);
    }

    #[test]
    fn empty_row_falls_back_to_self() {
        let cfg = small_cfg();
        let model = ToyModel::build(&cfg).unwrap();
        let toks = tokens(6);
        // Every head keeps only position 3: rows 0..3 have no surviving
        // causal column and must collapse onto themselves.
        let only3 = SurvivalMask::new(
            0.9,
            Regime::Agnostic,
            PressKind::Chunk,
            toks.len(),
            vec![vec![vec![3]; cfg.num_kv_heads]; cfg.num_layers],
        )
        .unwrap();
        let out = model.forward(&toks, Some(&only3)).unwrap();
        let a = &out.attention;
        for l in 0..a.layers() {
            for h in 0..a.heads() {
                for i in 0..3 {
                    assert_eq!(a.weight(l, h, i, i), 1.0);
                }
                assert_eq!(a.weight(l, h, 3, 3), 1.0);
                for i in 4..6 {
                    assert_eq!(a.weight(l, h, i, 3), 1.0);
                    assert_eq!(a.weight(l, h, i, i), 0.0);
                }
            }
        }
    }

    #[test]
    fn gqa_groups_share_kv_but_not_queries() {
        let cfg = small_cfg();
        assert_eq!(cfg.group_size(), 2);
        let model = ToyModel::build(&cfg).unwrap();
        let out = model.forward(&tokens(8), None).unwrap();
        // Heads 0 and 1 share KV head 0 yet keep distinct query projections,
        // so their rows agree in support but not in value.
        let a = &out.attention;
        assert_eq!(a.kv_head_of(0), 0);
        assert_eq!(a.kv_head_of(1), 0);
        assert_eq!(a.kv_head_of(2), 1);
        assert_ne!(a.row(0, 0, 5), a.row(0, 1, 5));
    }

    #[test]
    fn mask_shape_mismatch_is_an_error() {
        let cfg = small_cfg();
        let model = ToyModel::build(&cfg).unwrap();
        let toks = tokens(6);
        let wrong = SurvivalMask::full(Regime::Agnostic, PressKind::Chunk, 1, 2, 6).unwrap();
        let err = model.forward(&toks, Some(&wrong)).unwrap_err();
        assert!(matches!(err, ForwardError::MaskShape { .. }));
    }

    #[test]
    fn masked_renormalized_matches_masked_forward() {
        let cfg = small_cfg();
        let model = ToyModel::build(&cfg).unwrap();
        let toks = tokens(10);
        let mask = SurvivalMask::new(
            0.5,
            Regime::Agnostic,
            PressKind::Chunk,
            toks.len(),
            vec![vec![vec![0, 2, 5, 7], vec![1, 3, 5, 9]]; cfg.num_layers],
        )
        .unwrap();
        let rebuilt = model
            .forward(&toks, None)
            .unwrap()
            .attention
            .masked_renormalized(&mask)
            .unwrap();
        let direct = model.forward(&toks, Some(&mask)).unwrap().attention;
        // First layer: same softmax over the same logits, two float paths.
        for h in 0..direct.heads() {
            for i in 0..toks.len() {
                for j in 0..toks.len() {
                    assert!(
                        (rebuilt.weight(0, h, i, j) - direct.weight(0, h, i, j)).abs() < 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn funnel_profile_narrows_consensus_with_depth() {
        let cfg = ModelConfig {
            num_layers: 4,
            num_query_heads: 8,
            num_kv_heads: 8,
            head_dim: 8,
            max_seq: 64,
            bytes_per_element: 2,
            seed: 11,
        };
        let funnel = ToyModel::with_profile(&cfg, ConsensusProfile::Funnel).unwrap();
        let out = funnel.forward(&tokens(24), None).unwrap();
        let a = &out.attention;
        let distinct = |layer: usize| {
            let mut tops: Vec<usize> = (0..a.heads()).map(|h| a.top_token(layer, h, 23)).collect();
            tops.sort_unstable();
            tops.dedup();
            tops.len()
        };
        assert!(distinct(3) < distinct(0));
        assert_eq!(distinct(3), 1);
    }

    #[test]
    fn override_changes_only_downstream_of_its_position() {
        let cfg = small_cfg();
        let model = ToyModel::build(&cfg).unwrap();
        let toks = tokens(6);
        let overrides = BTreeMap::from([(5usize, vec![0.25; cfg.model_dim()])]);
        let base = model.forward(&toks, None).unwrap();
        let bumped = model
            .forward_with_overrides(&toks, None, &overrides)
            .unwrap();
        // Position 5 is the last token: nothing upstream may move.
        for i in 0..5 {
            assert_eq!(base.hidden.final_level()[i], bumped.hidden.final_level()[i]);
        }
        assert_ne!(base.hidden.final_level()[5], bumped.hidden.final_level()[5]);
    }

    #[test]
    fn routed_forward_with_full_prefix_policy_matches_plain() {
        let cfg = small_cfg();
        let model = ToyModel::build(&cfg).unwrap();
        let toks = tokens(7);
        let plain = model.forward(&toks, None).unwrap();
        let routed = model
            .forward_routed(&toks, &|_, _, i| (0..=i).collect(), &BTreeMap::new())
            .unwrap();
        assert_eq!(plain.attention, routed.attention);
        assert_eq!(plain.hidden, routed.hidden);
    }
}
