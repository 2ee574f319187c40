//! Eviction scoring and the two press policies.
//!
//! Scores estimate how much future attention a cached position will receive:
//! the column mean of attention weights over destination rows, averaged over
//! the query heads of each KV group. Question-agnostic scoring uses every
//! row; question-aware scoring restricts the mean to the query rows.
//!
//! `press_chunk` keeps a uniform per-head budget of ceil((1 - alpha) * S)
//! positions, spread across fixed-size chunks. `press_adaptive` ranks all
//! (layer, head, position) entries in one pool and evicts the global bottom
//! alpha fraction, so per-head counts may differ.

use std::ops::Range;

use thiserror::Error;

use crate::attention::AttentionTensor;
use crate::mask::{MaskError, PressKind, Regime, SurvivalMask};

#[derive(Debug, Error, PartialEq)]
pub enum PressError {
    #[error("alpha {0} outside [0, 1]")]
    AlphaRange(f64),
    #[error("chunk_size must be >= 1")]
    ZeroChunk,
    #[error("query span {start}..{end} empty or outside sequence of {seq}")]
    BadSpan {
        start: usize,
        end: usize,
        seq: usize,
    },
    #[error("score tensor must be non-empty and rectangular")]
    BadShape,
    #[error("non-finite score at layer {layer} head {head} position {pos}")]
    NonFinite {
        layer: usize,
        head: usize,
        pos: usize,
    },
    #[error("prefix length {len} exceeds scored positions {seq}")]
    PrefixTooLong { len: usize, seq: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Predicted usefulness of each cached position, per (layer, KV head).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    /// values[layer][kv_head][position]
    values: Vec<Vec<Vec<f64>>>,
    regime: Regime,
}

impl ScoreTensor {
    pub fn new(values: Vec<Vec<Vec<f64>>>, regime: Regime) -> Result<Self, PressError> {
        if values.is_empty() || values[0].is_empty() || values[0][0].is_empty() {
            return Err(PressError::BadShape);
        }
        let heads = values[0].len();
        let seq = values[0][0].len();
        for (layer, per_head) in values.iter().enumerate() {
            if per_head.len() != heads {
                return Err(PressError::BadShape);
            }
            for (head, scores) in per_head.iter().enumerate() {
                if scores.len() != seq {
                    return Err(PressError::BadShape);
                }
                for (pos, &s) in scores.iter().enumerate() {
                    if !s.is_finite() {
                        return Err(PressError::NonFinite { layer, head, pos });
                    }
                }
            }
        }
        Ok(ScoreTensor { values, regime })
    }

    pub fn layers(&self) -> usize {
        self.values.len()
    }

    pub fn kv_heads(&self) -> usize {
        self.values[0].len()
    }

    pub fn seq_len(&self) -> usize {
        self.values[0][0].len()
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn score(&self, layer: usize, kv_head: usize, pos: usize) -> f64 {
        self.values[layer][kv_head][pos]
    }

    /// Scores restricted to the first `len` positions, used when eviction may
    /// only touch a prefix (content cached before the query arrived).
    pub fn prefix(&self, len: usize) -> Result<ScoreTensor, PressError> {
        if len == 0 || len > self.seq_len() {
            return Err(PressError::PrefixTooLong {
                len,
                seq: self.seq_len(),
            });
        }
        let values = self
            .values
            .iter()
            .map(|per_head| per_head.iter().map(|s| s[..len].to_vec()).collect())
            .collect();
        ScoreTensor::new(values, self.regime)
    }
}

/// Column-mean attention score. `query_span = None` averages over all
/// destination rows (question-agnostic); `Some(range)` restricts the mean to
/// those rows (question-aware). Rows a causal column cannot reach contribute
/// zero, so early positions are not inflated.
pub fn score_expected_attention(
    attn: &AttentionTensor,
    query_span: Option<Range<usize>>,
) -> Result<ScoreTensor, PressError> {
    let s = attn.seq_len();
    let (rows, regime) = match query_span {
        None => (0..s, Regime::Agnostic),
        Some(r) => {
            if r.is_empty() || r.end > s {
                return Err(PressError::BadSpan {
                    start: r.start,
                    end: r.end,
                    seq: s,
                });
            }
            (r, Regime::Aware)
        }
    };
    let group = attn.group_size();
    let row_count = rows.len() as f64;
    let mut values = Vec::with_capacity(attn.layers());
    for l in 0..attn.layers() {
        let mut per_head = Vec::with_capacity(attn.kv_heads());
        for k in 0..attn.kv_heads() {
            let mut scores = vec![0.0; s];
            for g in 0..group {
                let h = k * group + g;
                for i in rows.clone() {
                    for (j, w) in attn.row(l, h, i).iter().enumerate() {
                        scores[j] += w;
                    }
                }
            }
            let norm = row_count * group as f64;
            scores.iter_mut().for_each(|v| *v /= norm);
            per_head.push(scores);
        }
        values.push(per_head);
    }
    ScoreTensor::new(values, regime)
}

fn check_alpha(alpha: f64) -> Result<(), PressError> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(PressError::AlphaRange(alpha));
    }
    Ok(())
}

fn keep_budget(alpha: f64, total: usize) -> usize {
    ((1.0 - alpha) * total as f64).ceil() as usize
}

/// Uniform per-head budget spread across fixed chunks.
///
/// Within each chunk positions are ranked by descending score, ties kept in
/// descending position so the lowest position is evicted first. The global
/// budget ceil((1 - alpha) * S) is then filled round-robin by within-chunk
/// rank. For equal-size chunks this is exactly the largest-remainder split
/// of the budget; unlike a per-alpha remainder apportionment it also keeps
/// survivor sets nested as alpha grows, because every budget is a prefix of
/// one fixed priority order.
pub fn press_chunk(
    scores: &ScoreTensor,
    alpha: f64,
    chunk_size: usize,
) -> Result<SurvivalMask, PressError> {
    check_alpha(alpha)?;
    if chunk_size == 0 {
        return Err(PressError::ZeroChunk);
    }
    let s = scores.seq_len();
    let keep_total = keep_budget(alpha, s);
    let mut survivors = Vec::with_capacity(scores.layers());
    for l in 0..scores.layers() {
        let mut per_head = Vec::with_capacity(scores.kv_heads());
        for k in 0..scores.kv_heads() {
            // priority[r] holds rank-r positions chunk by chunk.
            let num_chunks = s.div_ceil(chunk_size);
            let mut by_rank: Vec<Vec<usize>> = vec![Vec::new(); chunk_size];
            for c in 0..num_chunks {
                let lo = c * chunk_size;
                let hi = (lo + chunk_size).min(s);
                let mut order: Vec<usize> = (lo..hi).collect();
                order.sort_by(|&a, &b| {
                    scores.score(l, k, b)
                        .partial_cmp(&scores.score(l, k, a))
                        .expect("finite scores")
                        .then(b.cmp(&a))
                });
                for (rank, pos) in order.into_iter().enumerate() {
                    by_rank[rank].push(pos);
                }
            }
            let kept: Vec<usize> = by_rank
                .into_iter()
                .flatten()
                .take(keep_total)
                .collect();
            per_head.push(kept);
        }
        survivors.push(per_head);
    }
    Ok(SurvivalMask::new(
        alpha,
        scores.regime(),
        PressKind::Chunk,
        s,
        survivors,
    )?)
}

/// Single global ranking over every (layer, head, position); the bottom
/// alpha fraction is evicted, keeping ceil((1 - alpha) * S * L * H) entries
/// in total. Ties evict the lower (layer, head, position) first.
pub fn press_adaptive(scores: &ScoreTensor, alpha: f64) -> Result<SurvivalMask, PressError> {
    check_alpha(alpha)?;
    let s = scores.seq_len();
    let l_count = scores.layers();
    let h_count = scores.kv_heads();
    let total = s * l_count * h_count;
    let keep_total = keep_budget(alpha, total);
    let mut items: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(total);
    for l in 0..l_count {
        for k in 0..h_count {
            for j in 0..s {
                items.push((scores.score(l, k, j), l, k, j));
            }
        }
    }
    items.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite scores")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut survivors = vec![vec![Vec::new(); h_count]; l_count];
    for &(_, l, k, j) in items.iter().skip(total - keep_total) {
        survivors[l][k].push(j);
    }
    Ok(SurvivalMask::new(
        alpha,
        scores.regime(),
        PressKind::Adaptive,
        s,
        survivors,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tol;

    /// Causal tensor with A(i, j) = 1 / (i + 1) for j <= i.
    fn uniform_causal(s: usize, layers: usize, heads: usize) -> AttentionTensor {
        let m: Vec<f64> = (0..s)
            .flat_map(|i| {
                (0..s).map(move |j| if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 })
            })
            .collect();
        AttentionTensor::from_rows(
            vec![vec![m; heads]; layers],
            s,
            true,
            heads,
            tol::ROW_SUM_EXACT,
        )
        .unwrap()
    }

    fn scores_from(values: Vec<f64>, layers: usize, heads: usize) -> ScoreTensor {
        ScoreTensor::new(vec![vec![values; heads]; layers], Regime::Agnostic).unwrap()
    }

    #[test]
    fn uniform_attention_scores_decrease_with_position() {
        let s = 9;
        let attn = uniform_causal(s, 2, 2);
        let scores = score_expected_attention(&attn, None).unwrap();
        // Independent oracle: direct double sum.
        for l in 0..2 {
            for k in 0..2 {
                for j in 0..s {
                    let oracle: f64 = (j..s).map(|i| 1.0 / (i as f64 + 1.0)).sum::<f64>() / s as f64;
                    assert!((scores.score(l, k, j) - oracle).abs() < 1e-12);
                }
                for j in 1..s {
                    assert!(scores.score(l, k, j) < scores.score(l, k, j - 1));
                }
            }
        }
    }

    #[test]
    fn aware_span_of_last_row_reproduces_that_row() {
        let s = 7;
        let attn = uniform_causal(s, 1, 1);
        let scores = score_expected_attention(&attn, Some(s - 1..s)).unwrap();
        assert_eq!(scores.regime(), Regime::Aware);
        for j in 0..s {
            assert!((scores.score(0, 0, j) - attn.weight(0, 0, s - 1, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_span_is_rejected() {
        let attn = uniform_causal(4, 1, 1);
        assert!(matches!(
            score_expected_attention(&attn, Some(2..2)),
            Err(PressError::BadSpan { .. })
        ));
        assert!(matches!(
            score_expected_attention(&attn, Some(2..9)),
            Err(PressError::BadSpan { .. })
        ));
    }

    #[test]
    fn chunk_press_reference_case() {
        // S=8, chunks of 4, alpha=0.5, scores equal to position index:
        // each chunk keeps its top half.
        let scores = scores_from((0..8).map(|p| p as f64).collect(), 1, 1);
        let mask = press_chunk(&scores, 0.5, 4).unwrap();
        assert_eq!(mask.survivors(0, 0), &[2, 3, 6, 7]);
    }

    #[test]
    fn chunk_press_alpha_extremes() {
        let scores = scores_from((0..8).map(|p| p as f64).collect(), 2, 2);
        let full = press_chunk(&scores, 0.0, 4).unwrap();
        let none = press_chunk(&scores, 1.0, 4).unwrap();
        for l in 0..2 {
            for k in 0..2 {
                assert_eq!(full.survivors(l, k), &[0, 1, 2, 3, 4, 5, 6, 7]);
                assert!(none.survivors(l, k).is_empty());
            }
        }
    }

    #[test]
    fn chunk_press_budget_is_exact_for_ragged_chunks() {
        // S=10 with chunk_size 4 leaves a short tail chunk; the total must
        // still equal ceil((1 - alpha) * S).
        let scores = scores_from((0..10).map(|p| (p as f64).sin()).collect(), 1, 1);
        for alpha in [0.0, 0.15, 0.3, 0.5, 0.77, 0.9, 1.0] {
            let mask = press_chunk(&scores, alpha, 4).unwrap();
            let want = ((1.0 - alpha) * 10.0).ceil() as usize;
            assert_eq!(mask.survivors(0, 0).len(), want, "alpha {alpha}");
        }
    }

    #[test]
    fn chunk_tie_break_evicts_lower_positions_first() {
        let scores = scores_from(vec![1.0; 8], 1, 1);
        let mask = press_chunk(&scores, 0.5, 4).unwrap();
        // All scores equal: within each chunk the lower positions go first.
        assert_eq!(mask.survivors(0, 0), &[2, 3, 6, 7]);
    }

    #[test]
    fn adaptive_press_starves_the_cold_head() {
        let hot = vec![1.0; 6];
        let cold = vec![0.0; 6];
        let scores = ScoreTensor::new(vec![vec![hot, cold]], Regime::Agnostic).unwrap();
        let mask = press_adaptive(&scores, 0.5).unwrap();
        assert_eq!(mask.survivors(0, 0), &[0, 1, 2, 3, 4, 5]);
        assert!(mask.survivors(0, 1).is_empty());
    }

    #[test]
    fn adaptive_identical_scores_keep_exactly_half() {
        let scores = scores_from(vec![0.5; 8], 2, 2);
        let mask = press_adaptive(&scores, 0.5).unwrap();
        let total: usize = (0..2)
            .flat_map(|l| (0..2).map(move |k| (l, k)))
            .map(|(l, k)| mask.survivors(l, k).len())
            .sum();
        assert_eq!(total, 16);
        // Deterministic: ties evict lower (layer, head, position) first, so
        // layer 0 drains before layer 1.
        assert!(mask.survivors(0, 0).is_empty());
        assert!(mask.survivors(0, 1).is_empty());
        assert_eq!(mask.survivors(1, 0), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(mask.survivors(1, 1), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn adaptive_budget_matches_global_ceiling() {
        let vals: Vec<f64> = (0..7).map(|p| ((p * 37 % 11) as f64) / 11.0).collect();
        let scores = scores_from(vals, 3, 2);
        for alpha in [0.1, 0.33, 0.6, 0.85] {
            let mask = press_adaptive(&scores, alpha).unwrap();
            let total: usize = (0..3)
                .flat_map(|l| (0..2).map(move |k| (l, k)))
                .map(|(l, k)| mask.survivors(l, k).len())
                .sum();
            assert_eq!(total, ((1.0 - alpha) * 42.0).ceil() as usize, "alpha {alpha}");
        }
    }

    #[test]
    fn both_presses_are_nested_in_alpha() {
        let vals: Vec<f64> = (0..16).map(|p| ((p * 29 % 13) as f64) / 13.0).collect();
        let scores = scores_from(vals, 2, 2);
        let grid = [0.0, 0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 0.95, 1.0];
        for window in grid.windows(2) {
            let loose_c = press_chunk(&scores, window[0], 4).unwrap();
            let tight_c = press_chunk(&scores, window[1], 4).unwrap();
            assert!(loose_c.contains(&tight_c));
            let loose_a = press_adaptive(&scores, window[0]).unwrap();
            let tight_a = press_adaptive(&scores, window[1]).unwrap();
            assert!(loose_a.contains(&tight_a));
        }
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let scores = scores_from(vec![0.1; 4], 1, 1);
        assert_eq!(
            press_chunk(&scores, 1.5, 2).unwrap_err(),
            PressError::AlphaRange(1.5)
        );
        assert_eq!(
            press_adaptive(&scores, -0.2).unwrap_err(),
            PressError::AlphaRange(-0.2)
        );
    }

    #[test]
    fn nan_scores_are_rejected_at_construction() {
        let err = ScoreTensor::new(vec![vec![vec![0.0, f64::NAN]]], Regime::Agnostic).unwrap_err();
        assert_eq!(
            err,
            PressError::NonFinite {
                layer: 0,
                head: 0,
                pos: 1
            }
        );
    }
}
