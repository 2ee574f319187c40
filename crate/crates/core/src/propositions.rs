//! Executable checks of the three routing claims: redundancy bounds
//! reachability loss, global eviction makes the query's state independent
//! of the evicted content, and pruning a consensus token forces the
//! agreeing heads to shift.
//!
//! Every check runs through the real mask, compression, and forward-pass
//! machinery rather than a simulation of it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::attention::{derived_rng, standard_normal, ForwardError, ForwardOutput, ToyModel};
use crate::config::ModelConfig;
use crate::graph::{GraphError, TokenRouteGraph};
use crate::mask::{MaskError, PressKind, Regime, SurvivalMask};
use crate::metrics::{agreement_fraction, MetricsError};
use crate::tol;

#[derive(Debug, Error)]
pub enum PropError {
    #[error("route count k must be at least 1")]
    KRange,
    #[error("survival probability {0} outside [0, 1]")]
    PRange(f64),
    #[error("at least one trial required")]
    ZeroTrials,
    #[error("this check needs a single-layer model, got {0} layers")]
    NotSingleLayer(usize),
    #[error("the leakage instance needs exactly two layers, got {0}")]
    NotTwoLayer(usize),
    #[error("answer set is empty")]
    EmptyAnswerSet,
    #[error("answer position {pos} out of range for sequence of {seq}")]
    AnswerOutOfRange { pos: usize, seq: usize },
    #[error("answer set contains the query position {0}")]
    QueryInAnswer(usize),
    #[error("setup failed: answer still reachable after compression")]
    AnswerStillReachable,
    #[error("head {0} has no probability mass left after pruning")]
    DegenerateRow(usize),
    #[error("ticket edge ({i}, {j}) at layer {layer} is not part of the base graph")]
    TicketNotContained { layer: usize, i: usize, j: usize },
    #[error("ticket shape does not match the base graph and model")]
    ShapeMismatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Reach-probability check for k redundant routes with per-head survival
/// probability p.
#[derive(Debug, Clone, Serialize)]
pub struct Prop1Report {
    pub k: usize,
    pub p: f64,
    pub trials: usize,
    /// Analytic lower bound 1 - (1 - p)^k.
    pub bound: f64,
    /// Exact reach probability by enumerating all 2^k survival patterns
    /// through the graph machinery; None when k > 20 or for the multi-hop
    /// shape.
    pub exact: Option<f64>,
    pub empirical: f64,
    pub std_error: f64,
    /// Empirical estimate is at least the bound minus the sampling margin.
    pub pass: bool,
    /// Sampling margin exceeds the reporting threshold; estimates are too
    /// noisy to certify the bound tightly.
    pub wide_ci: bool,
}

fn check_prop1_inputs(k: usize, p: f64, trials: usize) -> Result<(), PropError> {
    if k == 0 {
        return Err(PropError::KRange);
    }
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(PropError::PRange(p));
    }
    if trials == 0 {
        return Err(PropError::ZeroTrials);
    }
    Ok(())
}

/// k parallel single-edge routes q -> t through distinct heads: one edge
/// carrying every head label, one KV group per head.
fn single_edge_graph(k: usize) -> Result<TokenRouteGraph, PropError> {
    Ok(TokenRouteGraph::from_edges(
        1,
        2,
        k,
        true,
        0.0,
        &[(0, 1, 0, (0..k).collect())],
    )?)
}

/// Mask keeping the query everywhere and the target only in the heads
/// flagged alive.
fn single_edge_mask(alive: &[bool]) -> Result<SurvivalMask, PropError> {
    let survivors: Vec<Vec<usize>> = alive
        .iter()
        .map(|&a| if a { vec![0, 1] } else { vec![1] })
        .collect();
    Ok(SurvivalMask::new(
        0.5,
        Regime::Agnostic,
        PressKind::Chunk,
        2,
        vec![survivors],
    )?)
}

fn single_edge_reaches(graph: &TokenRouteGraph, alive: &[bool]) -> Result<bool, PropError> {
    let mask = single_edge_mask(alive)?;
    Ok(graph.compress(&mask)?.reachable(1, 0)?.contains(0))
}

fn finish_prop1(
    k: usize,
    p: f64,
    trials: usize,
    exact: Option<f64>,
    hits: usize,
) -> Prop1Report {
    let bound = 1.0 - (1.0 - p).powi(k as i32);
    let empirical = hits as f64 / trials as f64;
    let std_error = (empirical * (1.0 - empirical) / trials as f64).sqrt();
    let margin = tol::MC_SIGMA * std_error;
    Prop1Report {
        k,
        p,
        trials,
        bound,
        exact,
        empirical,
        std_error,
        pass: empirical >= bound - margin,
        wide_ci: margin > tol::WIDE_CI,
    }
}

/// Single-edge redundancy check. Enumerates all survival patterns exactly
/// (k <= 20) and Monte Carlo samples them; both run through mask
/// compression and reachability, never through the closed form.
pub fn verify_prop1(k: usize, p: f64, trials: usize, seed: u64) -> Result<Prop1Report, PropError> {
    check_prop1_inputs(k, p, trials)?;
    let graph = single_edge_graph(k)?;

    let exact = if k <= 20 {
        let mut total = 0.0;
        for pattern in 0u64..(1 << k) {
            let alive: Vec<bool> = (0..k).map(|h| pattern >> h & 1 == 1).collect();
            let weight: f64 = alive
                .iter()
                .map(|&a| if a { p } else { 1.0 - p })
                .product();
            if single_edge_reaches(&graph, &alive)? {
                total += weight;
            }
        }
        Some(total)
    } else {
        None
    };

    let mut hits = 0;
    for trial in 0..trials {
        let mut rng = derived_rng(seed, "prop1-trial", trial as u64, 0);
        let alive: Vec<bool> = (0..k).map(|_| rng.gen::<f64>() < p).collect();
        if single_edge_reaches(&graph, &alive)? {
            hits += 1;
        }
    }
    Ok(finish_prop1(k, p, trials, exact, hits))
}

/// Two-hop variant: k disjoint routes q -> m_h -> t, each confined to head
/// h, with only the target's survival randomized. Monte Carlo only.
pub fn verify_prop1_multihop(
    k: usize,
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<Prop1Report, PropError> {
    check_prop1_inputs(k, p, trials)?;
    let s = k + 2;
    let q = k + 1;
    let mut edge_list = Vec::with_capacity(2 * k);
    for h in 0..k {
        edge_list.push((0, q, h + 1, vec![h]));
        edge_list.push((0, h + 1, 0, vec![h]));
    }
    let graph = TokenRouteGraph::from_edges(1, s, k, true, 0.0, &edge_list)?;
    let always: Vec<usize> = (1..=q).collect();

    let mut hits = 0;
    for trial in 0..trials {
        let mut rng = derived_rng(seed, "prop1-multihop", trial as u64, 0);
        let survivors: Vec<Vec<usize>> = (0..k)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    let mut v = vec![0];
                    v.extend(&always);
                    v
                } else {
                    always.clone()
                }
            })
            .collect();
        let mask = SurvivalMask::new(0.5, Regime::Agnostic, PressKind::Chunk, s, vec![survivors])?;
        if graph.compress(&mask)?.reachable(q, 0)?.contains(0) {
            hits += 1;
        }
    }
    Ok(finish_prop1(k, p, trials, None, hits))
}

/// Erasure check: with every answer position evicted from every head of a
/// single-layer model, the query's hidden state must not move at all under
/// arbitrary reassignment of the evicted embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct Prop2Report {
    pub perturbations: usize,
    pub answer_reachable_after: bool,
    pub max_abs_difference: f64,
    pub bit_identical: bool,
    pub pass: bool,
}

/// The query is the last position. The model must have exactly one layer:
/// with more, content can reach the query through an intermediate token's
/// residual stream without any surviving route to the answer (see
/// `prop2_two_layer_leakage`), so the bit-exact claim is restricted to the
/// single-layer regime.
pub fn verify_prop2(
    cfg: &ModelConfig,
    tokens: &[u32],
    t_ans: &[usize],
    perturbations: usize,
    seed: u64,
) -> Result<Prop2Report, PropError> {
    if cfg.num_layers != 1 {
        return Err(PropError::NotSingleLayer(cfg.num_layers));
    }
    if tokens.is_empty() {
        return Err(PropError::Forward(ForwardError::EmptySequence));
    }
    let s = tokens.len();
    let q = s - 1;
    if t_ans.is_empty() {
        return Err(PropError::EmptyAnswerSet);
    }
    for &t in t_ans {
        if t >= s {
            return Err(PropError::AnswerOutOfRange { pos: t, seq: s });
        }
        if t == q {
            return Err(PropError::QueryInAnswer(q));
        }
    }

    let keep: Vec<usize> = (0..s).filter(|p| !t_ans.contains(p)).collect();
    let alpha = t_ans.len() as f64 / s as f64;
    let mask = SurvivalMask::new(
        alpha,
        Regime::Agnostic,
        PressKind::Chunk,
        s,
        vec![vec![keep; cfg.num_kv_heads]; cfg.num_layers],
    )?;

    let model = ToyModel::build(cfg).map_err(|_| PropError::ShapeMismatch)?;
    let base = model.forward(tokens, Some(&mask))?;
    let epsilon = 1.0 / s as f64;
    let compressed = crate::graph::build_graph(&base.attention, epsilon)?.compress(&mask)?;
    let answer_reachable_after = compressed.answer_reachable(q, t_ans)?;
    if answer_reachable_after {
        return Err(PropError::AnswerStillReachable);
    }

    let base_state = &base.hidden.final_level()[q];
    let dim = model.config().model_dim();
    let mut max_abs_difference = 0.0f64;
    let mut bit_identical = true;
    for i in 0..perturbations {
        let mut rng = derived_rng(seed, "prop2-perturb", i as u64, 0);
        let overrides: BTreeMap<usize, Vec<f64>> = t_ans
            .iter()
            .map(|&t| {
                let v = (0..dim).map(|_| standard_normal(&mut rng)).collect();
                (t, v)
            })
            .collect();
        let perturbed = model.forward_with_overrides(tokens, Some(&mask), &overrides)?;
        let state = &perturbed.hidden.final_level()[q];
        for (a, b) in base_state.iter().zip(state) {
            if a.to_bits() != b.to_bits() {
                bit_identical = false;
            }
            max_abs_difference = max_abs_difference.max((a - b).abs());
        }
    }
    Ok(Prop2Report {
        perturbations,
        answer_reachable_after,
        max_abs_difference,
        bit_identical,
        pass: bit_identical && !answer_reachable_after,
    })
}

/// Two-layer counterexample to the erasure claim without the no-leakage
/// assumption: an intermediate token reads the answer at layer 0 and the
/// query reads the intermediate at layer 1, so the upward-lift route graph
/// never connects the query to the answer, yet the answer's embedding moves
/// the query's state.
#[derive(Debug, Clone, Serialize)]
pub struct Prop2Leakage {
    pub answer_reachable: bool,
    pub max_abs_difference: f64,
    /// Unreachable and yet the output moved: the leakage exists.
    pub leaks: bool,
}

pub fn prop2_two_layer_leakage(cfg: &ModelConfig, seed: u64) -> Result<Prop2Leakage, PropError> {
    if cfg.num_layers != 2 {
        return Err(PropError::NotTwoLayer(cfg.num_layers));
    }
    let tokens: Vec<u32> = vec![10, 11, 12, 13];
    let (t, j, q) = (1usize, 2usize, 3usize);

    // Layer 0: only the intermediate looks at the answer. Layer 1: only the
    // query looks at the intermediate. Everything else stays on itself.
    let attend = move |layer: usize, _head: usize, i: usize| -> Vec<usize> {
        match (layer, i) {
            (0, row) if row == j => vec![t, j],
            (1, row) if row == q => vec![j, q],
            (_, row) => vec![row],
        }
    };

    let heads = cfg.num_query_heads;
    let all_heads: Vec<usize> = (0..heads).collect();
    let graph = TokenRouteGraph::from_edges(
        2,
        tokens.len(),
        heads,
        true,
        0.0,
        &[
            (0, j, t, all_heads.clone()),
            (1, q, j, all_heads),
        ],
    )?;
    let answer_reachable = graph.answer_reachable(q, &[t])?;

    let model = ToyModel::build(cfg).map_err(|_| PropError::ShapeMismatch)?;
    let base = model.forward_routed(&tokens, &attend, &BTreeMap::new())?;
    let mut rng = derived_rng(seed, "prop2-leak", 0, 0);
    let dim = model.config().model_dim();
    let override_vec: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
    let overrides = BTreeMap::from([(t, override_vec)]);
    let perturbed = model.forward_routed(&tokens, &attend, &overrides)?;

    let mut max_abs_difference = 0.0f64;
    for (a, b) in base.hidden.final_level()[q]
        .iter()
        .zip(&perturbed.hidden.final_level()[q])
    {
        max_abs_difference = max_abs_difference.max((a - b).abs());
    }
    Ok(Prop2Leakage {
        answer_reachable,
        max_abs_difference,
        leaks: !answer_reachable && max_abs_difference > 0.0,
    })
}

/// Consensus-pruning check on one layer's query rows.
#[derive(Debug, Clone, Serialize)]
pub struct Prop3Report {
    pub heads: usize,
    /// Largest fraction of heads agreeing on one top token.
    pub rho: f64,
    pub t_star: usize,
    /// Heads whose top token was t_star.
    pub affected: usize,
    /// Affected heads whose top token changed after pruning; pruning zeroes
    /// t_star, so every affected head must shift.
    pub shifted: usize,
    /// ceil(rho * heads), computed in integers as the affected count.
    pub min_required: usize,
    pub pass: bool,
    /// t_star is itself an answer position; pruning it is erasure, not a
    /// routing shift, so the scenario is flagged rather than asserted.
    pub prunes_answer: bool,
    /// Mean attention mass on the answer positions across all heads,
    /// before and after pruning plus renormalization.
    pub answer_mass_before: f64,
    pub answer_mass_after: f64,
}

/// Prunes the consensus token from the heads that top it and recounts top
/// tokens. `rows` are one query position's per-head attention rows.
pub fn verify_prop3(rows: &[Vec<f64>], t_ans: &[usize]) -> Result<Prop3Report, PropError> {
    let (rho, t_star) = agreement_fraction(rows)?;
    let width = rows[0].len();
    for &t in t_ans {
        if t >= width {
            return Err(PropError::AnswerOutOfRange { pos: t, seq: width });
        }
    }
    let tops = crate::metrics::row_argmaxes(rows)?;
    let heads = rows.len();
    let affected: Vec<usize> = (0..heads).filter(|&h| tops[h] == t_star).collect();

    let answer_mass = |rs: &[Vec<f64>]| -> f64 {
        rs.iter()
            .map(|r| t_ans.iter().map(|&t| r[t]).sum::<f64>())
            .sum::<f64>()
            / heads as f64
    };
    let answer_mass_before = answer_mass(rows);

    let mut pruned: Vec<Vec<f64>> = rows.to_vec();
    for &h in &affected {
        pruned[h][t_star] = 0.0;
        let rest: f64 = pruned[h].iter().sum();
        if rest <= 0.0 {
            return Err(PropError::DegenerateRow(h));
        }
        pruned[h].iter_mut().for_each(|w| *w /= rest);
    }
    let new_tops = crate::metrics::row_argmaxes(&pruned)?;
    let shifted = affected.iter().filter(|&&h| new_tops[h] != t_star).count();

    Ok(Prop3Report {
        heads,
        rho,
        t_star,
        affected: affected.len(),
        shifted,
        min_required: affected.len(),
        pass: shifted >= affected.len(),
        prunes_answer: t_ans.contains(&t_star),
        answer_mass_before,
        answer_mass_after: answer_mass(&pruned),
    })
}

/// Forward pass with attention confined to the ticket's labeled edges. The
/// ticket must be a labeled subgraph of `base`; rows with no ticket edge
/// fall back to reading themselves.
pub fn routing_restricted_forward(
    model: &ToyModel,
    tokens: &[u32],
    ticket: &TokenRouteGraph,
    base: &TokenRouteGraph,
) -> Result<ForwardOutput, PropError> {
    let cfg = model.config();
    if ticket.seq_len() != tokens.len()
        || ticket.seq_len() != base.seq_len()
        || ticket.attention_layers() != base.attention_layers()
        || ticket.attention_layers() != cfg.num_layers
        || ticket.heads() != base.heads()
        || ticket.heads() != cfg.num_query_heads
    {
        return Err(PropError::ShapeMismatch);
    }
    for layer in 0..ticket.attention_layers() {
        for (i, j, labels) in ticket.layer_edges(layer) {
            let base_labels = base
                .edge_labels(layer, i, j)
                .ok_or(PropError::TicketNotContained { layer, i, j })?;
            if !labels.iter().all(|h| base_labels.contains(h)) {
                return Err(PropError::TicketNotContained { layer, i, j });
            }
        }
    }

    // columns[layer][row][head] -> attendable positions.
    let s = tokens.len();
    let mut columns: Vec<Vec<Vec<Vec<usize>>>> =
        vec![vec![vec![Vec::new(); ticket.heads()]; s]; ticket.attention_layers()];
    for layer in 0..ticket.attention_layers() {
        for (i, j, labels) in ticket.layer_edges(layer) {
            for &h in labels {
                columns[layer][i][h].push(j);
            }
        }
    }
    let attend =
        move |layer: usize, head: usize, i: usize| -> Vec<usize> { columns[layer][i][head].clone() };
    Ok(model.forward_routed(tokens, &attend, &BTreeMap::new())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::press::{press_chunk, score_expected_attention};

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            max_seq: 64,
            bytes_per_element: 2,
            seed: 21,
        }
    }

    #[test]
    fn prop1_exact_enumeration_matches_closed_form() {
        let r = verify_prop1(3, 0.5, 1000, 7).unwrap();
        assert_eq!(r.bound, 0.875);
        assert_eq!(r.exact, Some(0.875));
        assert!(r.pass);
        let one = verify_prop1(1, 1.0, 1000, 7).unwrap();
        assert_eq!(one.exact, Some(1.0));
        assert_eq!(one.empirical, 1.0);
        assert_eq!(one.bound, 1.0);
        let dead = verify_prop1(2, 0.0, 1000, 7).unwrap();
        assert_eq!(dead.bound, 0.0);
        assert_eq!(dead.empirical, 0.0);
        assert!(dead.pass);
    }

    #[test]
    fn prop1_monte_carlo_brackets_the_bound() {
        let r = verify_prop1(3, 0.5, 5000, 11).unwrap();
        assert!(r.pass);
        assert!((r.empirical - 0.875).abs() < 5.0 * r.std_error + 1e-9);
        let noisy = verify_prop1(3, 0.5, 10, 11).unwrap();
        assert!(noisy.wide_ci);
    }

    #[test]
    fn prop1_multihop_routes_obey_the_same_bound() {
        let r = verify_prop1_multihop(3, 0.5, 4000, 13).unwrap();
        assert!(r.pass);
        assert_eq!(r.exact, None);
        assert!((r.empirical - 0.875).abs() < 5.0 * r.std_error + 1e-9);
    }

    #[test]
    fn prop1_multihop_paths_are_head_disjoint() {
        let k = 3;
        let mut edge_list = Vec::new();
        for h in 0..k {
            edge_list.push((0, k + 1, h + 1, vec![h]));
            edge_list.push((0, h + 1, 0, vec![h]));
        }
        let graph = TokenRouteGraph::from_edges(1, k + 2, k, true, 0.0, &edge_list).unwrap();
        assert_eq!(graph.head_disjoint_paths(k + 1, 0).unwrap(), k);
    }

    #[test]
    fn prop1_rejects_bad_inputs() {
        assert!(matches!(verify_prop1(0, 0.5, 10, 0), Err(PropError::KRange)));
        assert!(matches!(
            verify_prop1(2, 1.5, 10, 0),
            Err(PropError::PRange(_))
        ));
        assert!(matches!(
            verify_prop1(2, 0.5, 0, 0),
            Err(PropError::ZeroTrials)
        ));
    }

    #[test]
    fn prop2_single_layer_erasure_is_bit_exact() {
        let r = verify_prop2(&cfg(1), &[5, 6, 7, 8, 9, 10], &[2, 3], 8, 3).unwrap();
        assert!(r.pass);
        assert!(r.bit_identical);
        assert_eq!(r.max_abs_difference, 0.0);
        assert!(!r.answer_reachable_after);
    }

    #[test]
    fn prop2_requires_single_layer_and_valid_answers() {
        assert!(matches!(
            verify_prop2(&cfg(2), &[1, 2, 3], &[0], 1, 0),
            Err(PropError::NotSingleLayer(2))
        ));
        assert!(matches!(
            verify_prop2(&cfg(1), &[1, 2, 3], &[2], 1, 0),
            Err(PropError::QueryInAnswer(2))
        ));
        assert!(matches!(
            verify_prop2(&cfg(1), &[1, 2, 3], &[], 1, 0),
            Err(PropError::EmptyAnswerSet)
        ));
    }

    #[test]
    fn prop2_sanity_inversion_surviving_answer_moves_the_output() {
        let c = cfg(1);
        let tokens = [5u32, 6, 7, 8, 9, 10];
        let s = tokens.len();
        let t = 2usize;
        // The answer survives in KV head 0 only.
        let survivors: Vec<Vec<usize>> = (0..c.num_kv_heads)
            .map(|k| {
                (0..s)
                    .filter(|&p| p != t || k == 0)
                    .collect()
            })
            .collect();
        let mask =
            SurvivalMask::new(0.2, Regime::Agnostic, PressKind::Chunk, s, vec![survivors])
                .unwrap();
        let model = ToyModel::build(&c).unwrap();
        let base = model.forward(&tokens, Some(&mask)).unwrap();
        let mut rng = derived_rng(99, "sanity", 0, 0);
        let v: Vec<f64> = (0..c.model_dim()).map(|_| standard_normal(&mut rng)).collect();
        let overrides = BTreeMap::from([(t, v)]);
        let out = model
            .forward_with_overrides(&tokens, Some(&mask), &overrides)
            .unwrap();
        let q = s - 1;
        let diff: f64 = base.hidden.final_level()[q]
            .iter()
            .zip(&out.hidden.final_level()[q])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn prop2_two_layers_leak_without_the_assumption() {
        let r = prop2_two_layer_leakage(&cfg(2), 17).unwrap();
        assert!(!r.answer_reachable);
        assert!(r.max_abs_difference > 0.0);
        assert!(r.leaks);
        assert!(matches!(
            prop2_two_layer_leakage(&cfg(1), 17),
            Err(PropError::NotTwoLayer(1))
        ));
    }

    #[test]
    fn prop3_unanimous_heads_all_shift() {
        // Four heads top token 2; the answer is token 0 and holds the
        // second-largest mass everywhere.
        let rows = vec![
            vec![0.30, 0.10, 0.60],
            vec![0.35, 0.05, 0.60],
            vec![0.25, 0.15, 0.60],
            vec![0.40, 0.05, 0.55],
        ];
        let r = verify_prop3(&rows, &[0]).unwrap();
        assert_eq!(r.rho, 1.0);
        assert_eq!(r.t_star, 2);
        assert_eq!(r.affected, 4);
        assert_eq!(r.shifted, 4);
        assert!(r.pass);
        assert!(!r.prunes_answer);
        // Mass on the answer grows when the secondary mass sits on it.
        assert!(r.answer_mass_after > r.answer_mass_before);
    }

    #[test]
    fn prop3_partial_consensus_shifts_at_least_the_agreeing_heads() {
        // Two heads on token 3, one on token 0, one on token 1.
        let rows = vec![
            vec![0.1, 0.1, 0.1, 0.7],
            vec![0.2, 0.1, 0.0, 0.7],
            vec![0.6, 0.2, 0.1, 0.1],
            vec![0.1, 0.6, 0.2, 0.1],
        ];
        let r = verify_prop3(&rows, &[1]).unwrap();
        assert_eq!(r.rho, 0.5);
        assert_eq!(r.affected, 2);
        assert_eq!(r.shifted, 2);
        assert_eq!(r.min_required, 2);
        assert!(r.pass);
    }

    #[test]
    fn prop3_flags_pruning_the_answer_itself() {
        let rows = vec![vec![0.2, 0.8], vec![0.3, 0.7]];
        let r = verify_prop3(&rows, &[1]).unwrap();
        assert!(r.prunes_answer);
        assert!(r.pass);
        // Pruning the answer zeroes its mass.
        assert_eq!(r.answer_mass_after, 0.0);
    }

    #[test]
    fn prop3_random_instances_never_undershoot() {
        let mut rng = derived_rng(5, "prop3-fuzz", 0, 0);
        for _ in 0..100 {
            let heads = rng.gen_range(2..6);
            let width = rng.gen_range(2..8);
            let rows: Vec<Vec<f64>> = (0..heads)
                .map(|_| {
                    let raw: Vec<f64> = (0..width).map(|_| rng.gen::<f64>() + 0.01).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.into_iter().map(|w| w / sum).collect()
                })
                .collect();
            let r = verify_prop3(&rows, &[0]).unwrap();
            assert!(r.shifted >= r.min_required);
            assert!(r.rho >= 1.0 / heads as f64 - 1e-12 && r.rho <= 1.0);
        }
    }

    #[test]
    fn restricted_forward_on_the_full_graph_reproduces_the_masked_pass() {
        let c = cfg(2);
        let model = ToyModel::build(&c).unwrap();
        let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let full = SurvivalMask::full(
            Regime::Agnostic,
            PressKind::Chunk,
            c.num_layers,
            c.num_kv_heads,
            tokens.len(),
        )
        .unwrap();
        let out = model.forward(&tokens, Some(&full)).unwrap();
        let scores = score_expected_attention(&out.attention, None).unwrap();
        let mask = press_chunk(&scores, 0.5, 4).unwrap();
        let masked = model.forward(&tokens, Some(&mask)).unwrap();
        let graph = build_graph(&out.attention, 0.0).unwrap();
        let compressed = graph.compress(&mask).unwrap();
        let restricted =
            routing_restricted_forward(&model, &tokens, &compressed, &compressed).unwrap();
        for pos in 0..tokens.len() {
            for (a, b) in masked.hidden.final_level()[pos]
                .iter()
                .zip(&restricted.hidden.final_level()[pos])
            {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn restricted_forward_with_no_query_edges_is_self_only() {
        let c = cfg(1);
        let model = ToyModel::build(&c).unwrap();
        let tokens = [7u32, 8, 9, 10];
        let base = TokenRouteGraph::from_edges(
            1,
            tokens.len(),
            c.num_query_heads,
            true,
            0.0,
            &[(0, 3, 1, vec![0, 1, 2, 3])],
        )
        .unwrap();
        let empty =
            TokenRouteGraph::from_edges(1, tokens.len(), c.num_query_heads, true, 0.0, &[])
                .unwrap();
        let restricted = routing_restricted_forward(&model, &tokens, &empty, &base).unwrap();
        let self_only = model
            .forward_routed(&tokens, &|_, _, i| vec![i], &BTreeMap::new())
            .unwrap();
        for pos in 0..tokens.len() {
            assert_eq!(
                restricted.hidden.final_level()[pos],
                self_only.hidden.final_level()[pos]
            );
        }
    }

    #[test]
    fn restricted_forward_rejects_foreign_edges() {
        let c = cfg(1);
        let model = ToyModel::build(&c).unwrap();
        let tokens = [7u32, 8, 9, 10];
        let base = TokenRouteGraph::from_edges(
            1,
            tokens.len(),
            c.num_query_heads,
            true,
            0.0,
            &[(0, 3, 1, vec![0])],
        )
        .unwrap();
        let ticket = TokenRouteGraph::from_edges(
            1,
            tokens.len(),
            c.num_query_heads,
            true,
            0.0,
            &[(0, 3, 2, vec![0])],
        )
        .unwrap();
        assert!(matches!(
            routing_restricted_forward(&model, &tokens, &ticket, &base),
            Err(PropError::TicketNotContained { layer: 0, i: 3, j: 2 })
        ));
        // Same edge but a label the base never carried.
        let wide = TokenRouteGraph::from_edges(
            1,
            tokens.len(),
            c.num_query_heads,
            true,
            0.0,
            &[(0, 3, 1, vec![0, 1])],
        )
        .unwrap();
        assert!(matches!(
            routing_restricted_forward(&model, &tokens, &wide, &base),
            Err(PropError::TicketNotContained { .. })
        ));
    }

    #[test]
    fn shortest_path_ticket_preserves_the_retrieval_readout() {
        let c = cfg(2);
        let model = ToyModel::build(&c).unwrap();
        // The answer token 42 sits at position 2; the query is last.
        let tokens = [9u32, 8, 42, 7, 6, 5];
        let t_ans = [2usize];
        let q = tokens.len() - 1;
        let full = SurvivalMask::full(
            Regime::Agnostic,
            PressKind::Chunk,
            c.num_layers,
            c.num_kv_heads,
            tokens.len(),
        )
        .unwrap();
        let out = model.forward(&tokens, Some(&full)).unwrap();
        let graph = build_graph(&out.attention, 0.0).unwrap();
        let ticket = graph.extract_ticket(q, &t_ans).unwrap();
        assert!(ticket.answer_reachable(q, &t_ans).unwrap());

        let full_candidates: Vec<usize> = graph.reachable(q, 0).unwrap().positions().collect();
        let ticket_candidates: Vec<usize> =
            ticket.reachable(q, 0).unwrap().positions().collect();
        let from_full = model.nearest_token(42, &tokens, &full_candidates);
        let from_ticket = model.nearest_token(42, &tokens, &ticket_candidates);
        assert_eq!(from_full, Some(2));
        assert_eq!(from_ticket, Some(2));
        // The restricted pass itself runs on the ticket.
        routing_restricted_forward(&model, &tokens, &ticket, &graph).unwrap();
    }
}
