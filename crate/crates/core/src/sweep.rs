//! End-to-end compression sweep over synthetic examples.
//!
//! For one example the pipeline is: tokenize the passage, run a scoring
//! forward pass (passage only in the agnostic regime, passage plus every
//! question in the aware regime), press the passage prefix of the scores into
//! a survival mask, then for each QA pair run a compressed forward pass over
//! passage + question, build the routing graph from the compressed attention,
//! and grade a retrieval readout against the gold answer.
//!
//! The readout is deliberately not a language model. It looks up, for each
//! gold answer token, the reachable passage position whose embedding is
//! nearest to that token's embedding. Identical words embed identically, so
//! retrieval is exact whenever the gold position is reachable and degrades to
//! a wrong surviving word (or to silence) as routes are evicted. That gives
//! the grading pipeline a mechanical failure mode that tracks routing loss
//! rather than linguistic ability.

use thiserror::Error;

use crate::attention::{ForwardError, TensorError, ToyModel};
use crate::graph::{build_graph, GraphError};
use crate::mask::MaskError;
use crate::metrics::{
    consensus, eviction_rate, ger, grade_answer, normalize_tokens, MetricsError, SweepRecord,
    DEFAULT_UNKNOWN_MARKERS,
};
use crate::mask::{PressKind, Regime, SurvivalMask};
use crate::press::{
    press_adaptive, press_chunk, score_expected_attention, PressError, ScoreTensor,
};
use crate::synthdata::{passage_tokens, SynthExample};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("alpha grid is empty")]
    EmptyAlphaGrid,
    #[error("no press kinds selected")]
    NoPress,
    #[error("no regimes selected")]
    NoRegime,
    #[error("passage tokenizes to no words")]
    EmptyPassage,
    #[error("question {qa_index} tokenizes to no words")]
    EmptyQuestion { qa_index: usize },
    #[error("sequence of {len} tokens exceeds model max_seq {max_seq}")]
    TooLong { len: usize, max_seq: usize },
    #[error(transparent)]
    Press(#[from] PressError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Knobs that stay fixed across a sweep.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    /// Chunk size for the chunked press.
    pub chunk_size: usize,
    /// Routing-graph edge threshold; `None` means 1/seq_len of each
    /// measurement pass.
    pub epsilon: Option<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            chunk_size: 4,
            epsilon: None,
        }
    }
}

/// Stable token id for a normalized word (FNV-1a folded to 32 bits). Equal
/// words map to equal ids, which is what makes the retrieval readout exact on
/// surviving gold tokens.
pub fn token_id(word: &str) -> u32 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h ^ (h >> 32)) as u32
}

/// Passage and question token ids for one example.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub words: Vec<String>,
    pub ids: Vec<u32>,
    pub question_ids: Vec<Vec<u32>>,
}

pub fn prepare_example(example: &SynthExample) -> Result<PreparedExample, SweepError> {
    let words = passage_tokens(&example.passage);
    if words.is_empty() {
        return Err(SweepError::EmptyPassage);
    }
    let ids = words.iter().map(|w| token_id(w)).collect();
    let mut question_ids = Vec::with_capacity(example.qa_pairs.len());
    for (qa_index, qa) in example.qa_pairs.iter().enumerate() {
        let q_words = normalize_tokens(&qa.question);
        if q_words.is_empty() {
            return Err(SweepError::EmptyQuestion { qa_index });
        }
        question_ids.push(q_words.iter().map(|w| token_id(w)).collect());
    }
    Ok(PreparedExample {
        words,
        ids,
        question_ids,
    })
}

/// For each normalized gold token, retrieve the candidate passage position
/// with the nearest embedding and emit that position's word. Empty candidate
/// set yields the empty string.
pub fn retrieval_readout(
    model: &ToyModel,
    passage_words: &[String],
    tokens: &[u32],
    candidates: &[usize],
    gold: &str,
) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for key in normalize_tokens(gold) {
        if let Some(pos) = model.nearest_token(token_id(&key), tokens, candidates) {
            parts.push(&passage_words[pos]);
        }
    }
    parts.join(" ")
}

/// Eviction scores over the passage prefix. The agnostic press never sees a
/// question; the aware press sees every question and scores only their rows.
pub fn passage_scores(
    model: &ToyModel,
    prep: &PreparedExample,
    regime: Regime,
) -> Result<ScoreTensor, SweepError> {
    let passage_len = prep.ids.len();
    let scoring_tokens: Vec<u32> = match regime {
        Regime::Agnostic => prep.ids.clone(),
        Regime::Aware => {
            let mut t = prep.ids.clone();
            for q in &prep.question_ids {
                t.extend_from_slice(q);
            }
            t
        }
    };
    let max_seq = model.config().max_seq;
    if scoring_tokens.len() > max_seq {
        return Err(SweepError::TooLong {
            len: scoring_tokens.len(),
            max_seq,
        });
    }
    let scoring_out = model.forward(&scoring_tokens, None)?;
    let span = match regime {
        Regime::Agnostic => None,
        Regime::Aware => Some(passage_len..scoring_tokens.len()),
    };
    Ok(score_expected_attention(&scoring_out.attention, span)?.prefix(passage_len)?)
}

/// The survival mask one (press, regime, alpha) cell would use for this
/// example; `sweep_example` computes the same masks internally.
pub fn press_mask_for_example(
    model: &ToyModel,
    prep: &PreparedExample,
    press: PressKind,
    regime: Regime,
    alpha: f64,
    settings: &SweepSettings,
) -> Result<SurvivalMask, SweepError> {
    let scores = passage_scores(model, prep, regime)?;
    Ok(match press {
        PressKind::Chunk => press_chunk(&scores, alpha, settings.chunk_size)?,
        PressKind::Adaptive => press_adaptive(&scores, alpha)?,
    })
}

/// Runs the full press/measure/grade pipeline for one example and returns one
/// record per (press, regime, alpha, QA pair), in that nesting order.
pub fn sweep_example(
    model: &ToyModel,
    example: &SynthExample,
    presses: &[PressKind],
    regimes: &[Regime],
    alphas: &[f64],
    settings: &SweepSettings,
) -> Result<Vec<SweepRecord>, SweepError> {
    if alphas.is_empty() {
        return Err(SweepError::EmptyAlphaGrid);
    }
    if presses.is_empty() {
        return Err(SweepError::NoPress);
    }
    if regimes.is_empty() {
        return Err(SweepError::NoRegime);
    }
    let prep = prepare_example(example)?;
    let passage_len = prep.ids.len();
    let max_seq = model.config().max_seq;

    let mut records = Vec::new();
    for &press in presses {
        for &regime in regimes {
            let scores = passage_scores(model, &prep, regime)?;

            for &alpha in alphas {
                let mask = match press {
                    PressKind::Chunk => press_chunk(&scores, alpha, settings.chunk_size)?,
                    PressKind::Adaptive => press_adaptive(&scores, alpha)?,
                };
                // Eviction is reported over the passage, the only region the
                // press may touch.
                let passage_eviction = eviction_rate(&mask)?;

                for (qa_index, qa) in example.qa_pairs.iter().enumerate() {
                    let mut tokens = prep.ids.clone();
                    tokens.extend_from_slice(&prep.question_ids[qa_index]);
                    if tokens.len() > max_seq {
                        return Err(SweepError::TooLong {
                            len: tokens.len(),
                            max_seq,
                        });
                    }
                    let full_mask = mask.extended_to(tokens.len())?;
                    let out = model.forward(&tokens, Some(&full_mask))?;
                    let epsilon = settings
                        .epsilon
                        .unwrap_or(1.0 / tokens.len() as f64);
                    let graph = build_graph(&out.attention, epsilon)?;
                    let q = tokens.len() - 1;
                    let reach = graph.reachable(q, 0)?;
                    let candidates: Vec<usize> =
                        reach.positions().filter(|&p| p < passage_len).collect();

                    // Unknown-gold pairs have no grounded span: nothing is
                    // required, so erasure is 0 and reachability vacuously
                    // holds.
                    let (ger_value, reachable) = if qa.t_ans.is_empty() {
                        (0.0, true)
                    } else {
                        (
                            ger(&full_mask, &qa.t_ans)?,
                            graph.answer_reachable(q, &qa.t_ans)?,
                        )
                    };

                    let prediction =
                        retrieval_readout(model, &prep.words, &tokens, &candidates, &qa.gold);
                    let (grade, f1) =
                        grade_answer(&prediction, &qa.gold, &DEFAULT_UNKNOWN_MARKERS);

                    let layers = out.attention.layers();
                    let heads = out.attention.heads();
                    let mut consensus_by_layer = Vec::with_capacity(layers);
                    for l in 0..layers {
                        let tops: Vec<usize> =
                            (0..heads).map(|h| out.attention.top_token(l, h, q)).collect();
                        consensus_by_layer.push(consensus(&tops)?);
                    }

                    records.push(SweepRecord {
                        example_id: example.id.clone(),
                        task: example.task.as_str().to_string(),
                        qa_index,
                        press,
                        regime,
                        alpha,
                        seq_len: tokens.len(),
                        eviction_rate: passage_eviction,
                        ger: ger_value,
                        answer_reachable: reachable,
                        grade,
                        f1,
                        consensus_by_layer,
                    });
                }
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::metrics::Grade;
    use crate::synthdata::{gen_knowledge_manipulation, EntityPool};

    fn small_model() -> ToyModel {
        let cfg = ModelConfig {
            num_layers: 2,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            max_seq: 128,
            bytes_per_element: 2,
            seed: 7,
        };
        ToyModel::build(&cfg).unwrap()
    }

    fn example() -> SynthExample {
        gen_knowledge_manipulation(&EntityPool::canonical(), 3, 0)
            .unwrap()
            .remove(1)
    }

    #[test]
    fn token_id_is_stable_and_word_keyed() {
        assert_eq!(token_id("lisbon"), token_id("lisbon"));
        assert_ne!(token_id("lisbon"), token_id("porto"));
    }

    #[test]
    fn alpha_zero_evicts_nothing_and_reads_out_exactly() {
        let model = small_model();
        let ex = example();
        let records = sweep_example(
            &model,
            &ex,
            &[PressKind::Chunk, PressKind::Adaptive],
            &[Regime::Agnostic, Regime::Aware],
            &[0.0],
            &SweepSettings::default(),
        )
        .unwrap();
        assert_eq!(records.len(), 2 * 2 * ex.qa_pairs.len());
        for r in &records {
            assert_eq!(r.eviction_rate, 0.0);
            assert_eq!(r.ger, 0.0);
            assert!(r.answer_reachable);
            assert_eq!(r.grade, Grade::Correct, "qa {} not exact", r.qa_index);
            assert_eq!(r.f1, 1.0);
            for c in &r.consensus_by_layer {
                assert!(*c > 0.0 && *c <= 1.0);
            }
        }
    }

    #[test]
    fn alpha_one_loses_every_answer() {
        let model = small_model();
        let ex = example();
        let records = sweep_example(
            &model,
            &ex,
            &[PressKind::Chunk],
            &[Regime::Agnostic],
            &[1.0],
            &SweepSettings::default(),
        )
        .unwrap();
        for r in &records {
            assert_eq!(r.eviction_rate, 1.0);
            assert_eq!(r.ger, 1.0);
            assert!(!r.answer_reachable);
            assert_ne!(r.grade, Grade::Correct);
        }
    }

    #[test]
    fn unreachable_answers_never_grade_correct() {
        // Zero threshold makes the graph see every surviving route, so an
        // unreachable answer means its tokens are gone and retrieval must
        // return different surviving words.
        let model = small_model();
        let ex = example();
        let settings = SweepSettings {
            chunk_size: 4,
            epsilon: Some(0.0),
        };
        let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let records = sweep_example(
            &model,
            &ex,
            &[PressKind::Chunk, PressKind::Adaptive],
            &[Regime::Agnostic, Regime::Aware],
            &alphas,
            &settings,
        )
        .unwrap();
        let mut saw_unreachable = false;
        for r in &records {
            if !r.answer_reachable {
                saw_unreachable = true;
                assert_ne!(r.grade, Grade::Correct, "alpha {} qa {}", r.alpha, r.qa_index);
            }
        }
        assert!(saw_unreachable);
    }

    #[test]
    fn sweep_is_deterministic() {
        let model = small_model();
        let ex = example();
        let run = || {
            sweep_example(
                &model,
                &ex,
                &[PressKind::Chunk],
                &[Regime::Aware],
                &[0.3, 0.7],
                &SweepSettings::default(),
            )
            .unwrap()
            .iter()
            .map(|r| r.to_csv_row())
            .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ger_is_monotone_in_alpha_per_pair() {
        let model = small_model();
        let ex = example();
        let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let records = sweep_example(
            &model,
            &ex,
            &[PressKind::Chunk, PressKind::Adaptive],
            &[Regime::Agnostic],
            &alphas,
            &SweepSettings::default(),
        )
        .unwrap();
        for press in [PressKind::Chunk, PressKind::Adaptive] {
            for qa_index in 0..ex.qa_pairs.len() {
                let series: Vec<f64> = records
                    .iter()
                    .filter(|r| r.press == press && r.qa_index == qa_index)
                    .map(|r| r.ger)
                    .collect();
                assert_eq!(series.len(), alphas.len());
                for w in series.windows(2) {
                    assert!(w[1] >= w[0]);
                }
            }
        }
    }
}
