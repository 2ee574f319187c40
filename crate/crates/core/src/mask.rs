//! Per-head KV survival masks produced by compression presses.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask must cover at least one layer and one head")]
    Empty,
    #[error("layer {layer} head {head}: survivor {pos} out of range for seq_len {seq_len}")]
    SurvivorOutOfRange {
        layer: usize,
        head: usize,
        pos: usize,
        seq_len: usize,
    },
    #[error("alpha {0} outside [0, 1]")]
    AlphaRange(f64),
    #[error("ragged head sets: layer {layer} has {got} heads, expected {expected}")]
    RaggedHeads {
        layer: usize,
        got: usize,
        expected: usize,
    },
    #[error("extension target {target} shorter than current seq_len {seq_len}")]
    ShrinkingExtension { target: usize, seq_len: usize },
}

/// Whether the press saw the query before pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Agnostic,
    Aware,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Agnostic => "agnostic",
            Regime::Aware => "aware",
        }
    }
}

/// Compression policy that produced a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressKind {
    Chunk,
    Adaptive,
}

impl PressKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PressKind::Chunk => "chunk",
            PressKind::Adaptive => "adaptive",
        }
    }
}

/// Surviving KV positions per (layer, KV head) at one compression ratio.
///
/// Survival here is strict cache membership. A position that has been evicted
/// everywhere can still be read by its own query row through the forward
/// pass's self-fallback; that fallback never counts as survival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalMask {
    pub alpha: f64,
    pub regime: Regime,
    pub press_kind: PressKind,
    pub seq_len: usize,
    /// survivors[layer][kv_head] is a sorted ascending position set.
    survivors: Vec<Vec<Vec<usize>>>,
}

impl SurvivalMask {
    pub fn new(
        alpha: f64,
        regime: Regime,
        press_kind: PressKind,
        seq_len: usize,
        survivors: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self, MaskError> {
        if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
            return Err(MaskError::AlphaRange(alpha));
        }
        if survivors.is_empty() || survivors[0].is_empty() {
            return Err(MaskError::Empty);
        }
        let heads = survivors[0].len();
        let mut sorted = survivors;
        for (layer, per_head) in sorted.iter_mut().enumerate() {
            if per_head.len() != heads {
                return Err(MaskError::RaggedHeads {
                    layer,
                    got: per_head.len(),
                    expected: heads,
                });
            }
            for (head, set) in per_head.iter_mut().enumerate() {
                let dedup: BTreeSet<usize> = set.iter().copied().collect();
                if let Some(&pos) = dedup.iter().next_back() {
                    if pos >= seq_len {
                        return Err(MaskError::SurvivorOutOfRange {
                            layer,
                            head,
                            pos,
                            seq_len,
                        });
                    }
                }
                *set = dedup.into_iter().collect();
            }
        }
        Ok(SurvivalMask {
            alpha,
            regime,
            press_kind,
            seq_len,
            survivors: sorted,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.survivors.len()
    }

    pub fn kv_heads(&self) -> usize {
        self.survivors[0].len()
    }

    pub fn survivors(&self, layer: usize, kv_head: usize) -> &[usize] {
        &self.survivors[layer][kv_head]
    }

    /// Strict cache membership of `pos` in (layer, kv_head).
    pub fn survives(&self, layer: usize, kv_head: usize, pos: usize) -> bool {
        self.survivors[layer][kv_head].binary_search(&pos).is_ok()
    }

    /// Membership indicator keyed by a flattened head index
    /// (`layer * kv_heads + head`), the indexing used when heads from all
    /// layers are treated as one pool.
    pub fn survival_indicator(&self, pos: usize, flat_head: usize) -> u8 {
        let heads = self.kv_heads();
        let layer = flat_head / heads;
        let head = flat_head % heads;
        u8::from(self.survives(layer, head, pos))
    }

    /// True when `pos` is absent from every (layer, head) survivor set.
    pub fn globally_evicted(&self, pos: usize) -> bool {
        self.survivors
            .iter()
            .all(|layer| layer.iter().all(|set| set.binary_search(&pos).is_err()))
    }

    /// All-survive mask, the identity press.
    pub fn full(
        regime: Regime,
        press_kind: PressKind,
        num_layers: usize,
        kv_heads: usize,
        seq_len: usize,
    ) -> Result<Self, MaskError> {
        let all: Vec<usize> = (0..seq_len).collect();
        SurvivalMask::new(
            0.0,
            regime,
            press_kind,
            seq_len,
            vec![vec![all; kv_heads]; num_layers],
        )
    }

    /// Grow the mask to a longer sequence; positions arriving after
    /// compression (for example the query appended post-pruning) always
    /// survive in every head.
    pub fn extended_to(&self, target_len: usize) -> Result<Self, MaskError> {
        if target_len < self.seq_len {
            return Err(MaskError::ShrinkingExtension {
                target: target_len,
                seq_len: self.seq_len,
            });
        }
        let mut survivors = self.survivors.clone();
        for per_head in &mut survivors {
            for set in per_head {
                set.extend(self.seq_len..target_len);
            }
        }
        SurvivalMask::new(
            self.alpha,
            self.regime,
            self.press_kind,
            target_len,
            survivors,
        )
    }

    /// Nested-mask check: every survivor set of `self` contains the matching
    /// set of `tighter`.
    pub fn contains(&self, tighter: &SurvivalMask) -> bool {
        if self.num_layers() != tighter.num_layers() || self.kv_heads() != tighter.kv_heads() {
            return false;
        }
        self.survivors
            .iter()
            .zip(&tighter.survivors)
            .all(|(a, b)| {
                a.iter().zip(b).all(|(big, small)| {
                    small.iter().all(|p| big.binary_search(p).is_ok())
                })
            })
    }

    pub fn to_json(&self) -> String {
        let layers: Vec<MaskLayerEntry> = self
            .survivors
            .iter()
            .enumerate()
            .flat_map(|(layer, per_head)| {
                per_head.iter().enumerate().map(move |(head, set)| MaskLayerEntry {
                    layer,
                    head,
                    survivors: set.clone(),
                })
            })
            .collect();
        let doc = MaskDocument {
            alpha: self.alpha,
            regime: self.regime,
            press_kind: self.press_kind,
            seq_len: self.seq_len,
            num_layers: self.num_layers(),
            kv_heads: self.kv_heads(),
            layers,
        };
        serde_json::to_string_pretty(&doc).expect("mask document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MaskJsonError> {
        let doc: MaskDocument = serde_json::from_str(text)?;
        let mut survivors = vec![vec![Vec::new(); doc.kv_heads]; doc.num_layers];
        for entry in doc.layers {
            if entry.layer >= doc.num_layers || entry.head >= doc.kv_heads {
                return Err(MaskJsonError::EntryOutOfRange {
                    layer: entry.layer,
                    head: entry.head,
                });
            }
            survivors[entry.layer][entry.head] = entry.survivors;
        }
        SurvivalMask::new(
            doc.alpha,
            doc.regime,
            doc.press_kind,
            doc.seq_len,
            survivors,
        )
        .map_err(MaskJsonError::Invalid)
    }
}

#[derive(Debug, Error)]
pub enum MaskJsonError {
    #[error("mask JSON parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("mask JSON entry addresses layer {layer} head {head} outside declared dims")]
    EntryOutOfRange { layer: usize, head: usize },
    #[error(transparent)]
    Invalid(#[from] MaskError),
}

#[derive(Serialize, Deserialize)]
struct MaskDocument {
    alpha: f64,
    regime: Regime,
    press_kind: PressKind,
    seq_len: usize,
    num_layers: usize,
    kv_heads: usize,
    layers: Vec<MaskLayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct MaskLayerEntry {
    layer: usize,
    head: usize,
    survivors: Vec<usize>,
}
