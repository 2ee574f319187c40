//! Model shape configuration and KV-cache memory accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("num_layers must be >= 1")]
    ZeroLayers,
    #[error("num_query_heads must be >= 1")]
    ZeroQueryHeads,
    #[error("num_kv_heads must be >= 1")]
    ZeroKvHeads,
    #[error("head_dim must be >= 1")]
    ZeroHeadDim,
    #[error("max_seq must be >= 1")]
    ZeroMaxSeq,
    #[error("bytes_per_element must be >= 1")]
    ZeroBytes,
    #[error("num_kv_heads ({kv}) must divide num_query_heads ({q})")]
    HeadGrouping { q: usize, kv: usize },
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("sequence length must be >= 1")]
    ZeroSeq,
    #[error("sequence length {seq} exceeds max_seq {max}")]
    SeqTooLong { seq: usize, max: usize },
    #[error("KV memory product overflows u64")]
    ArithmeticOverflow,
}

/// Shape of the toy attention stack. Query heads are partitioned into KV
/// groups: query head `h` reads the K/V tensors of KV head
/// `h / (num_query_heads / num_kv_heads)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub max_seq: usize,
    /// Bytes per stored K/V scalar (2 for fp16/bf16 deployments).
    pub bytes_per_element: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_layers == 0 {
            return Err(ConfigError::ZeroLayers);
        }
        if self.num_query_heads == 0 {
            return Err(ConfigError::ZeroQueryHeads);
        }
        if self.num_kv_heads == 0 {
            return Err(ConfigError::ZeroKvHeads);
        }
        if self.head_dim == 0 {
            return Err(ConfigError::ZeroHeadDim);
        }
        if self.max_seq == 0 {
            return Err(ConfigError::ZeroMaxSeq);
        }
        if self.bytes_per_element == 0 {
            return Err(ConfigError::ZeroBytes);
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(ConfigError::HeadGrouping {
                q: self.num_query_heads,
                kv: self.num_kv_heads,
            });
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    /// KV head serving query head `q_head`.
    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    /// Model (residual stream) width.
    pub fn model_dim(&self) -> usize {
        self.num_query_heads * self.head_dim
    }
}

/// Bytes held by the KV cache for `batch` sequences of length `seq`:
/// batch x seq x layers x kv_heads x head_dim x bytes_per_element.
/// Exact integer arithmetic; the product is computed in 128 bits and any
/// value that does not fit in u64 is an explicit error rather than a wrap.
pub fn kv_memory_bytes(cfg: &ModelConfig, batch: usize, seq: usize) -> Result<u64, ConfigError> {
    cfg.validate()?;
    if batch == 0 {
        return Err(ConfigError::ZeroBatch);
    }
    if seq == 0 {
        return Err(ConfigError::ZeroSeq);
    }
    if seq > cfg.max_seq {
        return Err(ConfigError::SeqTooLong {
            seq,
            max: cfg.max_seq,
        });
    }
    let factors = [
        batch as u128,
        seq as u128,
        cfg.num_layers as u128,
        cfg.num_kv_heads as u128,
        cfg.head_dim as u128,
        cfg.bytes_per_element as u128,
    ];
    let mut acc: u128 = 1;
    for f in factors {
        acc = acc.checked_mul(f).ok_or(ConfigError::ArithmeticOverflow)?;
    }
    u64::try_from(acc).map_err(|_| ConfigError::ArithmeticOverflow)
}
