//! Binary attention dump: magic `ATN1`, little-endian u32 layers/heads/seq,
//! a causal-flag byte, then layers x heads x seq x seq f32 weights, row-major
//! with layer as the slowest index and head next.
//!
//! Weights live in f64 in memory and are stored as f32, so a saved tensor
//! reloads to the f32 rounding of its values exactly and a dump round-trips
//! through load/save byte for byte. Row sums are validated against the wider
//! f32 budget on load.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::attention::{AttentionTensor, TensorError};
use crate::tol;

const MAGIC: &[u8; 4] = b"ATN1";
const HEADER_LEN: usize = 4 + 3 * 4 + 1;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header (need {HEADER_LEN} bytes starting with ATN1 and a 0/1 causal flag)")]
    MalformedHeader,
    #[error("dimension mismatch: header promises {expected} weight bytes, file carries {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn to_bytes(tensor: &AttentionTensor) -> Vec<u8> {
    let l = tensor.layers();
    let h = tensor.heads();
    let s = tensor.seq_len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * l * h * s * s);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(s as u32).to_le_bytes());
    out.push(u8::from(tensor.causal()));
    for layer in 0..l {
        for head in 0..h {
            for row in 0..s {
                for &w in tensor.row(layer, head, row) {
                    out.extend_from_slice(&(w as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<AttentionTensor, DumpError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(DumpError::MalformedHeader);
    }
    let read_u32 = |off: usize| {
        u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize
    };
    let l = read_u32(4);
    let h = read_u32(8);
    let s = read_u32(12);
    let causal = match bytes[16] {
        0 => false,
        1 => true,
        _ => return Err(DumpError::MalformedHeader),
    };
    if l == 0 || h == 0 || s == 0 {
        return Err(DumpError::MalformedHeader);
    }
    let expected = l
        .checked_mul(h)
        .and_then(|x| x.checked_mul(s))
        .and_then(|x| x.checked_mul(s))
        .and_then(|x| x.checked_mul(4))
        .ok_or(DumpError::MalformedHeader)?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        return Err(DumpError::DimensionMismatch { expected, actual });
    }
    let mut off = HEADER_LEN;
    let mut weights = Vec::with_capacity(l);
    for _ in 0..l {
        let mut per_head = Vec::with_capacity(h);
        for _ in 0..h {
            let mut m = Vec::with_capacity(s * s);
            for _ in 0..s * s {
                let w = f32::from_le_bytes([
                    bytes[off],
                    bytes[off + 1],
                    bytes[off + 2],
                    bytes[off + 3],
                ]);
                m.push(w as f64);
                off += 4;
            }
            per_head.push(m);
        }
        weights.push(per_head);
    }
    // Dumps carry no KV grouping; treat every head as its own KV head.
    Ok(AttentionTensor::from_rows(
        weights,
        s,
        causal,
        h,
        tol::ROW_SUM_DUMP,
    )?)
}

pub fn save_attention_dump(tensor: &AttentionTensor, path: &Path) -> Result<(), DumpError> {
    fs::write(path, to_bytes(tensor))?;
    Ok(())
}

pub fn load_attention_dump(path: &Path) -> Result<AttentionTensor, DumpError> {
    from_bytes(&fs::read(path)?)
}
