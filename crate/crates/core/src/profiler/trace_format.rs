//! `SQZTRC01` binary prefill traces.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic       8 bytes  "SQZTRC01"
//! n_layer     u32
//! d_model     u32
//! prompt_len  u32
//! flags       u32      bit 0: compact (cosines only)
//! payload     full:    for layer, for token: A[d_model] f32, B[d_model] f32
//!             compact: for layer, for token: cosine f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{PrefillTrace, TraceData};
use crate::error::{Error, Result};

pub const TRACE_MAGIC: &[u8; 8] = b"SQZTRC01";
const HEADER_LEN: u64 = 8 + 4 * 4;
const FLAG_COMPACT: u32 = 1;

pub fn write_trace<W: Write>(trace: &PrefillTrace, mut out: W) -> Result<()> {
    let dim = |v: usize, name: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{name} {v} does not fit in u32")))
    };
    out.write_all(TRACE_MAGIC)?;
    out.write_all(&dim(trace.n_layer, "n_layer")?.to_le_bytes())?;
    out.write_all(&dim(trace.d_model, "d_model")?.to_le_bytes())?;
    out.write_all(&dim(trace.prompt_len, "prompt_len")?.to_le_bytes())?;
    let flags = if trace.is_compact() { FLAG_COMPACT } else { 0 };
    out.write_all(&flags.to_le_bytes())?;

    let mut buf = Vec::new();
    match &trace.data {
        TraceData::Full { pre, post } => {
            buf.reserve(8 * pre.len());
            for (a, b) in pre.chunks(trace.d_model).zip(post.chunks(trace.d_model)) {
                a.iter().chain(b).for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            }
        }
        TraceData::Compact { cosines } => {
            cosines.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_trace(bytes: &[u8]) -> Result<PrefillTrace> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != TRACE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            std::str::from_utf8(TRACE_MAGIC).unwrap()
        )));
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let (n_layer, d_model, prompt_len, flags) = (word(0), word(1), word(2), word(3));
    if flags & !FLAG_COMPACT != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let compact = flags & FLAG_COMPACT != 0;

    let entries = n_layer as u64 * prompt_len as u64;
    let scalars = if compact {
        Some(entries)
    } else {
        entries.checked_mul(2 * d_model as u64)
    };
    let expected = scalars
        .and_then(|s| s.checked_mul(4))
        .and_then(|s| s.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after a payload of {expected} bytes",
            actual - expected
        )));
    }

    let floats = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let (n_layer, d_model, prompt_len) = (n_layer as usize, d_model as usize, prompt_len as usize);
    if compact {
        PrefillTrace::compact(n_layer, d_model, prompt_len, floats.collect())
    } else {
        let n = n_layer * prompt_len * d_model;
        let (mut pre, mut post) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let all: Vec<f32> = floats.collect();
        for record in all.chunks(2 * d_model.max(1)) {
            pre.extend_from_slice(&record[..d_model]);
            post.extend_from_slice(&record[d_model..]);
        }
        PrefillTrace::full(n_layer, d_model, prompt_len, pre, post)
    }
}

pub fn save_trace(trace: &PrefillTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<PrefillTrace> {
    read_trace(&fs::read(path)?)
}
