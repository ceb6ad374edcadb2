//! Binary dump of one language's candidate sets, for hidden states produced
//! outside this crate.
//!
//! ```text
//! "HSAD"         4 bytes
//! version        u32 = 1
//! layers         u32
//! h              u32
//! Q              u64
//! id length      u8, then that many UTF-8 bytes
//! payload        per layer, Q x h f32, row-major
//! ```
//!
//! All integers and floats are little-endian. Values are stored as f32, so a
//! write rounds each entry to the nearest f32; data that already is
//! f32-representable (anything read from a dump) round-trips bit-exactly.

use std::io::{Read, Write};

use super::CandidateSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const HSA_MAGIC: &[u8; 4] = b"HSAD";
pub const HSA_VERSION: u32 = 1;

/// Writes the per-layer sets of a single language, ordered by layer.
pub fn write_hsa_dump(sets: &[CandidateSet], mut out: impl Write) -> Result<()> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidInput("no candidate sets to dump".into()))?;
    let (q, h) = first.vectors.shape();
    for (i, s) in sets.iter().enumerate() {
        if s.vectors.shape() != (q, h) || s.language != first.language || s.layer != i {
            return Err(Error::InvalidInput(
                "dump needs one language with consistent Q, h and layers 0..n".into(),
            ));
        }
    }
    let id = first.language.as_bytes();
    let id_len = u8::try_from(id.len())
        .map_err(|_| Error::InvalidInput("language id longer than 255 bytes".into()))?;

    let mut buf = Vec::with_capacity(25 + id.len() + sets.len() * q * h * 4);
    buf.extend_from_slice(HSA_MAGIC);
    buf.extend_from_slice(&HSA_VERSION.to_le_bytes());
    buf.extend_from_slice(&(sets.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(q as u64).to_le_bytes());
    buf.push(id_len);
    buf.extend_from_slice(id);
    for s in sets {
        for &v in s.vectors.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn truncated() -> Error {
    Error::Format("HSA dump truncated".into())
}

/// Reads a dump written by [`write_hsa_dump`]; nothing is returned unless the
/// whole file parses.
pub fn read_hsa_dump(mut input: impl Read) -> Result<Vec<CandidateSet>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        let out = bytes.get(pos..end).ok_or_else(truncated)?;
        pos = end;
        Ok(out)
    };
    if take(4)? != HSA_MAGIC {
        return Err(Error::Format("not an HSA dump (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != HSA_VERSION {
        return Err(Error::Format(format!("unsupported HSA dump version {version}")));
    }
    let layers = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let q = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let q = usize::try_from(q).map_err(|_| Error::Format("Q does not fit in memory".into()))?;
    let id_len = take(1)?[0] as usize;
    let language = std::str::from_utf8(take(id_len)?)
        .map_err(|_| Error::Format("language id is not UTF-8".into()))?
        .to_string();
    if layers == 0 || h == 0 || q == 0 {
        return Err(Error::Format("HSA dump with an empty dimension".into()));
    }
    let per_layer = q
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("HSA dump dimensions overflow".into()))?;
    let mut sets = Vec::with_capacity(layers);
    for layer in 0..layers {
        let data = take(per_layer)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let vectors = Matrix::from_vec(q, h, data).map_err(|e| Error::Format(e.to_string()))?;
        sets.push(CandidateSet::new(language.clone(), layer, vectors)?);
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after HSA dump".into()));
    }
    Ok(sets)
}
