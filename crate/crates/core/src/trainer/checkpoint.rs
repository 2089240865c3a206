//! `AMCK1` checkpoint files: a flat list of named `f64` matrices.
//!
//! ```text
//! b"AMCK1\n"
//! u32 block_count
//! per block: u32 name_len, name (UTF-8), u32 rows, u32 cols, f64 × rows·cols (row-major)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{write_atomically, Reader};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 6] = b"AMCK1\n";

pub fn encode_checkpoint(blocks: &[(String, Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes into a name → matrix map; duplicate names are a format error.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Matrix>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    let count = r.u32("block count")? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let start = r.offset;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| Error::format(start + 4, "block name is not UTF-8"))?
            .to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let payload = r.take(rows * cols * 8, &format!("payload of '{name}'"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_vec(rows, cols, data)?;
        if out.insert(name.clone(), m).is_some() {
            return Err(Error::format(start, format!("duplicate block '{name}'")));
        }
    }
    r.finish()?;
    Ok(out)
}

pub fn write_checkpoint(path: &Path, blocks: &[(String, Matrix)]) -> Result<()> {
    write_atomically(path, &encode_checkpoint(blocks))
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Matrix>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Looks up `name` and checks its shape against `expected`.
pub fn take_block(
    blocks: &BTreeMap<String, Matrix>,
    name: &str,
    expected: (usize, usize),
) -> Result<Matrix> {
    let m = blocks
        .get(name)
        .ok_or_else(|| Error::Contract(format!("checkpoint is missing block '{name}'")))?;
    if m.shape() != expected {
        return Err(Error::Contract(format!(
            "block '{name}' has shape {:?}, expected {:?}",
            m.shape(),
            expected
        )));
    }
    Ok(m.clone())
}
