//! WMCK model checkpoints.
//!
//! ```text
//! "WMCK" | u32 version=1 | u32 n_dims | u32 × n_dims layer sizes (input … 1)
//! u32 attention_dim (0 = no attention block)
//! f64 × n_params: per layer W (row-major, n_out × n_in) then b;
//!                 then V (L × M, row-major) and w (L) when present
//! ```
//!
//! Little-endian throughout. The file must end exactly after the last value.

use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::formats::{read_bytes, read_magic, read_u32, write_bytes, FORMAT_VERSION};
use crate::model::{AttentionHead, FcHead, Model};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WMCK";
const MAX_DIMS: u32 = 64;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let dims = model.head.dims();
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 8 * model.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(dims.len() as u32).unwrap();
    for d in dims {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    let l = model.attention.as_ref().map_or(0, |a| a.l);
    out.write_u32::<LittleEndian>(l as u32).unwrap();
    for t in model.tensors() {
        for &v in t {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, CHECKPOINT_MAGIC)?;
    let version = read_u32(&mut cur)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n_dims = read_u32(&mut cur)?;
    if !(2..=MAX_DIMS).contains(&n_dims) {
        return Err(Error::Format(format!("implausible layer count {n_dims}")));
    }
    let dims = (0..n_dims)
        .map(|_| read_u32(&mut cur).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let l = read_u32(&mut cur)? as usize;
    if dims.contains(&0) || dims[dims.len() - 1] != 1 {
        return Err(Error::Format(format!("invalid layer sizes {dims:?}")));
    }
    if l > 0 && dims.len() < 3 {
        return Err(Error::Format("attention block needs a hidden layer".into()));
    }
    // Size check before allocating so a corrupted header cannot drive memory use.
    let m = dims[dims.len() - 2];
    let n_params = dims
        .windows(2)
        .try_fold(0usize, |acc, d| d[0].checked_mul(d[1])?.checked_add(d[1])?.checked_add(acc))
        .and_then(|n| n.checked_add(l.checked_mul(m)?.checked_add(l)?))
        .ok_or_else(|| Error::Format("checkpoint dimensions overflow".into()))?;
    let remaining = bytes.len() - cur.position() as usize;
    if n_params.checked_mul(8) != Some(remaining) {
        return Err(Error::Corrupt(format!(
            "checkpoint payload is {remaining} bytes, header implies {n_params} values"
        )));
    }
    let head = FcHead::zeros(&dims)?;
    let attention = (l > 0).then(|| AttentionHead {
        l,
        m,
        v: vec![0.0; l * m],
        w: vec![0.0; l],
    });
    let mut model = Model { head, attention };
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = cur.read_f64::<LittleEndian>().map_err(|_| Error::Corrupt("truncated checkpoint".into()))?;
        }
    }
    if model.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Corrupt("checkpoint holds non-finite parameters".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&read_bytes(path)?)
}
