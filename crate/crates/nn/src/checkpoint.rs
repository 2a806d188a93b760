//! Weight checkpoint files.
//!
//! Layout (little-endian): magic `RCNN1`, then for every parameter until end
//! of file: `u32` name length, UTF-8 name, `u32` rank, `rank x u32` extents,
//! `prod(extents) x f32` values.

use std::io::{ErrorKind, Read, Write};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RCNN1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for e in t.shape() {
            w.write_all(&(*e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| NnError::BadCheckpoint("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::BadCheckpoint(format!("bad magic {magic:?}")));
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match r.read_exact(&mut first) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(first) as usize;
        if name_len > 4096 {
            return Err(NnError::BadCheckpoint(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NnError::BadCheckpoint("name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(NnError::BadCheckpoint(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| NnError::BadCheckpoint(format!("{name}: truncated data")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}
