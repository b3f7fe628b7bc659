//! Binary tensor snapshots.
//!
//! Layout: rank as little-endian `u64`, each dim as little-endian `u64`,
//! then the row-major values as little-endian IEEE-754 `f64`.

use std::io::{Read, Write};

use super::{AutodiffError, Tensor};

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, AutodiffError> {
    let rank = read_u64(r)? as usize;
    if rank > 16 {
        return Err(AutodiffError::Snapshot(format!("implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| AutodiffError::Snapshot(e.to_string()))?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new_allow_nonfinite(shape, data)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.rank() + t.numel()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor, AutodiffError> {
    read_tensor(&mut bytes)
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64, AutodiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| AutodiffError::Snapshot(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}
