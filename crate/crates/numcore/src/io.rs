//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "NCT1"
//! rank    u32
//! dims    rank x u64
//! payload product(dims) x f64 (IEEE-754, little-endian), row-major
//! ```
//!
//! A scalar has rank 0 and a one-value payload. Several tensors may be
//! written back to back into one stream.

use std::io::{Read, Write};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NCT1";
const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word);
    if rank > MAX_RANK {
        return Err(NumError::Format(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut dword = [0u8; 8];
    for _ in 0..rank {
        input.read_exact(&mut dword)?;
        shape.push(u64::from_le_bytes(dword) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        input.read_exact(&mut dword)?;
        data.push(f64::from_le_bytes(dword));
    }
    Tensor::new(shape, data).map_err(|e| NumError::Format(e.to_string()))
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}
