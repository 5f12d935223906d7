//! GTNS: the crate's tiny binary tensor format.
//!
//! Layout, all integers little-endian:
//!   magic  b"GTNS"
//!   u8     version (currently 1)
//!   u8     dtype   (0 = f32, 1 = f64)
//!   u8     rank
//!   u32*   dims (rank of them)
//!   bytes  row-major payload, dtype-sized elements
//!
//! Loads are strict: magic, version, dtype, rank, dims, and payload length
//! must all check out, and the dtype must match the requested scalar type.

use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Dtype, Scalar, Tensor};
use crate::error::{GraftError, Result};

const MAGIC: &[u8; 4] = b"GTNS";
const VERSION: u8 = 1;

pub fn save<F: Scalar>(path: &Path, t: &Tensor<F>) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * F::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(F::DTYPE as u8);
    if t.rank() > u8::MAX as usize {
        return Err(GraftError::dim("gtns", format!("rank {} exceeds format limit", t.rank())));
    }
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(GraftError::dim("gtns", format!("dim {d} exceeds u32")));
        }
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    let mut f = std::fs::File::create(path).map_err(|e| GraftError::io(path, e))?;
    f.write_all(&buf).map_err(|e| GraftError::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| GraftError::io(path, e))?;
    parse::<F>(&bytes).map_err(|detail| GraftError::parse(path, detail))
}

fn parse<F: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<F>, String> {
    if bytes.len() < 7 {
        return Err(format!("file too short ({} bytes)", bytes.len()));
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic, not a GTNS file".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let dtype = Dtype::from_byte(bytes[5]).ok_or(format!("unknown dtype byte {}", bytes[5]))?;
    if dtype != F::DTYPE {
        return Err(format!("dtype is {:?}, expected {:?}", dtype, F::DTYPE));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err("truncated dim table".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if d == 0 {
            return Err("zero dimension".into());
        }
        shape.push(d as usize);
    }
    let n = numel(&shape);
    let want = header + n * F::BYTES;
    if bytes.len() != want {
        return Err(format!("payload length {} != expected {}", bytes.len() - header, n * F::BYTES));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(F::read_le(&bytes[header + i * F::BYTES..]));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}
