//! `DRFCKPT1` parameter files.
//!
//! Layout: the 8 magic bytes, then per parameter a little-endian `u32` name
//! length, the UTF-8 name, a `u32` rank, `rank` `u32` extents, and the
//! row-major payload as little-endian `f64`. The file ends after the last
//! parameter.

use std::io::{ErrorKind, Read, Write};

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRFCKPT1";

pub fn write_checkpoint<W: Write>(mut w: W, params: &[Parameter]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&u32_of(name.len())?.to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&u32_of(shape.len())?.to_le_bytes())?;
        for &e in shape {
            w.write_all(&u32_of(e)?.to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(params: &[Parameter]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<Parameter>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint", "truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut params = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; name_len];
        read_field(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        read_field(&mut r, &mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(Parameter::new(name, Tensor::new(shape, data)?));
    }
    Ok(params)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{v} does not fit in u32")))
}

fn read_field<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("checkpoint", "truncated parameter record"))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_field(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
