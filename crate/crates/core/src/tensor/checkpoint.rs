//! Flat binary parameter container.
//!
//! Layout: the magic `TRTS1`, then one record per parameter until EOF:
//! `u64` name length, UTF-8 name, `u64` rank, `rank` x `u64` extents,
//! `numel` x `f64` values. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TRTS1";

pub fn write_checkpoint<W: Write>(params: &ParamStore, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn format_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamStore> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic).map_err(format_err)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut store = ParamStore::new();
    loop {
        let mut first = [0u8; 8];
        match input.read(&mut first[..1]) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => return Err(format_err(e)),
        }
        input.read_exact(&mut first[1..]).map_err(format_err)?;
        let name_len = u64::from_le_bytes(first) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(format_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u64(&mut input).map_err(format_err)? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut input).map_err(format_err)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        input.read_exact(&mut bytes).map_err(format_err)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
