//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "IFSNET1" | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 LE data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"IFSNET1";

fn put_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    put_u32(&mut w, tensors.len()).map_err(io)?;
    for (name, t) in tensors {
        put_u32(&mut w, name.len()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        put_u32(&mut w, t.shape().len()).map_err(io)?;
        for &d in t.shape() {
            put_u32(&mut w, d).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = get_u32(&mut r)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = get_u32(&mut r)?;
        let dims = (0..rank)
            .map(|_| get_u32(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write(std::io::BufWriter::new(f), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read(std::io::BufReader::new(f))
}
