//! Flat binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "TJF1"
//! version  u32      1
//! then, until end of file, one record per parameter:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rank     u32
//!   dims     rank x u64
//!   payload  product(dims) x f64
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{ErrorKind, Read, Write};

pub const MAGIC: &[u8; 4] = b"TJF1";
pub const VERSION: u32 = 1;

pub fn write_params<'a, W: Write>(
    mut out: W,
    params: impl IntoIterator<Item = (String, &'a Tensor)>,
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in params {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads every record in file order.
pub fn read_params<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    loop {
        let name_len = match read_u32(&mut input) {
            Ok(n) => n as usize,
            Err(Error::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut input)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let mut raw = vec![0u8; count * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}
