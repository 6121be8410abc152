//! Binary parameter checkpoints.
//!
//! Layout: magic `SEMW`, format version `u16`, then records until end of file:
//! name length `u16`, UTF-8 name, rank `u8`, `rank` dims as `u32`, then the
//! payload as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SEMW";
pub const VERSION: u16 = 1;

pub fn write_records<W: Write, T: Scalar>(mut w: W, records: &[(&str, &Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Checkpoint(format!("rank too large for {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| TensorError::Checkpoint(format!("dim too large for {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read, T: Scalar>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.array()?);
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let len = u16::from_le_bytes(cur.array()?) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| TensorError::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_owned();
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.array()?) as usize);
        }
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(TensorError::Checkpoint("truncated record".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, params: &ParamStore<T>) -> Result<()> {
    let records: Vec<(&str, &Tensor<T>)> = params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let mut bytes = Vec::new();
    write_records(&mut bytes, &records)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>, params: &mut ParamStore<T>) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let records = read_records::<_, T>(std::io::BufReader::new(file))?;
    params.load_from(&records)
}
