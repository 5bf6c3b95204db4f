//! Binary tensor container.
//!
//! Layout (all little-endian): magic `OMRN`, `u8` rank, `u32` per dimension,
//! then the row-major `f32` payload. Several records may be concatenated in
//! one file; readers consume them in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OMRN";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank > 255"))?;
    w.write_all(MAGIC)?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
        })?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R, origin: &Path) -> Result<Option<Tensor<f32>>, DataError> {
    let mut magic = [0u8; 4];
    match read_exact_or_eof(r, &mut magic, origin)? {
        false => return Ok(None),
        true if &magic != MAGIC => {
            return Err(DataError::BadMagic {
                path: origin.to_path_buf(),
            })
        }
        true => {}
    }
    let mut rank = [0u8; 1];
    read_required(r, &mut rank, origin)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        read_required(r, &mut d, origin)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 4];
    read_required(r, &mut bytes, origin)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(Tensor::from_vec(&shape, data)))
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8], origin: &Path) -> Result<bool, DataError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => {
                return Err(DataError::Truncated {
                    path: origin.to_path_buf(),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(DataError::io(origin, e)),
        }
    }
    Ok(true)
}

fn read_required<R: Read>(r: &mut R, buf: &mut [u8], origin: &Path) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated {
                path: origin.to_path_buf(),
            }
        } else {
            DataError::io(origin, e)
        }
    })
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<(), DataError> {
    save_tensors(path, [t])
}

pub fn save_tensors<'a>(path: &Path, ts: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<(), DataError> {
    let f = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for t in ts {
        write_tensor(&mut w, t).map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Loads a file that must hold exactly one record.
pub fn load_tensor(path: &Path) -> Result<Tensor<f32>, DataError> {
    let mut all = load_tensors(path)?;
    match all.len() {
        1 => Ok(all.pop().expect("one record")),
        n => Err(DataError::RecordCount {
            path: path.to_path_buf(),
            expected: 1,
            got: n,
        }),
    }
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor<f32>>, DataError> {
    let f = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0f32, -2.5]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = b"OMRN".to_vec();
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        let mut bad = &b"NOPE\x01\x01\x00\x00\x00"[..];
        assert!(matches!(read_tensor(&mut bad, p), Err(DataError::BadMagic { .. })));
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        let mut r = &buf[..];
        assert!(matches!(read_tensor(&mut r, p), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn concatenated_records() {
        let a = Tensor::from_vec(&[2], vec![1.0f32, 2.0]);
        let b = Tensor::from_vec(&[1, 1, 1], vec![f32::MIN_POSITIVE]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &a).unwrap();
        write_tensor(&mut buf, &b).unwrap();
        let mut r = &buf[..];
        let p = Path::new("mem");
        assert_eq!(read_tensor(&mut r, p).unwrap().unwrap(), a);
        assert_eq!(read_tensor(&mut r, p).unwrap().unwrap(), b);
        assert!(read_tensor(&mut r, p).unwrap().is_none());
    }
}
