//! Tensor snapshot file format.
//!
//! Byte layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "DTSN"
//! 4       4           u32 format version (currently 1)
//! 8       4           u32 ndim
//! 12      8 * ndim    u64 dims, outermost first
//! ...     8 * numel   f64 values, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{DeenError, Result};

use super::Tensor;

const MAGIC: &[u8; 4] = b"DTSN";
const VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DeenError::Format("snapshot: bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(DeenError::Format(format!("snapshot: unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut u64buf = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut values = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u64buf)?;
        values.push(f64::from_le_bytes(u64buf));
    }
    Tensor::new(&shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::new(&[2, 3], vec![1.0, -2.5, 0.0, f64::MIN_POSITIVE, 3.25, 1e300])
            .unwrap();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &t).unwrap();
        let back = read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.values().iter().zip(t.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(read_snapshot(&mut buf.as_slice()).is_err());
    }
}
