use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"MFPB";
pub const BLOB_VERSION: u32 = 1;

/// Writes every named tensor as little-endian `f64` values after a small
/// header of names and shapes.
pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&BLOB_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::Format("not a parameter blob".into()));
    }
    let version = read_u32(&mut r)?;
    if version != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("enc.w", Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap());
        store.add("bias", Tensor::scalar(7.25));
        let mut buf = Vec::new();
        write_params(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MFPB");
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(matches!(read_params(&b"XXXX\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_params(&ParamStore::new(), &mut buf).unwrap();
        buf[4] = 9;
        assert!(read_params(buf.as_slice()).is_err());
    }
}
