//! Binary tensor files, used for checkpoints and dataset latents.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "DSTN"
//! version 1 byte   currently 1
//! dtype   1 byte   0 = f32, 1 = f64
//! rank    1 byte
//! dims    rank × u32
//! payload numel × elem_size, row-major
//! ```

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"DSTN";
const VERSION: u8 = 1;

/// Serialize a tensor to the binary format.
pub fn to_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parse a tensor from the binary format. The file's dtype must match `S`;
/// callers that want a different precision cast after reading.
pub fn from_bytes<S: Scalar>(bytes: &[u8], origin: &str) -> Result<Tensor<S>> {
    let fail = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 7 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic (expected \"DSTN\")"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| Error::format(origin, format!("unknown dtype code {}", bytes[5])))?;
    if dtype != S::DTYPE {
        return Err(Error::format(
            origin,
            format!("dtype is {:?}, expected {:?}", dtype, S::DTYPE),
        ));
    }
    let rank = bytes[6] as usize;
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let elem = dtype.size();
    if bytes.len() != dims_end + numel * elem {
        return Err(Error::format(
            origin,
            format!(
                "payload length {} != expected {} for shape {:?}",
                bytes.len() - dims_end,
                numel * elem,
                shape
            ),
        ));
    }
    let data = bytes[dims_end..]
        .chunks_exact(elem)
        .map(S::read_le)
        .collect();
    Tensor::new(shape, data)
}

/// Write a tensor file at `path`.
pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&to_bytes(t))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a tensor file from `path`.
pub fn read_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_f32_and_f64() {
        let t32 = Tensor::<f32>::randn([2, 3, 4], &mut Rng::seed_from_u64(1));
        let b = to_bytes(&t32);
        let r: Tensor<f32> = from_bytes(&b, "mem").unwrap();
        assert_eq!(t32, r);

        let t64 = Tensor::<f64>::randn([5], &mut Rng::seed_from_u64(2));
        let b = to_bytes(&t64);
        let r: Tensor<f64> = from_bytes(&b, "mem").unwrap();
        assert_eq!(t64, r);
    }

    #[test]
    fn header_bytes_are_as_documented() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[0..4], b"DSTN");
        assert_eq!(b[4], 1); // version
        assert_eq!(b[5], 0); // f32
        assert_eq!(b[6], 2); // rank
        assert_eq!(u32::from_le_bytes(b[7..11].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[11..15].try_into().unwrap()), 3);
        assert_eq!(b.len(), 7 + 8 + 6 * 4);
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let t = Tensor::<f32>::zeros([2]);
        let b = to_bytes(&t);
        let r: Result<Tensor<f64>> = from_bytes(&b, "mem");
        assert!(r.is_err());
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let t = Tensor::<f32>::zeros([2]);
        let mut b = to_bytes(&t);
        b[0] = b'X';
        assert!(from_bytes::<f32>(&b, "mem").is_err());

        let mut b = to_bytes(&t);
        b.truncate(b.len() - 1);
        assert!(from_bytes::<f32>(&b, "mem").is_err());

        let b = to_bytes(&t);
        assert!(from_bytes::<f32>(&b[..5], "mem").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dstn");
        let t = Tensor::<f64>::randn([3, 3], &mut Rng::seed_from_u64(3));
        write_tensor(&path, &t).unwrap();
        let r: Tensor<f64> = read_tensor(&path).unwrap();
        assert_eq!(t, r);
    }
}
