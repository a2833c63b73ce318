//! `IAGT` tensor files: magic `IAGT`, u32 LE rank, rank × u64 LE dims, then
//! row-major f64 LE payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IAGT";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fail = |offset: usize, detail: &str| Error::Format {
        offset,
        detail: detail.to_string(),
    };
    if bytes.len() < 8 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected IAGT"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dims_end = 8 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(fail(bytes.len(), "truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize;
        if d == 0 {
            return Err(fail(off, "zero dimension"));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| fail(off, "dimension product overflows"))?;
        shape.push(d);
    }
    let expected = dims_end + 8 * count;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            &format!("payload length {} does not match {count} values", bytes.len() - dims_end),
        ));
    }
    let data = bytes[dims_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"IAGT");
        assert_eq!(&b[4..8], &[2, 0, 0, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert!(matches!(decode(b"IAG"), Err(Error::Format { .. })));
        assert!(matches!(decode(b"NOPE\0\0\0\0"), Err(Error::Format { offset: 0, .. })));
        let mut b = encode(&Tensor::from_vec(vec![1.0, 2.0]));
        b.pop();
        assert!(matches!(decode(&b), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(dims in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(t.shape(), back.shape());
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
