//! Binary tensor blocks.
//!
//! A block is a shape header followed by the values:
//!
//! ```text
//! rank        u64 little-endian
//! dims[rank]  u64 little-endian each
//! values      f32 little-endian, row-major, product(dims) of them
//! ```
//!
//! Latent files are consecutive blocks; checkpoint weight files hold one
//! block each.

use std::io::{self, Read, Write};

use latentswap_autograd::Tensor;

/// Highest rank accepted when reading; anything larger is a corrupt header.
pub const MAX_RANK: u64 = 8;

/// Largest element count accepted when reading (2^32 values).
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_block(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads just the header.
pub fn read_shape(r: &mut impl Read) -> io::Result<Vec<usize>> {
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("corrupt shape header: rank {rank}"),
        ));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        count = count.checked_mul(d).filter(|&c| c <= MAX_ELEMENTS).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                "corrupt shape header: element count overflows",
            )
        })?;
        dims.push(d as usize);
    }
    Ok(dims)
}

pub fn read_block(r: &mut impl Read) -> io::Result<Tensor> {
    let shape = read_shape(r)?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new([2, 1], vec![1.0, -2.0]);
        let mut buf = Vec::new();
        write_block(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 + 16 + 8);
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&buf[28..32], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn absurd_rank_is_rejected() {
        let buf = 99u64.to_le_bytes();
        let err = read_block(&mut buf.as_slice()).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut buf = Vec::new();
        write_block(&mut buf, &Tensor::zeros([4])).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_block(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_f32_precision(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 37.0)
                .collect();
            let t = Tensor::new(dims.clone(), data);
            let mut buf = Vec::new();
            write_block(&mut buf, &t).unwrap();
            let back = read_block(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= b.abs() * 1e-7 + 1e-12);
            }
        }
    }
}
