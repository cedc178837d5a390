//! IBRT tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IBRT" | u8 version | u8 dtype | u32 rank | rank x u64 dims | data
//! ```
//!
//! Data is packed element by element in the dtype's natural width. Bit
//! tensors are packed eight per byte, least significant bit first; unused
//! high bits of the last byte are zero.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Tensor, TensorData, TensorError};

pub const MAGIC: [u8; 4] = *b"IBRT";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0} (expected {VERSION})")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("trailing bytes after tensor data")]
    TrailingBytes,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, t.dtype().code()])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.data() {
        TensorData::Real32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        TensorData::Real64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        TensorData::Int32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        TensorData::Bit(v) => {
            for chunk in v.chunks(8) {
                let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << i));
                w.write_all(&[byte])?;
            }
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), ContainerError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ContainerError::Truncated(what.to_string()),
        _ => ContainerError::Io(e),
    })
}

/// Reads one tensor and requires the stream to end right after it.
pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, ContainerError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let mut head = [0u8; 2];
    read_exact(&mut r, &mut head, "header")?;
    if head[0] != VERSION {
        return Err(ContainerError::UnsupportedVersion(head[0]));
    }
    let dtype = DType::from_code(head[1]).ok_or(ContainerError::UnknownDType(head[1]))?;
    let mut rank = [0u8; 4];
    read_exact(&mut r, &mut rank, "rank")?;
    let rank = u32::from_le_bytes(rank) as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let mut d = [0u8; 8];
        read_exact(&mut r, &mut d, "dims")?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let byte_len = match dtype {
        DType::Real32 | DType::Int32 => n * 4,
        DType::Real64 => n * 8,
        DType::Bit => n.div_ceil(8),
    };
    let mut raw = Vec::new();
    (&mut r).take(byte_len as u64).read_to_end(&mut raw)?;
    if raw.len() != byte_len {
        return Err(ContainerError::Truncated(format!(
            "expected {byte_len} data bytes, found {}",
            raw.len()
        )));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ContainerError::TrailingBytes);
    }
    let data = match dtype {
        DType::Real32 => TensorData::Real32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::Int32 => TensorData::Int32(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::Real64 => TensorData::Real64(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::Bit => TensorData::Bit((0..n).map(|i| (raw[i / 8] >> (i % 8)) & 1).collect()),
    };
    Ok(Tensor::new(shape, data)?)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, ContainerError> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &Tensor) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor(&mut buf, t).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_i32(vec![2], vec![1, -1]).unwrap();
        let buf = encode(&t);
        assert_eq!(&buf[..4], b"IBRT");
        assert_eq!(buf[4], VERSION);
        assert_eq!(buf[5], 1);
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..18], &2u64.to_le_bytes());
        assert_eq!(&buf[18..], &[1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn bits_pack_lsb_first() {
        let t = Tensor::from_bits(vec![10], vec![1, 0, 1, 0, 0, 0, 0, 1, 0, 1]).unwrap();
        let buf = encode(&t);
        assert_eq!(&buf[18..], &[0b1000_0101, 0b0000_0010]);
        assert_eq!(read_tensor(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn empty_tensor_is_valid() {
        let t = Tensor::from_f32(vec![0, 2], vec![]).unwrap();
        assert_eq!(read_tensor(encode(&t).as_slice()).unwrap(), t);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::from_f64(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode(&t);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(bad.as_slice()), Err(ContainerError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(read_tensor(bad.as_slice()), Err(ContainerError::UnsupportedVersion(9))));

        let mut bad = good.clone();
        bad[5] = 7;
        assert!(matches!(read_tensor(bad.as_slice()), Err(ContainerError::UnknownDType(7))));

        assert!(matches!(
            read_tensor(&good[..good.len() - 3]),
            Err(ContainerError::Truncated(_))
        ));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(read_tensor(bad.as_slice()), Err(ContainerError::TrailingBytes)));
    }

    proptest! {
        #[test]
        fn round_trip_every_dtype(
            reals in proptest::collection::vec(any::<f64>().prop_filter("non-nan", |x| !x.is_nan()), 0..40),
            ints in proptest::collection::vec(any::<i32>(), 0..40),
            bits in proptest::collection::vec(0u8..2, 0..40),
        ) {
            let tensors = [
                Tensor::from_f64(vec![reals.len()], reals.clone()).unwrap(),
                Tensor::from_f32(vec![reals.len()], reals.iter().map(|&x| x as f32).collect()).unwrap(),
                Tensor::from_i32(vec![1, ints.len()], ints.clone()).unwrap(),
                Tensor::from_bits(vec![bits.len(), 1], bits.clone()).unwrap(),
            ];
            for t in tensors {
                let back = read_tensor(encode(&t).as_slice()).unwrap();
                prop_assert_eq!(encode(&back), encode(&t));
            }
        }
    }
}
