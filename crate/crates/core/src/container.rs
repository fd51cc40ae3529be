//! HSIC binary container for cubes, masks, measurements and operator tensors.
//!
//! Layout (all integers little-endian):
//!
//! | bytes  | field                                            |
//! |--------|--------------------------------------------------|
//! | 0..4   | magic `HSIC`                                     |
//! | 4      | version, `1`                                     |
//! | 5      | dtype, `1` = IEEE-754 binary32 little-endian     |
//! | 6..8   | reserved, zero                                   |
//! | 8..20  | `u32` dims H, W, C (C = 1 for 2D payloads)        |
//! | 20..24 | `u32` flags, bit 0 = is_measurement              |
//! | 24..   | payload, row-major H, then W, then C             |

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::hsi::{CodedMask, HsiCube, Measurement};

pub const MAGIC: &[u8; 4] = b"HSIC";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const FLAG_MEASUREMENT: u32 = 1;

/// Decoded container contents before interpretation as a domain type.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: [usize; 3],
    pub flags: u32,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn is_measurement(&self) -> bool {
        self.flags & FLAG_MEASUREMENT != 0
    }

    pub fn into_array3(self) -> Array3<f32> {
        let [h, w, c] = self.dims;
        Array3::from_shape_vec((h, w, c), self.data).expect("dims checked at decode")
    }

    fn into_array2(self) -> Result<Array2<f32>> {
        let [h, w, c] = self.dims;
        if c != 1 {
            return Err(Error::Format(format!("expected a single-band payload, found C={c}")));
        }
        Ok(Array2::from_shape_vec((h, w), self.data).expect("dims checked at decode"))
    }
}

pub fn encode(dims: [usize; 3], flags: u32, data: &[f32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[5])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let flags = u32_at(20);
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format(format!("dimension overflow {dims:?}")))?;
    let payload_len = count.checked_mul(4).ok_or_else(|| Error::Format(format!("dimension overflow {dims:?}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(Error::Format(format!("payload is {} bytes, header {dims:?} requires {payload_len}", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(RawTensor { dims, flags, data })
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    decode(&fs::read(path)?)
}

pub fn write_raw(path: impl AsRef<Path>, dims: [usize; 3], flags: u32, data: &[f32]) -> Result<()> {
    fs::write(path, encode(dims, flags, data)?)?;
    Ok(())
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = cube.dims();
    let data = cube.data().as_standard_layout();
    write_raw(path, [h, w, c], 0, data.as_slice().unwrap())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let raw = read_raw(path)?;
    if raw.dims[2] == 0 {
        return Err(Error::Format("cube with zero bands".into()));
    }
    Ok(HsiCube::from_unchecked(raw.into_array3()))
}

pub fn save_mask(mask: &CodedMask, path: impl AsRef<Path>) -> Result<()> {
    let data = mask.data().as_standard_layout();
    write_raw(path, [mask.height(), mask.width(), 1], 0, data.as_slice().unwrap())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<CodedMask> {
    CodedMask::new(read_raw(path)?.into_array2()?)
}

pub fn save_measurement(y: &Measurement, path: impl AsRef<Path>) -> Result<()> {
    let data = y.data().as_standard_layout();
    write_raw(path, [y.height(), y.width(), 1], FLAG_MEASUREMENT, data.as_slice().unwrap())
}

pub fn load_measurement(path: impl AsRef<Path>) -> Result<Measurement> {
    let raw = read_raw(path)?;
    if !raw.is_measurement() {
        return Err(Error::Format("file is not flagged as a measurement".into()));
    }
    Measurement::new(raw.into_array2()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cube_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hsic");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cube = HsiCube::new(Array3::from_shape_simple_fn((4, 4, 3), || rng.random::<f32>())).unwrap();
        save_cube(&cube, &path).unwrap();
        assert_eq!(load_cube(&path).unwrap(), cube);
    }

    #[test]
    fn header_layout() {
        let bytes = encode([2, 3, 4], FLAG_MEASUREMENT, &[0.0; 24]).unwrap();
        assert_eq!(&bytes[0..4], b"HSIC");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &4u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 24 * 4);
    }

    #[test]
    fn full_size_cube_byte_count() {
        let cube = HsiCube::zeros(256, 256, 28);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.hsic");
        save_cube(&cube, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 256 * 256 * 28 * 4 + 24);
    }

    #[test]
    fn rejects_bad_files() {
        let mut bytes = encode([1, 1, 1], 0, &[0.5]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));

        let bytes = encode([2, 2, 2], 0, &[0.5; 8]).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Format(_))));

        let mut huge = encode([1, 1, 1], 0, &[0.5]).unwrap();
        for o in [8, 12, 16] {
            huge[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&huge), Err(Error::Format(_))));
    }

    #[test]
    fn measurement_flag_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hsic");
        save_mask(&CodedMask::ones(3, 3), &path).unwrap();
        assert!(load_measurement(&path).is_err());
        let y = Measurement::new(Array2::from_elem((3, 5), 0.25)).unwrap();
        save_measurement(&y, &path).unwrap();
        assert_eq!(load_measurement(&path).unwrap(), y);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, c in 1usize..5,
                                   vals in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO | proptest::num::f32::SUBNORMAL, 150)) {
            let data: Vec<f32> = vals.into_iter().take(h * w * c).collect();
            let raw = decode(&encode([h, w, c], 0, &data).unwrap()).unwrap();
            prop_assert_eq!(raw.dims, [h, w, c]);
            let same = raw.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
