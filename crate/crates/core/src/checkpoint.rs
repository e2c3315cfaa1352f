//! Binary checkpoint file.
//!
//! Layout (little-endian): magic `MAUC`, u32 version (1), u64 iteration,
//! rng state as 4×u64, u32 entry count, then per entry: u32 name length,
//! UTF-8 name, u8 dtype (0 = f32), u32 rank, rank×u64 dims, f32 payload.
//! Values are narrowed to f32 on save and widened on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::read_exact;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: [u8; 4] = *b"MAUC";
pub const CKPT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub rng_state: [u64; 4],
    /// Named tensors in file order.
    pub entries: Vec<(String, Tensor)>,
}

/// Rounds every value to the nearest f32, the precision stored on disk.
pub fn to_f32_precision(t: &Tensor) -> Tensor {
    t.map(|v| f64::from(v as f32))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Malformed(format!("checkpoint has no entry {name:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        for s in self.rng_state {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "checkpoint header")?;
        if magic != CKPT_MAGIC {
            return Err(Error::BadMagic {
                expected: CKPT_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(r, "checkpoint header")?;
        if version != CKPT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CKPT_VERSION,
                found: version,
            });
        }
        let iteration = read_u64(r, "checkpoint header")?;
        let mut rng_state = [0u64; 4];
        for s in &mut rng_state {
            *s = read_u64(r, "checkpoint rng state")?;
        }
        let count = read_u32(r, "checkpoint header")?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for i in 0..count {
            let what = format!("checkpoint entry {i}");
            let len = read_u32(r, &what)? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name, &what)?;
            let name = String::from_utf8(name).map_err(|_| Error::Malformed(format!("{what}: name is not UTF-8")))?;
            let mut dtype = [0u8; 1];
            read_exact(r, &mut dtype, &what)?;
            if dtype[0] != DTYPE_F32 {
                return Err(Error::Malformed(format!("{name}: unsupported dtype {}", dtype[0])));
            }
            let rank = read_u32(r, &what)? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(read_u64(r, &what)? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && rank > 0)
                .ok_or_else(|| Error::Malformed(format!("{name}: bad dims {dims:?}")))?;
            let mut bytes = vec![0u8; count * 4];
            read_exact(r, &mut bytes, &what)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            entries.push((name, Tensor::new(&dims, data)?));
        }
        Ok(Checkpoint {
            iteration,
            rng_state,
            entries,
        })
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            iteration: 42,
            rng_state: [1, 2, 3, u64::MAX],
            entries: vec![
                ("a.w".into(), Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 1e-9, 7.0]).unwrap()),
                ("b".into(), Tensor::scalar(0.5)),
            ],
        }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut v = Vec::new();
        c.write_to(&mut v).unwrap();
        v
    }

    #[test]
    fn layout_header() {
        let b = bytes(&sample());
        assert_eq!(&b[..4], b"MAUC");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 42);
        assert_eq!(u32::from_le_bytes(b[48..52].try_into().unwrap()), 2);
        // First entry: name length, name, dtype, rank, dims, payload.
        assert_eq!(u32::from_le_bytes(b[52..56].try_into().unwrap()), 3);
        assert_eq!(&b[56..59], b"a.w");
        assert_eq!(b[59], 0);
        assert_eq!(b.len(), 52 + (4 + 3 + 1 + 4 + 16 + 24) + (4 + 1 + 1 + 4 + 8 + 4));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let first = bytes(&sample());
        let loaded = Checkpoint::read_from(&mut first.as_slice()).unwrap();
        assert_eq!(bytes(&loaded), first);
        assert_eq!(loaded.entries[0].1, to_f32_precision(&sample().entries[0].1));
    }

    #[test]
    fn distinct_errors() {
        let good = bytes(&sample());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).unwrap_err().to_string().contains("bad magic"));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let cut = &good[..good.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &cut[..]), Err(Error::Truncated(_))));
    }
}
