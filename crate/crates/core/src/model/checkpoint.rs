//! Little-endian tensor container.
//!
//! ```text
//! "DIDB" | version u32 | config_len u32 | config utf-8 | count u32
//! count × ( name_len u32 | name | dtype u8 | ndim u32 | dims u64… | data )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Real, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"DIDB";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 16;
const MAX_CONFIG: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U64(Vec<u64>),
    F64(Vec<f64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
            TensorData::U64(_) => 3,
            TensorData::F64(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U64(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Record {
    /// Stores `f32` tensors as `f32` and anything else as `f64`.
    pub fn from_tensor<T: Real>(name: String, t: &Tensor<T>) -> Self {
        let data = if T::DTYPE == "f32" {
            TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
        } else {
            TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect())
        };
        Self {
            name,
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "{} is not a float tensor",
                    self.name
                )));
            }
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// `key=value` lines describing the run.
    pub config: String,
    pub records: Vec<Record>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let got = r.by_ref().take(n as u64).read_to_end(&mut buf)?;
    if got != n {
        return Err(bad(format!("truncated while reading {what}")));
    }
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let b = read_exact(r, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u32).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for rec in &self.records {
            let expected: usize = rec.shape.iter().product();
            if expected != rec.data.len() {
                return Err(bad(format!(
                    "{} holds {} values for shape {:?}",
                    rec.name,
                    rec.data.len(),
                    rec.shape
                )));
            }
            w.write_all(&(rec.name.len() as u32).to_le_bytes())?;
            w.write_all(rec.name.as_bytes())?;
            w.write_all(&[rec.data.tag()])?;
            w.write_all(&(rec.shape.len() as u32).to_le_bytes())?;
            for &d in &rec.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &rec.data {
                TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::U8(v) => w.write_all(v)?,
                TensorData::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_exact(r, 4, "magic")?;
        if magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = read_u32(r, "config length")? as usize;
        if len > MAX_CONFIG {
            return Err(bad("config section too large"));
        }
        let config = String::from_utf8(read_exact(r, len, "config")?)
            .map_err(|_| bad("config is not UTF-8"))?;
        let count = read_u32(r, "tensor count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let nlen = read_u32(r, "name length")? as usize;
            if nlen > MAX_NAME {
                return Err(bad("tensor name too long"));
            }
            let name = String::from_utf8(read_exact(r, nlen, "name")?)
                .map_err(|_| bad("tensor name is not UTF-8"))?;
            let tag = read_exact(r, 1, "dtype")?[0];
            let ndim = read_u32(r, "ndim")? as usize;
            if ndim > 8 {
                return Err(bad(format!("{name}: {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r, "dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("{name}: shape overflows")))?;
            let width = match tag {
                1 => 4,
                2 => 1,
                3 | 4 => 8,
                t => return Err(bad(format!("{name}: unknown dtype tag {t}"))),
            };
            let bytes = n
                .checked_mul(width)
                .ok_or_else(|| bad(format!("{name}: shape overflows")))?;
            let raw = read_exact(r, bytes, &name)?;
            let data = match tag {
                1 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                2 => TensorData::U8(raw),
                3 => TensorData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                _ => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
            };
            records.push(Record { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::read(&mut BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "depth=2\nseed=7\n".into(),
            records: vec![
                Record {
                    name: "w".into(),
                    shape: vec![2, 3],
                    data: TensorData::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, f32::MAX, -7.0]),
                },
                Record {
                    name: "rng".into(),
                    shape: vec![3],
                    data: TensorData::U8(vec![0, 255, 9]),
                },
                Record {
                    name: "step".into(),
                    shape: vec![],
                    data: TensorData::U64(vec![u64::MAX]),
                },
                Record {
                    name: "d".into(),
                    shape: vec![1],
                    data: TensorData::F64(vec![std::f64::consts::PI]),
                },
            ],
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DIDB");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        for cut in [0, 3, 7, 20, buf.len() - 1] {
            assert!(Checkpoint::read(&mut &buf[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::read(&mut bad_magic.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read(&mut extra.as_slice()).is_err());
    }
}
