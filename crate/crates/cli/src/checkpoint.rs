//! Binary checkpoints: parameters and optional optimizer state as 32-bit
//! little-endian floats.
//!
//! Layout: magic `RID5`, `u32` version, digest string, `u64` seed, tensor
//! table, then a `u8` flag and, when set, the Adam step count followed by
//! its first- and second-moment tables. A string is a `u32` byte length and
//! UTF-8 bytes; a table is a `u32` count of `(name, u32 rank, u32 dims…,
//! f32 payload)` entries in name order.

use std::collections::BTreeMap;
use std::path::Path;

use omreid::optim::Adam;
use omreid::params::ParamStore;
use omreid::tensor::Tensor;
use omreid::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RID5";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub seed: u64,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

/// Rounds every value to the nearest `f32`, the precision a checkpoint keeps.
pub fn round_to_f32(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape is unchanged")
}

pub fn round_store(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.insert(name.clone(), round_to_f32(t));
    }
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.digest);
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_table(&mut out, self.params.iter().collect());
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                put_table(&mut out, adam.m.iter().collect());
                put_table(&mut out, adam.v.iter().collect());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let digest = r.string()?;
        let seed = r.u64()?;
        let mut params = ParamStore::new();
        for (name, t) in r.table()? {
            params.insert(name, t);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.table()?;
                let v = r.table()?;
                Some(Adam {
                    step,
                    m,
                    v,
                    ..Adam::default()
                })
            }
            f => return Err(Error::Data(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            digest,
            seed,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_table(out: &mut Vec<u8>, entries: Vec<(&String, &Tensor)>) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        put_str(out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Data("checkpoint is truncated".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint name is not UTF-8".into()))
    }

    fn table(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let n = self.u32()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(len) = len.filter(|&l| l <= self.bytes.len()) else {
                return Err(Error::Data(format!("tensor {name} has an impossible shape")));
            };
            let raw = self.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Data(format!("tensor {name}: {e}")))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(Error::Data(format!("tensor {name} appears twice")));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.init_normal(1, "a.w", &[3, 2], 0.5);
        params.init_const("a.b", &[2], 0.25);
        params.insert("s", Tensor::scalar(1.0 / 3.0));
        let mut adam = Adam {
            step: 7,
            ..Adam::default()
        };
        adam.m.insert("a.w".into(), Tensor::full(&[3, 2], 0.1));
        adam.v.insert("a.w".into(), Tensor::full(&[3, 2], 0.2));
        Checkpoint {
            digest: "abc".into(),
            seed: 5,
            params,
            optimizer: Some(adam),
        }
    }

    #[test]
    fn bytes_round_trip_at_f32_precision() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params, round_store(&ck.params));
        assert_eq!(back.optimizer.as_ref().unwrap().step, 7);
        assert_eq!(back.digest, "abc");
        assert_eq!(back.seed, 5);
    }

    #[test]
    fn corrupt_input_is_a_data_error() {
        let bytes = sample().to_bytes();
        for bad in [&bytes[..bytes.len() - 1], &bytes[1..], b"RID5"] {
            assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Data(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
