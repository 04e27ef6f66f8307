//! Binary checkpoints: named sections of named f64 tensors.
//!
//! Layout (little endian): magic `MILCPCKP`, u32 version, profile name, u32 section
//! count; per section a name and u32 tensor count; per tensor a name, u32 rank, u64
//! dims and f64 values. Strings are a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MILCPCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub profile: String,
    pub sections: BTreeMap<String, Vec<Tensor>>,
}

impl Checkpoint {
    pub fn new(profile: &str) -> Self {
        Self {
            profile: profile.to_string(),
            sections: BTreeMap::new(),
        }
    }

    /// Store parameters and buffers of `model` under `section`.
    pub fn put<M: Parameterized + ?Sized>(&mut self, section: &str, model: &M) {
        let mut tensors: Vec<Tensor> = model.params().into_iter().cloned().collect();
        tensors.extend(model.buffers().into_iter().cloned());
        self.sections.insert(section.to_string(), tensors);
    }

    pub fn has(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Overwrite `model`'s parameters and buffers from `section`; names and shapes must match.
    pub fn load_into<M: Parameterized + ?Sized>(&self, section: &str, model: &mut M) -> Result<()> {
        let stored = self
            .sections
            .get(section)
            .ok_or_else(|| Error::Format(format!("checkpoint has no '{section}' section")))?;
        let n_params = model.params().len();
        let expected = n_params + model.buffers().len();
        if expected != stored.len() {
            return Err(Error::Format(format!(
                "section '{section}' holds {} tensors, model expects {expected}",
                stored.len()
            )));
        }
        copy_matching(model.params_mut(), &stored[..n_params])?;
        copy_matching(model.buffers_mut(), &stored[n_params..])?;
        model.constrain();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.profile);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, tensors) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for t in tensors {
                put_str(&mut out, &t.name);
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for d in &t.shape {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let profile = r.string()?;
        let mut sections = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let count = r.u32()?;
            let mut tensors = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let tname = r.string()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                tensors.push(Tensor { name: tname, shape, data });
            }
            sections.insert(name, tensors);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { profile, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn copy_matching(targets: Vec<&mut Tensor>, stored: &[Tensor]) -> Result<()> {
    for (t, s) in targets.into_iter().zip(stored) {
        if t.name != s.name || t.shape != s.shape {
            return Err(Error::Format(format!(
                "tensor mismatch: model {} {:?}, checkpoint {} {:?}",
                t.name, t.shape, s.name, s.shape
            )));
        }
        t.data.copy_from_slice(&s.data);
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpc::CpcModel;
    use crate::params::checksum;
    use crate::profile::Profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_restores_model_bitwise() {
        let p = Profile::tiny();
        let a = CpcModel::new(&p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut b = CpcModel::new(&p, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut ck = Checkpoint::new("tiny");
        ck.put("encoder", &a.encoder);
        ck.put("context", &a.context);
        ck.put("heads", &a.heads);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        back.load_into("encoder", &mut b.encoder).unwrap();
        back.load_into("context", &mut b.context).unwrap();
        back.load_into("heads", &mut b.heads).unwrap();
        assert_eq!(checksum(&a), checksum(&b));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::new("x").to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let p = Profile::tiny();
        let m = CpcModel::new(&p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ck = Checkpoint::new("tiny");
        ck.put("encoder", &m.encoder);
        let mut other = CpcModel::new(&Profile::desk(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(ck.load_into("encoder", &mut other.encoder).is_err());
        assert!(ck.load_into("context", &mut other.context).is_err());
    }
}
