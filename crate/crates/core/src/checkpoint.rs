//! `.edmk` checkpoint archives.
//!
//! Layout (little-endian): magic `EDMK`, `u32` version (1), `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name and a `.t32`
//! payload; finally a `u32`-length-prefixed UTF-8 metadata blob of
//! `key=value` lines. Teacher, student and decoder tensors are namespaced
//! `t/`, `s/` and `d/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{EdmaeError, Result};
use crate::io::{encode_t32, Reader};
use crate::tensor::Tensor;

pub const EDMK_MAGIC: [u8; 4] = *b"EDMK";
pub const EDMK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub momentum: f64,
    pub align_weight: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Additional keys (model geometry, checkpoint kind).
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "step={}\nmomentum={}\nalign_weight={}\nmask_ratio={}\nseed={}\n",
            self.step, self.momentum, self.align_weight, self.mask_ratio, self.seed
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut meta = CheckpointMeta::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("metadata line {line:?} lacks '='"))?;
            let num_err = |_| format!("bad value for {k}: {v:?}");
            match k {
                "step" => meta.step = v.parse().map_err(num_err)?,
                "momentum" => meta.momentum = v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?,
                "align_weight" => meta.align_weight = v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?,
                "mask_ratio" => meta.mask_ratio = v.parse().map_err(|_| format!("bad value for {k}: {v:?}"))?,
                "seed" => meta.seed = v.parse().map_err(num_err)?,
                _ => {
                    meta.extra.insert(k.to_string(), v.to_string());
                }
            }
        }
        Ok(meta)
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&EDMK_MAGIC);
        out.extend_from_slice(&EDMK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| EdmaeError::Data(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&encode_t32(t));
        }
        let meta = self.meta.to_text();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn decode(buf: &[u8], file: &str) -> Result<Self> {
        let mut r = Reader::new(buf, file);
        if r.bytes(4, "magic")? != EDMK_MAGIC {
            return Err(EdmaeError::Parse {
                file: file.to_string(),
                offset: 0,
                message: "bad magic, expected EDMK".into(),
            });
        }
        let version = r.u32("version")?;
        if version != EDMK_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let raw = r.bytes(len, "tensor name")?;
            let name = std::str::from_utf8(raw).map_err(|_| r.error("tensor name is not UTF-8"))?;
            tensors.push((name.to_string(), r.t32()?));
        }
        let len = r.u32("metadata length")? as usize;
        let raw = r.bytes(len, "metadata")?;
        let text = std::str::from_utf8(raw).map_err(|_| r.error("metadata is not UTF-8"))?;
        let meta = CheckpointMeta::from_text(text).map_err(|m| r.error(m))?;
        if !r.at_end() {
            return Err(r.error("trailing bytes after metadata"));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| EdmaeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| EdmaeError::io(path, e))?;
        Self::decode(&buf, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut meta = CheckpointMeta {
            step: 12,
            momentum: 0.99,
            align_weight: 1.0,
            mask_ratio: 0.75,
            seed: 7,
            ..Default::default()
        };
        meta.extra.insert("kind".into(), "pretrain".into());
        Checkpoint {
            tensors: vec![
                ("t/stem.w".into(), Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.1)),
                ("d/out.b".into(), Tensor::full(&[1], -0.5)),
            ],
            meta,
        }
    }

    #[test]
    fn roundtrip() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..4], b"EDMK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &8u16.to_le_bytes());
        assert_eq!(Checkpoint::decode(&bytes, "mem").unwrap(), c);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::decode(&bytes[..cut], "c.edmk"),
                Err(EdmaeError::Parse { .. })
            ));
        }
    }
}
