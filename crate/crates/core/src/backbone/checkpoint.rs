//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic `PCQACKPT`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header (config echo and tensor
//! directory), then every tensor as little-endian `f32` in directory order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{AdamState, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PCQACKPT";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    /// Free-form metadata (optimizer step, label scaling, ...).
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<F: Real>(
        kind: &str,
        config: serde_json::Value,
        store: &ParamStore<F>,
        adam: Option<&AdamState<F>>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.cast()))
            .collect();
        let mut extra = serde_json::Map::new();
        if let Some(st) = adam {
            extra.insert("adam_step".into(), st.step.into());
            for (id, name, _) in store.iter() {
                tensors.push((format!("{ADAM_M}{name}"), st.m[id.index()].cast()));
                tensors.push((format!("{ADAM_V}{name}"), st.v[id.index()].cast()));
            }
        }
        Self {
            kind: kind.to_string(),
            config,
            extra: serde_json::Value::Object(extra),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.extra.get("adam_step").is_some()
    }

    /// Loads every model tensor into `store`, verifying that names and
    /// shapes match exactly.
    pub fn load_into<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in &self.tensors {
            if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                continue;
            }
            store.assign(name, t.cast())?;
            seen += 1;
        }
        if seen != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} model tensors, model expects {}",
                store.len()
            )));
        }
        Ok(())
    }

    /// Copies tensors whose names start with `src_prefix` into `store` under
    /// `dst_prefix`. Returns how many were copied; shape mismatches fail.
    pub fn load_prefix<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        src_prefix: &str,
        dst_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                store.assign(&format!("{dst_prefix}{rest}"), t.cast())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn optimizer_state<F: Real>(&self, store: &ParamStore<F>) -> Result<AdamState<F>> {
        let step = self
            .extra
            .get("adam_step")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint("no optimizer state in checkpoint".into()))?;
        let mut st = AdamState::new(store);
        st.step = step;
        for (id, name, value) in store.iter() {
            for (prefix, slot) in [(ADAM_M, &mut st.m), (ADAM_V, &mut st.v)] {
                let key = format!("{prefix}{name}");
                let t = self
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if t.shape() != value.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {key}")));
                }
                slot[id.index()] = t.cast();
            }
        }
        Ok(st)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            extra: self.extra.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let end = pos + n * 4;
            let raw = bytes
                .get(pos..end)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::from_vec(e.rows, e.cols, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            extra: header.extra,
            tensors,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut init = Initializer::new(1);
        s.add("enc.w", init.trunc_normal(3, 4, 0.02));
        s.add("enc.b", Tensor::zeros(1, 4));
        s
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let s = store();
        let mut st = AdamState::new(&s);
        st.step = 7;
        st.m[0] = Tensor::filled(3, 4, 0.5);
        let ck = Checkpoint::from_store("pretrain", serde_json::json!({"a": 1}), &s, Some(&st));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut fresh = ParamStore::new();
        fresh.add("enc.w", Tensor::<f32>::zeros(3, 4));
        fresh.add("enc.b", Tensor::<f32>::zeros(1, 4));
        back.load_into(&mut fresh).unwrap();
        assert_eq!(fresh.by_name("enc.w"), s.by_name("enc.w"));
        let st2 = back.optimizer_state(&fresh).unwrap();
        assert_eq!(st2.step, 7);
        assert_eq!(st2.m[0], st.m[0]);
    }

    #[test]
    fn shape_and_format_checks() {
        let ck = Checkpoint::from_store("x", serde_json::Value::Null, &store(), None);
        let mut wrong = ParamStore::new();
        wrong.add("enc.w", Tensor::<f32>::zeros(4, 3));
        wrong.add("enc.b", Tensor::<f32>::zeros(1, 4));
        assert!(ck.load_into(&mut wrong).is_err());

        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
