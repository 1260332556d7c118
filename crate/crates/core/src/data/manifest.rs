use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{read_ply, PointCloud};

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub distorted_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
    pub reference_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
    pub distortion_type: String,
    pub level: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample_id {}", e.sample_id)));
            }
            if let Some(m) = e.mos {
                if !m.is_finite() {
                    return Err(Error::Manifest(format!("non-finite mos for {}", e.sample_id)));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct reference ids in sorted order.
    pub fn reference_ids(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.reference_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Entries whose reference id is in `refs`, in manifest order.
    pub fn filter_refs(&self, refs: &[String]) -> Manifest {
        let set: HashSet<&str> = refs.iter().map(String::as_str).collect();
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| set.contains(e.reference_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Fails unless every entry has a MOS label.
    pub fn require_labels(&self) -> Result<()> {
        match self.entries.iter().find(|e| e.mos.is_none()) {
            Some(e) => Err(Error::Manifest(format!("sample {} has no mos", e.sample_id))),
            None => Ok(()),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Manifest(format!("line {}: {err}", i + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_jsonl(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.distorted_path.is_relative() {
                e.distorted_path = base.join(&e.distorted_path);
            }
            if let Some(r) = e.reference_path.as_mut() {
                if r.is_relative() {
                    *r = base.join(&*r);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// A manifest entry with its clouds loaded.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub reference_id: String,
    pub distorted: PointCloud,
    pub reference: Option<PointCloud>,
    pub mos: Option<f64>,
}

/// Loads every cloud named in the manifest. Reference clouds shared by many
/// entries are read once.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    let mut cache: std::collections::HashMap<PathBuf, PointCloud> = Default::default();
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest.entries() {
        let distorted = read_ply(&e.distorted_path)?;
        let reference = match &e.reference_path {
            Some(p) => Some(match cache.get(p) {
                Some(pc) => pc.clone(),
                None => {
                    let pc = read_ply(p)?;
                    cache.insert(p.clone(), pc.clone());
                    pc
                }
            }),
            None => None,
        };
        out.push(Sample {
            id: e.sample_id.clone(),
            reference_id: e.reference_id.clone(),
            distorted,
            reference,
            mos: e.mos,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, r: &str, mos: Option<f64>) -> ManifestEntry {
        ManifestEntry {
            sample_id: id.into(),
            distorted_path: format!("{id}.ply").into(),
            reference_path: Some(format!("{r}.ply").into()),
            reference_id: r.into(),
            mos,
            distortion_type: "geom-noise".into(),
            level: 3,
        }
    }

    #[test]
    fn jsonl_roundtrip_and_duplicates() {
        let m = Manifest::new(vec![entry("a", "r1", Some(0.5)), entry("b", "r2", None)]).unwrap();
        let text = m.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(Manifest::from_jsonl(&text).unwrap(), m);
        assert!(Manifest::new(vec![entry("a", "r1", None), entry("a", "r2", None)]).is_err());
        assert!(m.require_labels().is_err());
        assert_eq!(m.reference_ids(), vec!["r1".to_string(), "r2".to_string()]);
        assert_eq!(m.filter_refs(&["r2".into()]).len(), 1);
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(vec![entry("a", "r1", Some(0.5))]).unwrap();
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back.entries()[0].distorted_path, dir.path().join("a.ply"));
    }
}
