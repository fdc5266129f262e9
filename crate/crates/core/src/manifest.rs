//! Case manifests: one JSON object per lesion case.
//!
//! Manifests are written as JSON Lines. A single JSON array of the same
//! objects is also accepted on read. Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::io::{read_mask, read_volume};
use crate::volume::{LiradsFlags, PhaseSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub lesion_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arterial: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portal: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delayed: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub liver_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_mask: Option<PathBuf>,
    /// Liver segmentation on the arterial scan, used for z-registration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arterial_liver_mask: Option<PathBuf>,
    /// Liver segmentation on the delayed scan, used for z-registration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delayed_liver_mask: Option<PathBuf>,
    /// Other lesions of the same patient, removed from the parenchyma.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub other_lesion_masks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lirads: Option<LiradsFlags>,
}

impl CaseEntry {
    pub fn new(lesion_id: impl Into<String>) -> Self {
        CaseEntry {
            lesion_id: lesion_id.into(),
            arterial: None,
            portal: None,
            delayed: None,
            liver_mask: None,
            lesion_mask: None,
            arterial_liver_mask: None,
            delayed_liver_mask: None,
            other_lesion_masks: Vec::new(),
            label: None,
            lirads: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lesion_id.trim().is_empty() {
            return Err(Error::InvalidArgument("empty lesion_id in manifest".into()));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::InvalidArgument(format!(
                    "lesion {}: label must be 0 or 1, got {l}",
                    self.lesion_id
                )));
            }
        }
        if let Some(f) = self.lirads {
            if f.aphe > 1 || f.ec > 1 || f.npw > 1 {
                return Err(Error::InvalidArgument(format!(
                    "lesion {}: lirads flags must be 0 or 1",
                    self.lesion_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>, cases: Vec<CaseEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &cases {
            c.validate()?;
            if !seen.insert(c.lesion_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate lesion_id {} in manifest",
                    c.lesion_id
                )));
            }
        }
        Ok(Manifest {
            base_dir: base_dir.into(),
            cases,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cases: Vec<CaseEntry> = if text.trim_start().starts_with('[') {
            serde_json::from_str(&text)?
        } else {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()?
        };
        let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
        Manifest::new(base, cases)
    }

    /// Writes JSON Lines, one case per line, in case order.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads one case's volumes and masks as written, without preprocessing.
    pub fn load_case(&self, entry: &CaseEntry) -> Result<PhaseSet> {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.as_deref()
                .map(|p| self.resolve(p))
                .ok_or_else(|| Error::Missing(format!("lesion {}: no {what} path", entry.lesion_id)))
        };
        let arterial = read_volume(need(&entry.arterial, "arterial")?)?;
        let portal = read_volume(need(&entry.portal, "portal")?)?;
        let delayed = entry
            .delayed
            .as_deref()
            .map(|p| read_volume(self.resolve(p)))
            .transpose()?;
        let liver_mask = read_mask(need(&entry.liver_mask, "liver_mask")?)?;
        let lesion_mask = read_mask(need(&entry.lesion_mask, "lesion_mask")?)?;
        let mut other_lesions = None;
        for p in &entry.other_lesion_masks {
            let m = read_mask(self.resolve(p))?;
            other_lesions = Some(match other_lesions {
                None => m.binarized(),
                Some(acc) => m.union(&acc)?,
            });
        }
        Ok(PhaseSet {
            lesion_id: entry.lesion_id.clone(),
            arterial,
            portal,
            delayed,
            liver_mask,
            lesion_mask,
            other_lesions,
            label: entry.label,
            lirads: entry.lirads,
        })
    }

    /// `lesion_id -> label` for every labelled case, in manifest order.
    pub fn labels(&self) -> Vec<(String, u8)> {
        self.cases
            .iter()
            .filter_map(|c| c.label.map(|l| (c.lesion_id.clone(), l)))
            .collect()
    }
}
