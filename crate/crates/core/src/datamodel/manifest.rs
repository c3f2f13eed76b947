use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grade::Grade;
use crate::error::{io_err, MoonError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Esophagus,
    Liver,
    Spleen,
}

impl Organ {
    pub const ALL: [Organ; 3] = [Organ::Esophagus, Organ::Liver, Organ::Spleen];

    pub fn index(self) -> usize {
        match self {
            Organ::Esophagus => 0,
            Organ::Liver => 1,
            Organ::Spleen => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::Esophagus => "esophagus",
            Organ::Liver => "liver",
            Organ::Spleen => "spleen",
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Volume paths for the three organ ROIs, relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganPaths {
    pub esophagus: PathBuf,
    pub liver: PathBuf,
    pub spleen: PathBuf,
}

impl OrganPaths {
    pub fn get(&self, organ: Organ) -> &Path {
        match organ {
            Organ::Esophagus => &self.esophagus,
            Organ::Liver => &self.liver,
            Organ::Spleen => &self.spleen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub id: String,
    pub grade: Grade,
    pub volumes: OrganPaths,
    /// Voxel mask of planted lesions (synthetic cases only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// Whether ROI voxels outside the organ were zeroed (`true`) or the
    /// ROIs are raw crops (`false`).
    #[serde(default)]
    pub roi_masked: bool,
    pub cases: Vec<CaseRecord>,
}

impl DatasetManifest {
    pub fn new(cases: Vec<CaseRecord>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            roi_masked: false,
            cases,
        }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn grade_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for c in &self.cases {
            counts[c.grade.level()] += 1;
        }
        counts
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(MoonError::Config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        let mut ids: Vec<&str> = m.cases.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(MoonError::Config(format!("duplicate case id `{}`", w[0])));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(io_err(path))
    }

    /// Checks that every referenced file exists under `base`.
    pub fn check_files(&self, base: &Path) -> Result<()> {
        for case in &self.cases {
            for organ in Organ::ALL {
                let p = base.join(case.volumes.get(organ));
                if !p.is_file() {
                    return Err(MoonError::MissingFile(p));
                }
            }
            if let Some(mask) = &case.lesion_mask {
                let p = base.join(mask);
                if !p.is_file() {
                    return Err(MoonError::MissingFile(p));
                }
            }
        }
        Ok(())
    }
}
