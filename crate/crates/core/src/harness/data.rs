//! In-memory datasets loaded from a manifest or generated directly.

use std::path::{Path, PathBuf};

use crate::datamodel::{read_volume, CaseRecord, DatasetManifest, Grade, Organ, OrganPaths, RoiVolume};
use crate::error::{MoonError, Result};
use crate::model::CaseInputs;
use crate::synth::{generate_cases, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CaseData {
    pub id: String,
    pub grade: Grade,
    /// Esophagus, liver, spleen.
    pub volumes: [RoiVolume; 3],
    pub lesion_mask: Option<RoiVolume>,
}

impl CaseData {
    pub fn inputs(&self) -> CaseInputs {
        CaseInputs {
            volumes: [0, 1, 2].map(|i| self.volumes[i].to_tensor()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub roi_masked: bool,
    pub cases: Vec<CaseData>,
}

impl Dataset {
    /// Reads every volume referenced by the manifest at `path`; volume
    /// paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.check_files(base)?;
        let cases = manifest
            .cases
            .iter()
            .map(|rec| {
                let volumes = [Organ::Esophagus, Organ::Liver, Organ::Spleen];
                let mut loaded = Vec::with_capacity(3);
                for organ in volumes {
                    loaded.push(read_volume(&base.join(rec.volumes.get(organ)))?);
                }
                let lesion_mask = match &rec.lesion_mask {
                    Some(p) => Some(read_volume(&base.join(p))?),
                    None => None,
                };
                Ok(CaseData {
                    id: rec.id.clone(),
                    grade: rec.grade,
                    volumes: loaded.try_into().expect("three organs"),
                    lesion_mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            roi_masked: manifest.roi_masked,
            cases,
        })
    }

    pub fn from_synth(cfg: &SynthConfig) -> Result<Self> {
        let cases = generate_cases(cfg)?
            .into_iter()
            .map(|(id, c)| CaseData {
                id,
                grade: c.grade,
                volumes: c.volumes,
                lesion_mask: Some(c.lesion_mask),
            })
            .collect();
        Ok(Self {
            roi_masked: cfg.roi_masked,
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// A manifest describing the cases, with nominal file names.
    pub fn manifest(&self) -> DatasetManifest {
        let records = self
            .cases
            .iter()
            .map(|c| {
                let file = |o: &str| PathBuf::from(format!("{}_{o}.vol", c.id));
                CaseRecord {
                    id: c.id.clone(),
                    grade: c.grade,
                    volumes: OrganPaths {
                        esophagus: file("esophagus"),
                        liver: file("liver"),
                        spleen: file("spleen"),
                    },
                    lesion_mask: c.lesion_mask.as_ref().map(|_| file("lesion")),
                }
            })
            .collect();
        let mut m = DatasetManifest::new(records);
        m.roi_masked = self.roi_masked;
        m
    }

    pub fn indices_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.cases
                    .iter()
                    .position(|c| &c.id == id)
                    .ok_or_else(|| MoonError::Config(format!("case `{id}` is not in the dataset")))
            })
            .collect()
    }

    pub fn grades(&self, idx: &[usize]) -> Vec<Grade> {
        idx.iter().map(|&i| self.cases[i].grade).collect()
    }
}
