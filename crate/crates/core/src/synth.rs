//! Synthetic three-organ phantoms whose statistics encode the varices grade.
//!
//! Esophagus: a tube along the last axis carrying bright ellipsoidal varix
//! blobs near its wall in the distal half. G1 blobs are few and small; G2
//! and G3 share a blob size and overlapping counts, so the esophagus alone
//! separates them poorly. Liver: an ellipsoid whose texture
//! roughness grows with grade. Spleen: a bright ellipsoid whose extent grows
//! with grade. Liver and spleen severities are drawn independently from
//! overlapping per-grade ranges, so together they separate G2 from G3 better
//! than either does alone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{write_volume, CaseRecord, DatasetManifest, Grade, Organ, OrganPaths, RoiVolume};
use crate::error::{io_err, MoonError, Result};
use crate::model::{PerOrgan, DESK_DIMS};
use crate::seed::mix_seed;

/// Background intensity.
pub const BASE: f64 = 0.3;
const TUBE_RADIUS_FRAC: f64 = 0.3;
const LIVER_CONTRAST: f64 = 0.05;
const SPLEEN_CONTRAST: f64 = 0.15;
/// Per-grade ranges of the latent severity driving liver and spleen.
const SEVERITY: [(f64, f64); 3] = [(0.0, 0.5), (0.25, 0.75), (0.5, 1.0)];
/// Per-grade inclusive blob-count ranges and blob radii (in units of a
/// tenth of the tube cross-section).
const BLOB_COUNT: [(usize, usize); 3] = [(0, 1), (1, 4), (2, 4)];
const BLOB_RADIUS: [f64; 3] = [1.2, 1.8, 1.8];
const BLOB_ELONGATION: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Cases per grade (G1, G2, G3).
    pub counts: [usize; 3],
    pub dims: PerOrgan<[usize; 3]>,
    /// Varix blob contrast over background.
    pub delta_e: f64,
    /// Liver texture amplitude at full severity.
    pub delta_l: f64,
    /// Spleen radius growth (fraction of the ROI) at full severity.
    pub delta_s: f64,
    /// Background noise level.
    pub sigma: f64,
    /// Zero voxels outside each organ.
    pub roi_masked: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            counts: [8, 8, 8],
            dims: DESK_DIMS,
            delta_e: 0.4,
            delta_l: 0.15,
            delta_s: 0.3,
            sigma: 0.05,
            roi_masked: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MoonError::Config(msg));
        for organ in Organ::ALL {
            let d = self.dims.get(organ);
            if d.iter().any(|&x| x < 4) {
                return bad(format!("synth.dims.{organ} = {d:?}: every dim must be at least 4"));
            }
        }
        for (name, v) in [("delta_e", self.delta_e), ("delta_l", self.delta_l), ("delta_s", self.delta_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("synth.{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return bad(format!("synth.sigma = {} must be positive", self.sigma));
        }
        let e = self.dims.esophagus;
        if tube_radius(e) < 1.0 {
            return bad(format!("esophagus dims {e:?} are too small to hold a tube"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Grade of the case at `index` (grades are laid out in blocks).
    pub fn grade_of(&self, index: usize) -> Option<Grade> {
        let [a, b, c] = self.counts;
        match index {
            i if i < a => Some(Grade::G1),
            i if i < a + b => Some(Grade::G2),
            i if i < a + b + c => Some(Grade::G3),
            _ => None,
        }
    }

    pub fn case_seed(&self, index: usize) -> u64 {
        mix_seed(self.seed, &[index as u64])
    }
}

fn tube_radius(dims: [usize; 3]) -> f64 {
    TUBE_RADIUS_FRAC * dims[0].min(dims[1]) as f64
}

/// Generated volumes plus the latent quantities behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub grade: Grade,
    /// Esophagus, liver, spleen.
    pub volumes: [RoiVolume; 3],
    /// 1 inside varix blobs, 0 elsewhere; esophagus dims.
    pub lesion_mask: RoiVolume,
    pub tube_mask: Vec<bool>,
    pub blob_count: usize,
    pub liver_severity: f64,
    pub spleen_severity: f64,
}

fn organ_rng(seed: u64, organ: Organ, part: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, &[organ.index() as u64, part]))
}

/// `BASE` plus box-smoothed Gaussian noise with standard deviation about
/// `sigma` away from the borders.
pub fn background(dims: [usize; 3], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut field: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut tmp = vec![0.0; n];
    for axis in 0..3 {
        let (len, st) = (dims[axis], strides[axis]);
        for (i, out) in tmp.iter_mut().enumerate() {
            let pos = (i / st) % len;
            let lo = if pos > 0 { i - st } else { i };
            let hi = if pos + 1 < len { i + st } else { i };
            *out = (field[lo] + field[i] + field[hi]) / 3.0;
        }
        std::mem::swap(&mut field, &mut tmp);
    }
    // Each box pass divides the variance of white noise by three.
    let scale = sigma * 27f64.sqrt();
    field.iter().map(|v| BASE + scale * v).collect()
}

fn ellipsoid_mask(dims: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(dims.iter().product());
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = [x as f64, y as f64, z as f64];
                let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
                mask.push(r2 <= 1.0);
            }
        }
    }
    mask
}

fn to_volume(dims: [usize; 3], data: Vec<f64>, mask: Option<&[bool]>) -> RoiVolume {
    let data = match mask {
        Some(m) => data.iter().zip(m).map(|(&v, &inside)| if inside { v as f32 } else { 0.0 }).collect(),
        None => data.iter().map(|&v| v as f32).collect(),
    };
    RoiVolume::new(dims, [1.0; 3], data).expect("synthesized volumes are finite")
}

fn uniform_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Fully deterministic in `(seed, grade, cfg)`.
pub fn synthesize_case(seed: u64, grade: Grade, cfg: &SynthConfig) -> Result<SynthCase> {
    cfg.validate()?;
    let level = grade.level();

    // Esophagus: background, then blobs from a separate stream.
    let ed = cfg.dims.esophagus;
    let mut rng = organ_rng(seed, Organ::Esophagus, 0);
    let mut eso = background(ed, cfg.sigma, &mut rng);
    let mut rng = organ_rng(seed, Organ::Esophagus, 1);
    let radius = tube_radius(ed);
    let axis = [0, 1].map(|a| (ed[a] as f64 - 1.0) / 2.0 + uniform_in(&mut rng, (-0.5, 0.5)));
    let tube_mask: Vec<bool> = (0..ed[0] * ed[1] * ed[2])
        .map(|i| {
            let (x, y) = ((i / (ed[1] * ed[2])) as f64, ((i / ed[2]) % ed[1]) as f64);
            (x - axis[0]).hypot(y - axis[1]) <= radius
        })
        .collect();
    let (lo, hi) = BLOB_COUNT[level];
    let blob_count = rng.random_range(lo..=hi);
    let unit = ed[0].min(ed[1]) as f64 / 10.0;
    let mut lesion = vec![false; tube_mask.len()];
    for _ in 0..blob_count {
        let rxy = unit * BLOB_RADIUS[level] * uniform_in(&mut rng, (0.9, 1.1));
        let theta = uniform_in(&mut rng, (0.0, std::f64::consts::TAU));
        let dist = 0.6 * radius;
        let z = ed[2] as f64 * uniform_in(&mut rng, (0.5, 0.85));
        let center = [axis[0] + dist * theta.cos(), axis[1] + dist * theta.sin(), z];
        let blob = ellipsoid_mask(ed, center, [rxy, rxy, BLOB_ELONGATION * rxy]);
        for ((l, &b), &t) in lesion.iter_mut().zip(&blob).zip(&tube_mask) {
            *l |= b && t;
        }
    }
    // Blob voxels keep their noise so a zero contrast leaves the background intact.
    for (v, &l) in eso.iter_mut().zip(&lesion) {
        if l {
            *v += cfg.delta_e;
        }
    }

    // Liver: textured ellipsoid.
    let ld = cfg.dims.liver;
    let mut rng = organ_rng(seed, Organ::Liver, 0);
    let mut liver = background(ld, cfg.sigma, &mut rng);
    let mut rng = organ_rng(seed, Organ::Liver, 1);
    let liver_severity = uniform_in(&mut rng, SEVERITY[level]);
    let center = ld.map(|d| (d as f64 - 1.0) / 2.0);
    let liver_mask = ellipsoid_mask(ld, center, ld.map(|d| 0.45 * d as f64));
    let amp = cfg.delta_l * liver_severity;
    for (v, &m) in liver.iter_mut().zip(&liver_mask) {
        let texture: f64 = rng.sample(StandardNormal);
        if m {
            *v += LIVER_CONTRAST + amp * texture;
        }
    }

    // Spleen: bright ellipsoid growing with severity.
    let sd = cfg.dims.spleen;
    let mut rng = organ_rng(seed, Organ::Spleen, 0);
    let mut spleen = background(sd, cfg.sigma, &mut rng);
    let mut rng = organ_rng(seed, Organ::Spleen, 1);
    let spleen_severity = uniform_in(&mut rng, SEVERITY[level]);
    let frac = 0.25 + cfg.delta_s * spleen_severity;
    let center = sd.map(|d| (d as f64 - 1.0) / 2.0);
    let spleen_mask = ellipsoid_mask(sd, center, sd.map(|d| frac * d as f64));
    for (v, &m) in spleen.iter_mut().zip(&spleen_mask) {
        if m {
            *v += SPLEEN_CONTRAST;
        }
    }

    let masked = cfg.roi_masked;
    Ok(SynthCase {
        grade,
        volumes: [
            to_volume(ed, eso, masked.then_some(&tube_mask[..])),
            to_volume(ld, liver, masked.then_some(&liver_mask[..])),
            to_volume(sd, spleen, masked.then_some(&spleen_mask[..])),
        ],
        lesion_mask: to_volume(ed, lesion.iter().map(|&l| l as u8 as f64).collect(), None),
        tube_mask,
        blob_count,
        liver_severity,
        spleen_severity,
    })
}

pub fn case_id(index: usize) -> String {
    format!("case-{index:04}")
}

/// All cases of `cfg` in memory, with their ids.
pub fn generate_cases(cfg: &SynthConfig) -> Result<Vec<(String, SynthCase)>> {
    cfg.validate()?;
    (0..cfg.total())
        .map(|i| {
            let grade = cfg.grade_of(i).expect("index below total");
            Ok((case_id(i), synthesize_case(cfg.case_seed(i), grade, cfg)?))
        })
        .collect()
}

/// Writes every volume and `manifest.json` into `out_dir`.
pub fn synthesize_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut records = Vec::with_capacity(cfg.total());
    for i in 0..cfg.total() {
        let grade = cfg.grade_of(i).expect("index below total");
        let case = synthesize_case(cfg.case_seed(i), grade, cfg)?;
        let id = case_id(i);
        let file = |suffix: &str| PathBuf::from(format!("{id}_{suffix}.vol"));
        let paths = OrganPaths {
            esophagus: file("esophagus"),
            liver: file("liver"),
            spleen: file("spleen"),
        };
        for organ in Organ::ALL {
            write_volume(&case.volumes[organ.index()], &out_dir.join(paths.get(organ)))?;
        }
        let mask = file("lesion");
        write_volume(&case.lesion_mask, &out_dir.join(&mask))?;
        records.push(CaseRecord {
            id,
            grade,
            volumes: paths,
            lesion_mask: Some(mask),
        });
    }
    let mut manifest = DatasetManifest::new(records);
    manifest.roi_masked = cfg.roi_masked;
    manifest.save(&out_dir.join("manifest.json"))?;
    log::info!("wrote {} synthetic cases to {}", manifest.len(), out_dir.display());
    Ok(manifest)
}
