//! Training-time augmentation: spatial and intensity rescaling, axis flips
//! and cutout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::RoiVolume;
use crate::error::{MoonError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Zoom factor drawn from `1 ± spatial_scale`.
    pub spatial_scale: f64,
    /// Intensity gain drawn from `1 ± intensity_scale`.
    pub intensity_scale: f64,
    /// Axes that may be flipped, each with probability 1/2.
    pub flip_axes: [bool; 3],
    pub cutout_count: usize,
    /// Cutout box edge as a fraction of each dim.
    pub cutout_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            spatial_scale: 0.1,
            intensity_scale: 0.05,
            flip_axes: [true; 3],
            cutout_count: 1,
            cutout_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64, hi: f64| v.is_finite() && (0.0..hi).contains(&v);
        if !ok(self.spatial_scale, 1.0) || !ok(self.intensity_scale, 1.0) {
            return Err(MoonError::Config(
                "augment.spatial_scale and augment.intensity_scale must lie in [0, 1)".into(),
            ));
        }
        if !(self.cutout_frac.is_finite() && self.cutout_frac >= 0.0) {
            return Err(MoonError::Config("augment.cutout_frac must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mirrors the volume along `axis`.
pub fn flip(vol: &RoiVolume, axis: usize) -> RoiVolume {
    let dims = vol.dims();
    let mut out = vol.clone();
    let src = vol.data();
    let dst = out.data_mut();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let mut p = [x, y, z];
                p[axis] = dims[axis] - 1 - p[axis];
                dst[(x * dims[1] + y) * dims[2] + z] = src[(p[0] * dims[1] + p[1]) * dims[2] + p[2]];
            }
        }
    }
    out
}

/// Zooms about the volume centre by `factor` with trilinear sampling;
/// samples falling outside are clamped to the border.
pub fn zoom(vol: &RoiVolume, factor: f64) -> RoiVolume {
    let dims = vol.dims();
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            let n = dims[a];
            let c = (n as f64 - 1.0) / 2.0;
            (0..n)
                .map(|i| {
                    let s = (c + (i as f64 - c) / factor).clamp(0.0, n as f64 - 1.0);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(n - 1);
                    (lo, hi, s - lo as f64)
                })
                .collect()
        })
        .collect();
    let src = vol.data();
    let at = |x: usize, y: usize, z: usize| src[(x * dims[1] + y) * dims[2] + z] as f64;
    let mut out = vol.clone();
    let dst = out.data_mut();
    for (x, &(x0, x1, fx)) in taps[0].iter().enumerate() {
        for (y, &(y0, y1, fy)) in taps[1].iter().enumerate() {
            for (z, &(z0, z1, fz)) in taps[2].iter().enumerate() {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let plane = |xx: usize| {
                    lerp(
                        lerp(at(xx, y0, z0), at(xx, y0, z1), fz),
                        lerp(at(xx, y1, z0), at(xx, y1, z1), fz),
                        fy,
                    )
                };
                dst[(x * dims[1] + y) * dims[2] + z] = lerp(plane(x0), plane(x1), fx) as f32;
            }
        }
    }
    out
}

/// Zeroes the box `start .. start + size` (clipped to the volume).
pub fn cutout_box(vol: &mut RoiVolume, start: [usize; 3], size: [usize; 3]) {
    let dims = vol.dims();
    let end = [0, 1, 2].map(|a| (start[a] + size[a]).min(dims[a]));
    let data = vol.data_mut();
    for x in start[0]..end[0] {
        for y in start[1]..end[1] {
            for z in start[2]..end[2] {
                data[(x * dims[1] + y) * dims[2] + z] = 0.0;
            }
        }
    }
}

/// Deterministic in `(vol, seed, cfg)`.
pub fn augment(vol: &RoiVolume, seed: u64, cfg: &AugmentConfig) -> RoiVolume {
    if !cfg.enabled {
        return vol.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if cfg.spatial_scale > 0.0 {
        zoom(vol, 1.0 + rng.random_range(-cfg.spatial_scale..=cfg.spatial_scale))
    } else {
        vol.clone()
    };
    if cfg.intensity_scale > 0.0 {
        let gain = 1.0 + rng.random_range(-cfg.intensity_scale..=cfg.intensity_scale) as f32;
        out.data_mut().iter_mut().for_each(|v| *v *= gain);
    }
    for axis in 0..3 {
        if cfg.flip_axes[axis] && rng.random_bool(0.5) {
            out = flip(&out, axis);
        }
    }
    let dims = out.dims();
    let mut size = dims.map(|d| ((cfg.cutout_frac * d as f64).round() as usize).max(1));
    if cfg.cutout_count > 0 && size.iter().zip(dims).any(|(&s, d)| s > d) {
        log::warn!("cutout box {size:?} exceeds volume {dims:?}; clamped");
        size = [0, 1, 2].map(|a| size[a].min(dims[a]));
    }
    for _ in 0..cfg.cutout_count {
        let start = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a]));
        cutout_box(&mut out, start, size);
    }
    out
}
