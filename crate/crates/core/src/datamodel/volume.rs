//! `MOONVOL1` volume files.
//!
//! Layout: 8 magic bytes, then little-endian `u32 x 3` dims `(H, W, D)`,
//! `f32 x 3` voxel spacing, and `H*W*D` `f32` intensities in row-major
//! order (H outermost, D innermost).

use std::fs;
use std::path::Path;

use autodiff::Tensor;

use crate::error::{contract, io_err, MoonError, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"MOONVOL1";
const HEADER_LEN: usize = 8 + 12 + 12;

/// One organ's 3D intensity array.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiVolume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl RoiVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        contract!(dims.iter().all(|&d| d >= 1), "volume dims {:?} must be positive", dims);
        let n: usize = dims.iter().product();
        contract!(
            data.len() == n,
            "volume dims {:?} need {} voxels, got {}",
            dims,
            n,
            data.len()
        );
        contract!(data.iter().all(|v| v.is_finite()), "volume has non-finite intensities");
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Single-channel `[H, W, D, 1]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.dims;
        Tensor::new(&[h, w, d, 1], self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn from_tensor(t: &Tensor, spacing: [f32; 3]) -> Result<Self> {
        contract!(t.rank() == 4 && t.shape()[3] == 1, "expected [H, W, D, 1], got {:?}", t.shape());
        let dims = [t.shape()[0], t.shape()[1], t.shape()[2]];
        Self::new(dims, spacing, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |offset: usize, reason: String| MoonError::Format {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 8 || &bytes[..8] != VOLUME_MAGIC {
            return Err(fmt_err(0, "bad magic, expected MOONVOL1".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fmt_err(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
        let dims = [0, 1, 2].map(|a| u32::from_le_bytes(word(8 + 4 * a)) as usize);
        let spacing = [0, 1, 2].map(|a| f32::from_le_bytes(word(20 + 4 * a)));
        if dims.contains(&0) {
            return Err(fmt_err(8, format!("zero dimension in {dims:?}")));
        }
        let payload = bytes.len() - HEADER_LEN;
        if !payload.is_multiple_of(4) {
            return Err(fmt_err(
                HEADER_LEN + payload / 4 * 4,
                format!("truncated payload: trailing {} bytes", payload % 4),
            ));
        }
        let declared = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let found = payload / 4;
        if declared != Some(found) {
            return Err(fmt_err(
                HEADER_LEN,
                format!("dims {dims:?} declare {declared:?} voxels but payload holds {found}"),
            ));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(fmt_err(HEADER_LEN + 4 * i, "non-finite intensity".into()));
        }
        Ok(Self { dims, spacing, data })
    }
}

pub fn write_volume(vol: &RoiVolume, path: &Path) -> Result<()> {
    fs::write(path, vol.to_bytes()).map_err(io_err(path))
}

pub fn read_volume(path: &Path) -> Result<RoiVolume> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    RoiVolume::from_bytes(&bytes)
}
