//! Separable linear resampling of `[H, W, D, C]` maps: block-mean pooling
//! and trilinear interpolation.

use crate::graph::{BackwardArgs, Graph, Var};
use crate::tensor::Tensor;

/// For each output index along one axis, the contributing source indices
/// and their weights.
pub type AxisTaps = Vec<Vec<(usize, f64)>>;

/// Partition of `0..src` into `dst` contiguous non-empty blocks; each
/// output is the mean of its block. Requires `1 <= dst <= src`.
pub fn block_mean_taps(src: usize, dst: usize) -> AxisTaps {
    assert!(dst >= 1 && dst <= src, "cannot pool {src} cells into {dst}");
    (0..dst)
        .map(|i| {
            let start = i * src / dst;
            let end = (i + 1) * src / dst;
            let w = 1.0 / (end - start) as f64;
            (start..end).map(|s| (s, w)).collect()
        })
        .collect()
}

/// Linear interpolation with half-voxel alignment of cell centres.
pub fn linear_taps(src: usize, dst: usize) -> AxisTaps {
    assert!(src >= 1 && dst >= 1);
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let t = pos - i0 as f64;
            if i1 == i0 || t == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

fn resample(
    x: &[f64],
    src: [usize; 3],
    c: usize,
    taps: &[AxisTaps; 3],
    transpose: bool,
    out: &mut [f64],
) {
    let dst = [taps[0].len(), taps[1].len(), taps[2].len()];
    for a in 0..dst[0] {
        for b in 0..dst[1] {
            for d in 0..dst[2] {
                let o = ((a * dst[1] + b) * dst[2] + d) * c;
                for &(sa, wa) in &taps[0][a] {
                    for &(sb, wb) in &taps[1][b] {
                        for &(sd, wd) in &taps[2][d] {
                            let w = wa * wb * wd;
                            let s = ((sa * src[1] + sb) * src[2] + sd) * c;
                            if transpose {
                                for j in 0..c {
                                    out[s + j] += w * x[o + j];
                                }
                            } else {
                                for j in 0..c {
                                    out[o + j] += w * x[s + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Applies per-axis taps to a `[H, W, D, C]` map.
    pub fn resample3d(&mut self, x: Var, taps: [AxisTaps; 3]) -> Var {
        let (src, c) = self.value(x).dims4();
        let dst = [taps[0].len(), taps[1].len(), taps[2].len()];
        for a in 0..3 {
            for t in &taps[a] {
                assert!(t.iter().all(|&(s, _)| s < src[a]), "tap outside source on axis {a}");
            }
        }
        let mut out = vec![0.0; dst.iter().product::<usize>() * c];
        resample(self.value(x).data(), src, c, &taps, false, &mut out);
        self.push(Tensor::new(&[dst[0], dst[1], dst[2], c], out), &[x], move || {
            move |a: &BackwardArgs<'_>| {
                let mut d = vec![0.0; a.inputs[0].len()];
                resample(a.grad.data(), src, c, &taps, true, &mut d);
                vec![Some(Tensor::new(a.inputs[0].shape(), d))]
            }
        })
    }

    /// Adaptive average pooling onto `grid`; every cell is the mean of a
    /// contiguous block and the blocks tile the source.
    pub fn adaptive_avg_pool3d(&mut self, x: Var, grid: [usize; 3]) -> Var {
        let (src, _) = self.value(x).dims4();
        let taps = [0, 1, 2].map(|a| block_mean_taps(src[a], grid[a]));
        self.resample3d(x, taps)
    }

    /// Trilinear interpolation onto `dims`.
    pub fn trilinear_resize(&mut self, x: Var, dims: [usize; 3]) -> Var {
        let (src, _) = self.value(x).dims4();
        if src == dims {
            return x;
        }
        let taps = [0, 1, 2].map(|a| linear_taps(src[a], dims[a]));
        self.resample3d(x, taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_taps_partition_the_source() {
        for src in 1..12 {
            for dst in 1..=src {
                let taps = block_mean_taps(src, dst);
                let mut seen: Vec<usize> = taps.iter().flatten().map(|t| t.0).collect();
                seen.sort();
                assert_eq!(seen, (0..src).collect::<Vec<_>>());
                for t in &taps {
                    assert!(!t.is_empty());
                    let s: f64 = t.iter().map(|t| t.1).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_taps_are_identity_at_equal_size() {
        let taps = linear_taps(5, 5);
        for (i, t) in taps.iter().enumerate() {
            assert_eq!(t, &vec![(i, 1.0)]);
        }
    }

    #[test]
    fn linear_taps_weights_sum_to_one() {
        for src in 1..7 {
            for dst in 1..20 {
                for t in linear_taps(src, dst) {
                    let s: f64 = t.iter().map(|t| t.1).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
