//! 3D Grad-CAM over the last pre-pooling feature map of a branch.

use std::fs;
use std::path::{Path, PathBuf};

use autodiff::{Graph, Tensor};

use crate::datamodel::{Organ, RoiVolume, Task};
use crate::error::{contract, io_err, Result};
use crate::model::{CaseInputs, MoonModel};

#[derive(Clone, Debug, PartialEq)]
pub struct HeatVolume {
    /// Non-negative, aligned with the input ROI, max 1 unless all zero.
    pub volume: RoiVolume,
    pub task: Task,
    /// Index of the fused threshold logit that was differentiated.
    pub logit_index: usize,
    pub layer: String,
}

/// Grad-CAM from a `[h, w, d, C]` feature map and the gradient of the
/// target logit with respect to it, upsampled to `dims`.
pub fn cam_from_parts(feature: &Tensor, grad: &Tensor, dims: [usize; 3]) -> Result<Vec<f64>> {
    contract!(
        feature.rank() == 4 && feature.shape() == grad.shape(),
        "feature map {:?} and gradient {:?} must be equal [h, w, d, C] shapes",
        feature.shape(),
        grad.shape()
    );
    let (grid, c) = feature.dims4();
    let n: usize = grid.iter().product();
    let mut weights = vec![0.0; c];
    for row in grad.data().chunks_exact(c) {
        weights.iter_mut().zip(row).for_each(|(w, g)| *w += g);
    }
    weights.iter_mut().for_each(|w| *w /= n as f64);
    let cam: Vec<f64> = feature
        .data()
        .chunks_exact(c)
        .map(|row| row.iter().zip(&weights).map(|(f, w)| f * w).sum::<f64>().max(0.0))
        .collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[grid[0], grid[1], grid[2], 1], cam));
    let up = g.trilinear_resize(x, dims);
    let mut heat = g.value(up).data().to_vec();
    let max = heat.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        heat.iter_mut().for_each(|h| *h = (*h / max).max(0.0));
    }
    Ok(heat)
}

/// Heat volume for `organ`'s branch with respect to the fused logit of
/// `task`.
pub fn gradcam_map(model: &MoonModel, case: &CaseInputs, organ: Organ, task: Task) -> Result<HeatVolume> {
    contract!(model.params().all_finite(), "model parameters are not finite");
    contract!(model.encoder(organ).is_some(), "the model has no {} branch", organ);
    model.check_case(case)?;
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g, false);
    // Inputs require gradients so every feature map on the path records one.
    let inputs = case.volumes.clone().map(|t| g.leaf(t, true));
    let fo = model.forward_vars(&mut g, &pv, &[inputs])?;
    let fmap = fo.final_maps[0][organ.index()].expect("active branch has a final map");
    let logit_index = task.threshold();
    let mut seed = Tensor::zeros(g.shape(fo.logits.fused));
    seed.data_mut()[logit_index] = 1.0;
    let grads = g.backward_with(fo.logits.fused, seed);
    let feature = g.value(fmap);
    let grad = grads.get(fmap).cloned().unwrap_or_else(|| Tensor::zeros(feature.shape()));
    let dims = model.config().input_dims.get(organ).to_owned();
    let heat = cam_from_parts(feature, &grad, dims)?;
    let volume = RoiVolume::new(dims, [1.0; 3], heat.iter().map(|&h| h as f32).collect())?;
    Ok(HeatVolume {
        volume,
        task,
        logit_index,
        layer: format!("{organ}.last_stage"),
    })
}

/// Share of the heat mass among the top `top_frac` voxels that falls inside
/// `mask` (voxels > 0.5). Zero when those voxels carry no heat.
pub fn localization_score(heat: &RoiVolume, mask: &RoiVolume, top_frac: f64) -> Result<f64> {
    contract!(heat.dims() == mask.dims(), "heat {:?} and mask {:?} differ", heat.dims(), mask.dims());
    contract!(top_frac > 0.0 && top_frac <= 1.0, "top fraction {} outside (0, 1]", top_frac);
    let h = heat.data();
    let k = ((top_frac * h.len() as f64).ceil() as usize).clamp(1, h.len());
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    let (mut total, mut inside) = (0.0f64, 0.0f64);
    for &i in &order[..k] {
        total += h[i] as f64;
        if mask.data()[i] > 0.5 {
            inside += h[i] as f64;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

/// Writes one binary PGM per slice along the last axis; returns the paths.
pub fn write_pgm_slices(vol: &RoiVolume, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let [h, w, d] = vol.dims();
    let max = vol.data().iter().cloned().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut paths = Vec::with_capacity(d);
    for z in 0..d {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        for x in 0..h {
            for y in 0..w {
                bytes.push((vol.get(x, y, z).max(0.0) * scale).round().min(255.0) as u8);
            }
        }
        let p = dir.join(format!("{stem}_z{z:03}.pgm"));
        fs::write(&p, bytes).map_err(io_err(&p))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_gives_zero_heat() {
        let f = Tensor::from_fn(&[2, 2, 2, 3], |i| i as f64);
        let heat = cam_from_parts(&f, &Tensor::zeros(&[2, 2, 2, 3]), [4, 5, 6]).unwrap();
        assert_eq!(heat.len(), 120);
        assert!(heat.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn single_channel_map_is_relu_of_weighted_features() {
        // Toy network: F = a * x on a 2x2x2 grid, logit = sum(v * F).
        // dlogit/dF = v, so the channel weight is mean(v).
        let x = [1.0, -2.0, 0.5, 3.0, -1.0, 2.0, 0.0, -0.5];
        let a = 2.0;
        let v = [0.5, 1.0, -0.5, 0.25, 0.0, 1.5, 0.5, -0.25];
        let f = Tensor::new(&[2, 2, 2, 1], x.iter().map(|x| a * x).collect());
        let g = Tensor::new(&[2, 2, 2, 1], v.to_vec());
        let heat = cam_from_parts(&f, &g, [2, 2, 2]).unwrap();
        let w = v.iter().sum::<f64>() / 8.0;
        let raw: Vec<f64> = x.iter().map(|x| (w * a * x).max(0.0)).collect();
        let max = raw.iter().cloned().fold(0.0, f64::max);
        for (h, r) in heat.iter().zip(&raw) {
            assert!((h - r / max).abs() < 1e-15);
        }
    }

    #[test]
    fn localization_counts_top_voxels() {
        let heat = RoiVolume::new([1, 1, 20], [1.0; 3], (0..20).map(|i| i as f32).collect()).unwrap();
        let mut m = vec![0.0; 20];
        m[19] = 1.0;
        let mask = RoiVolume::new([1, 1, 20], [1.0; 3], m).unwrap();
        assert_eq!(localization_score(&heat, &mask, 0.05).unwrap(), 1.0);
        assert_eq!(localization_score(&heat, &mask, 0.1).unwrap(), 19.0 / 37.0);
        let zero = RoiVolume::zeros([1, 1, 20]);
        assert_eq!(localization_score(&zero, &mask, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn pgm_slices_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let vol = RoiVolume::new([2, 3, 2], [1.0; 3], (0..12).map(|i| i as f32).collect()).unwrap();
        let paths = write_pgm_slices(&vol, dir.path(), "heat").unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = fs::read(&paths[1]).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
