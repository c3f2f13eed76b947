//! Column statistics, the symmetric eigendecomposition and the logistic loss.

use crate::graph::{BackwardArgs, Graph, Var};
use crate::ops::elementwise::sigmoid;
use crate::tensor::Tensor;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as the columns of an `h x h` matrix. Each eigenvector is
/// signed so that its first component with magnitude above `1e-6` is
/// positive. Only the symmetric part of `a` is used.
pub fn symmetric_eigen(a: &Tensor) -> (Vec<f64>, Tensor) {
    let (h, h2) = a.dims2();
    assert_eq!(h, h2, "eigendecomposition of a non-square matrix");
    let mut m: Vec<f64> = (0..h * h)
        .map(|k| {
            let (i, j) = (k / h, k % h);
            0.5 * (a.data()[i * h + j] + a.data()[j * h + i])
        })
        .collect();
    let mut v = vec![0.0; h * h];
    for i in 0..h {
        v[i * h + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..h)
            .flat_map(|i| (0..h).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * h + j] * m[i * h + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..h {
            for q in p + 1..h {
                let apq = m[p * h + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * h + p];
                let aqq = m[q * h + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..h {
                    let mkp = m[k * h + p];
                    let mkq = m[k * h + q];
                    m[k * h + p] = c * mkp - s * mkq;
                    m[k * h + q] = s * mkp + c * mkq;
                }
                for k in 0..h {
                    let mpk = m[p * h + k];
                    let mqk = m[q * h + k];
                    m[p * h + k] = c * mpk - s * mqk;
                    m[q * h + k] = s * mpk + c * mqk;
                }
                for k in 0..h {
                    let vkp = v[k * h + p];
                    let vkq = v[k * h + q];
                    v[k * h + p] = c * vkp - s * vkq;
                    v[k * h + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| m[b * h + b].total_cmp(&m[a * h + a]));
    let values: Vec<f64> = order.iter().map(|&i| m[i * h + i]).collect();
    let mut vecs = vec![0.0; h * h];
    for (col, &src) in order.iter().enumerate() {
        let pivot = (0..h).map(|r| v[r * h + src]).find(|x| x.abs() > 1e-6).unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..h {
            vecs[r * h + col] = sign * v[r * h + src];
        }
    }
    (values, Tensor::new(&[h, h], vecs))
}

impl Graph {
    /// Per-column standardization `(x - mean) / (std + eps)` of an `n x h`
    /// matrix using the sample (n - 1) standard deviation.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Var {
        let (n, h) = self.value(x).dims2();
        assert!(n >= 2, "standardize_cols needs at least two rows");
        let xv = self.value(x).data();
        let mut mean = vec![0.0; h];
        let mut sd = vec![0.0; h];
        for j in 0..h {
            let mu = (0..n).map(|i| xv[i * h + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (xv[i * h + j] - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
            mean[j] = mu;
            sd[j] = var.sqrt();
        }
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..h {
                out[i * h + j] = (xv[i * h + j] - mean[j]) / (sd[j] + eps);
            }
        }
        self.push(Tensor::new(&[n, h], out), &[x], move || {
            move |a: &BackwardArgs<'_>| {
                let xv = a.inputs[0].data();
                let g = a.grad.data();
                let mut d = vec![0.0; n * h];
                for j in 0..h {
                    let q = sd[j] + eps;
                    let gmean = (0..n).map(|i| g[i * h + j]).sum::<f64>() / n as f64;
                    let gd: f64 = (0..n).map(|i| g[i * h + j] * (xv[i * h + j] - mean[j])).sum();
                    let coef = if sd[j] > 0.0 {
                        -gd / (q * q) / ((n - 1) as f64 * sd[j])
                    } else {
                        0.0
                    };
                    for i in 0..n {
                        let dev = xv[i * h + j] - mean[j];
                        d[i * h + j] = (g[i * h + j] - gmean) / q + coef * dev;
                    }
                }
                vec![Some(Tensor::new(&[n, h], d))]
            }
        })
    }

    /// Eigenvectors of a symmetric matrix, columns ordered by descending
    /// eigenvalue (see [`symmetric_eigen`]). In the backward pass,
    /// eigenvalue gaps smaller than `min_gap` are floored to `min_gap`.
    pub fn sym_eigvecs(&mut self, x: Var, min_gap: f64) -> Var {
        let (lambda, vecs) = symmetric_eigen(self.value(x));
        self.push(vecs, &[x], move || {
            move |a: &BackwardArgs<'_>| {
                let v = a.output;
                let (h, _) = v.dims2();
                // A_bar = V (F o (V^T V_bar)) V^T, F_ij = 1 / (l_j - l_i).
                let vt_g = {
                    let mut m = vec![0.0; h * h];
                    crate::tensor::gemm(h, h, h, v.data(), true, a.grad.data(), false, &mut m, 0.0);
                    m
                };
                let mut inner = vec![0.0; h * h];
                for i in 0..h {
                    for j in 0..h {
                        if i == j {
                            continue;
                        }
                        let mut gap = lambda[j] - lambda[i];
                        if gap.abs() < min_gap {
                            gap = if gap < 0.0 { -min_gap } else { min_gap };
                        }
                        inner[i * h + j] = vt_g[i * h + j] / gap;
                    }
                }
                let mut tmp = vec![0.0; h * h];
                crate::tensor::gemm(h, h, h, v.data(), false, &inner, false, &mut tmp, 0.0);
                let mut abar = vec![0.0; h * h];
                crate::tensor::gemm(h, h, h, &tmp, false, v.data(), true, &mut abar, 0.0);
                let sym: Vec<f64> = (0..h * h)
                    .map(|k| 0.5 * (abar[k] + abar[(k % h) * h + k / h]))
                    .collect();
                vec![Some(Tensor::new(&[h, h], sym))]
            }
        })
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 `targets`
    /// of the same shape, computed in the numerically stable softplus form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Var) -> Var {
        let z = self.value(logits);
        let t = self.value(targets);
        assert_eq!(z.shape(), t.shape(), "bce logits/targets shape mismatch");
        let count = z.len() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &t)| z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z)
            .sum();
        self.push(Tensor::scalar(total / count), &[logits, targets], move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.item() / count;
                let gz = a.needs[0].then(|| a.inputs[0].zip_map(a.inputs[1], |z, t| g * (sigmoid(z) - t)));
                let gt = a.needs[1].then(|| a.inputs[0].map(|z| -g * z));
                vec![gz, gt]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_reconstructs_matrix() {
        let a = Tensor::new(&[3, 3], vec![4.0, 1.0, -2.0, 1.0, 2.0, 0.5, -2.0, 0.5, 3.0]);
        let (l, v) = symmetric_eigen(&a);
        assert!(l[0] >= l[1] && l[1] >= l[2]);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| v.data()[i * 3 + k] * l[k] * v.data()[j * 3 + k]).sum();
                assert!((r - a.data()[i * 3 + j]).abs() < 1e-12);
            }
        }
        // orthonormal columns
        for p in 0..3 {
            for q in 0..3 {
                let d: f64 = (0..3).map(|k| v.data()[k * 3 + p] * v.data()[k * 3 + q]).sum();
                assert!((d - if p == q { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigen_of_unit_diagonal_2x2_is_fixed_rotation() {
        let a = Tensor::new(&[2, 2], vec![1.0, 0.3, 0.3, 1.0]);
        let (l, v) = symmetric_eigen(&a);
        assert!((l[0] - 1.3).abs() < 1e-14 && (l[1] - 0.7).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let want = [r, r, r, -r];
        for (got, want) in v.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn standardized_columns_have_unit_sample_variance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[6, 2], |i| (i as f64 * 1.3).sin() * 3.0 + 1.0));
        let y = g.standardize_cols(x, 1e-12);
        let y = g.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..6).map(|i| y.data()[i * 2 + j]).collect();
            let mu = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
