//! Channels-last 3D convolutions.
//!
//! Dense convolutions go through an explicit patch matrix and a GEMM; the
//! depthwise variant loops directly since its inner dimension is the
//! contiguous channel axis.

use crate::graph::{BackwardArgs, Graph, Var};
use crate::tensor::{gemm, Tensor};

/// Geometry of a 3D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Zero padding inserted before index 0 on each axis.
    pub pad: [usize; 3],
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    /// Window sweep whose output has `ceil(dim / stride)` cells per axis,
    /// padding the input symmetrically (the odd voxel goes after).
    pub fn same_ceil(in_dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut pad = [0; 3];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let out = in_dims[a].div_ceil(stride[a]);
            let needed = ((out - 1) * stride[a] + kernel[a]).saturating_sub(in_dims[a]);
            pad[a] = needed / 2;
            out_dims[a] = out;
        }
        Self {
            kernel,
            stride,
            pad,
            in_dims,
            out_dims,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Input coordinate touched by output `o` at kernel offset `k` on `axis`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (p >= 0 && (p as usize) < self.in_dims[axis]).then_some(p as usize)
    }

    /// Visits every (output position, kernel offset, input position) triple
    /// that lands inside the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [oh, ow, od] = self.out_dims;
        let [kh, kw, kd] = self.kernel;
        let [_, iw, id] = self.in_dims;
        for x in 0..oh {
            for y in 0..ow {
                for z in 0..od {
                    let o = (x * ow + y) * od + z;
                    for a in 0..kh {
                        let Some(sx) = self.source(0, x, a) else { continue };
                        for b in 0..kw {
                            let Some(sy) = self.source(1, y, b) else { continue };
                            for c in 0..kd {
                                let Some(sz) = self.source(2, z, c) else { continue };
                                f(o, (a * kw + b) * kd + c, (sx * iw + sy) * id + sz);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeometry {
    /// Like [`Self::for_each_tap`] but groups taps into runs along the last
    /// axis: `f(kernel_offset, first_output, first_input, len)` covers outputs
    /// `first_output..first_output + len` reading consecutive inputs. Runs
    /// have length 1 unless the last-axis stride is 1.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        if self.stride[2] != 1 {
            return self.for_each_tap(|o, k, i| f(k, o, i, 1));
        }
        let [oh, ow, od] = self.out_dims;
        let [kh, kw, kd] = self.kernel;
        let [_, iw, id] = self.in_dims;
        let pad = self.pad[2];
        for a in 0..kh {
            for b in 0..kw {
                for c in 0..kd {
                    let k = (a * kw + b) * kd + c;
                    // Output z maps to input z + c - pad.
                    let z_lo = pad.saturating_sub(c);
                    let z_hi = od.min((id + pad).saturating_sub(c));
                    if z_lo >= z_hi {
                        continue;
                    }
                    for x in 0..oh {
                        let Some(sx) = self.source(0, x, a) else { continue };
                        for y in 0..ow {
                            let Some(sy) = self.source(1, y, b) else { continue };
                            let o = (x * ow + y) * od + z_lo;
                            let i = (sx * iw + sy) * id + z_lo + c - pad;
                            f(k, o, i, z_hi - z_lo);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry, ci: usize) -> Vec<f64> {
    let kv = geo.kernel_volume();
    let row = kv * ci;
    let mut cols = vec![0.0; geo.out_positions() * row];
    geo.for_each_tap(|o, k, i| {
        cols[o * row + k * ci..o * row + (k + 1) * ci].copy_from_slice(&x[i * ci..(i + 1) * ci]);
    });
    cols
}

fn col2im(cols: &[f64], geo: &ConvGeometry, ci: usize) -> Vec<f64> {
    let row = geo.kernel_volume() * ci;
    let mut x = vec![0.0; geo.in_dims.iter().product::<usize>() * ci];
    geo.for_each_tap(|o, k, i| {
        let src = &cols[o * row + k * ci..o * row + (k + 1) * ci];
        for (d, s) in x[i * ci..(i + 1) * ci].iter_mut().zip(src) {
            *d += s;
        }
    });
    x
}

impl Graph {
    /// Dense 3D convolution of `x [H, W, D, Ci]` with `w [kh*kw*kd*Ci, Co]`
    /// (rows ordered kernel-offset-major, input-channel-minor) and optional
    /// bias `[Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Var {
        let (dims, ci) = self.value(x).dims4();
        assert_eq!(dims, geo.in_dims, "conv3d input dims differ from geometry");
        let (wr, co) = self.value(w).dims2();
        assert_eq!(wr, geo.kernel_volume() * ci, "conv3d weight rows {} != k^3*Ci", wr);
        let p = geo.out_positions();
        let cols = im2col(self.value(x).data(), &geo, ci);
        let (mut out, beta) = prefill_bias(self, b, p, co);
        gemm(p, wr, co, &cols, false, self.value(w).data(), false, &mut out, beta);
        let shape = [geo.out_dims[0], geo.out_dims[1], geo.out_dims[2], co];
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(&shape, out), &parents, move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let gw = a.needs[1].then(|| {
                    let mut d = vec![0.0; wr * co];
                    gemm(wr, p, co, &cols, true, g, false, &mut d, 0.0);
                    Tensor::new(&[wr, co], d)
                });
                let gx = a.needs[0].then(|| {
                    let mut dcols = vec![0.0; p * wr];
                    gemm(p, co, wr, g, false, a.inputs[1].data(), true, &mut dcols, 0.0);
                    Tensor::new(a.inputs[0].shape(), col2im(&dcols, &geo, ci))
                });
                let mut grads = vec![gx, gw];
                if a.inputs.len() == 3 {
                    grads.push(a.needs[2].then(|| column_sums(a.grad, co)));
                }
                grads
            }
        })
    }

    /// Depthwise 3D convolution: `w [kh*kw*kd, C]`, one filter per channel.
    pub fn depthwise_conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Var {
        let (dims, c) = self.value(x).dims4();
        assert_eq!(dims, geo.in_dims, "depthwise input dims differ from geometry");
        let (wr, wc) = self.value(w).dims2();
        assert_eq!((wr, wc), (geo.kernel_volume(), c), "depthwise weight shape");
        let (mut out, _) = prefill_bias(self, b, geo.out_positions(), c);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        geo.for_each_run(|k, o, i, len| {
            let ker = &wv[k * c..(k + 1) * c];
            let dst = &mut out[o * c..(o + len) * c];
            let src = &xv[i * c..(i + len) * c];
            for (dr, sr) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                for ((d, s), w) in dr.iter_mut().zip(sr).zip(ker) {
                    *d += s * w;
                }
            }
        });
        let shape = [geo.out_dims[0], geo.out_dims[1], geo.out_dims[2], c];
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(&shape, out), &parents, move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let xv = a.inputs[0].data();
                let wv = a.inputs[1].data();
                let gx = a.needs[0].then(|| {
                    let mut gx = vec![0.0; xv.len()];
                    geo.for_each_run(|k, o, i, len| {
                        let ker = &wv[k * c..(k + 1) * c];
                        let dst = &mut gx[i * c..(i + len) * c];
                        let src = &g[o * c..(o + len) * c];
                        for (dr, gr) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                            for ((d, g), w) in dr.iter_mut().zip(gr).zip(ker) {
                                *d += g * w;
                            }
                        }
                    });
                    Tensor::new(a.inputs[0].shape(), gx)
                });
                let gw = a.needs[1].then(|| {
                    let mut gw = vec![0.0; wv.len()];
                    geo.for_each_run(|k, o, i, len| {
                        let acc = &mut gw[k * c..(k + 1) * c];
                        let gs = &g[o * c..(o + len) * c];
                        let xs = &xv[i * c..(i + len) * c];
                        for (gr, xr) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
                            for ((d, g), x) in acc.iter_mut().zip(gr).zip(xr) {
                                *d += g * x;
                            }
                        }
                    });
                    Tensor::new(a.inputs[1].shape(), gw)
                });
                let mut grads = vec![gx, gw];
                if a.inputs.len() == 3 {
                    grads.push(a.needs[2].then(|| column_sums(a.grad, c)));
                }
                grads
            }
        })
    }
}

/// Output buffer of `rows x cols` pre-filled with the broadcast bias, and
/// the GEMM `beta` that keeps it.
pub(crate) fn prefill_bias(g: &Graph, b: Option<Var>, rows: usize, cols: usize) -> (Vec<f64>, f64) {
    match b {
        Some(b) => {
            let bv = g.value(b).data();
            assert_eq!(bv.len(), cols, "bias length {} != {}", bv.len(), cols);
            let mut out = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                out.extend_from_slice(bv);
            }
            (out, 1.0)
        }
        None => (vec![0.0; rows * cols], 0.0),
    }
}

/// Sum over all rows of a tensor viewed as `[.., cols]`, shaped `[cols]`.
pub(crate) fn column_sums(t: &Tensor, cols: usize) -> Tensor {
    let mut acc = vec![0.0; cols];
    for row in t.data().chunks_exact(cols) {
        for (s, v) in acc.iter_mut().zip(row) {
            *s += v;
        }
    }
    Tensor::new(&[cols], acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_ceil_matches_stride_arithmetic() {
        let g = ConvGeometry::same_ceil([10, 10, 25], [2, 2, 2], [2, 2, 2]);
        assert_eq!(g.out_dims, [5, 5, 13]);
        assert_eq!(g.pad, [0, 0, 0]);
        let g = ConvGeometry::same_ceil([5, 5, 13], [3, 3, 3], [1, 1, 1]);
        assert_eq!(g.out_dims, [5, 5, 13]);
        assert_eq!(g.pad, [1, 1, 1]);
        let g = ConvGeometry::same_ceil([10, 10, 25], [3, 3, 3], [2, 2, 2]);
        assert_eq!(g.out_dims, [5, 5, 13]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let dims = [3, 4, 2];
        let (ci, co) = (2, 3);
        let x = Tensor::from_fn(&[3, 4, 2, ci], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let geo = ConvGeometry::same_ceil(dims, [3, 3, 3], [2, 1, 1]);
        let w = Tensor::from_fn(&[27 * ci, co], |i| ((i * 5 % 13) as f64 - 6.0) * 0.05);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv3d(xv, wv, None, geo);
        let y = g.value(y).clone();
        let [oh, ow, od] = geo.out_dims;
        for o0 in 0..oh {
            for o1 in 0..ow {
                for o2 in 0..od {
                    for oc in 0..co {
                        let mut acc = 0.0;
                        for k0 in 0..3 {
                            for k1 in 0..3 {
                                for k2 in 0..3 {
                                    let s0 = (o0 * 2 + k0) as isize - geo.pad[0] as isize;
                                    let s1 = (o1 + k1) as isize - geo.pad[1] as isize;
                                    let s2 = (o2 + k2) as isize - geo.pad[2] as isize;
                                    if s0 < 0 || s1 < 0 || s2 < 0 || s0 >= 3 || s1 >= 4 || s2 >= 2 {
                                        continue;
                                    }
                                    let (s0, s1, s2) = (s0 as usize, s1 as usize, s2 as usize);
                                    for c in 0..ci {
                                        let xi = ((s0 * 4 + s1) * 2 + s2) * ci + c;
                                        let wi = (((k0 * 3 + k1) * 3 + k2) * ci + c) * co + oc;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let yi = ((o0 * ow + o1) * od + o2) * co + oc;
                        assert!((y.data()[yi] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
