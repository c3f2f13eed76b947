use crate::graph::{BackwardArgs, Graph, Var};
use super::conv::{column_sums, prefill_bias};
use crate::tensor::{gemm, Tensor};

impl Graph {
    /// Matrix product `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, a_trans: bool, b: Var, b_trans: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if a_trans { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", self.shape(a), self.shape(b));
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), a_trans, self.value(b).data(), b_trans, &mut out, 0.0);
        self.push(Tensor::new(&[m, n], out), &[a, b], move || {
            move |args: &BackwardArgs<'_>| {
                let (av, bv, g) = (args.inputs[0], args.inputs[1], args.grad);
                // C = A B: dA = G B^T, dB = A^T G, with transposes folded in.
                let ga = args.needs[0].then(|| {
                    let (r, c) = av.dims2();
                    let mut out = vec![0.0; r * c];
                    if a_trans {
                        // A^T = op(a): dA = op(b) G^T  (k x m)
                        gemm(k, n, m, bv.data(), b_trans, g.data(), true, &mut out, 0.0);
                    } else {
                        gemm(m, n, k, g.data(), false, bv.data(), !b_trans, &mut out, 0.0);
                    }
                    Tensor::new(&[r, c], out)
                });
                let gb = args.needs[1].then(|| {
                    let (r, c) = bv.dims2();
                    let mut out = vec![0.0; r * c];
                    if b_trans {
                        // dB = G^T op(a)  (n x k)
                        gemm(n, m, k, g.data(), true, av.data(), a_trans, &mut out, 0.0);
                    } else {
                        gemm(k, m, n, av.data(), !a_trans, g.data(), false, &mut out, 0.0);
                    }
                    Tensor::new(&[r, c], out)
                });
                vec![ga, gb]
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, &[x], || |a: &BackwardArgs<'_>| vec![Some(a.grad.transpose())])
    }

    /// Affine map on the trailing dim: `x [.., Ci] * w [Ci, Co] + b [Co]`.
    /// Leading dims are treated as rows and kept on output.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut shape = self.shape(x).to_vec();
        let ci = *shape.last().expect("linear on scalar");
        let (wr, co) = self.value(w).dims2();
        assert_eq!(wr, ci, "linear weight rows {} != input width {}", wr, ci);
        let rows = self.value(x).len() / ci.max(1);
        let (mut out, beta) = prefill_bias(self, b, rows, co);
        gemm(rows, ci, co, self.value(x).data(), false, self.value(w).data(), false, &mut out, beta);
        *shape.last_mut().unwrap() = co;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(&shape, out), &parents, move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let gx = a.needs[0].then(|| {
                    let mut d = vec![0.0; rows * ci];
                    gemm(rows, co, ci, g, false, a.inputs[1].data(), true, &mut d, 0.0);
                    Tensor::new(a.inputs[0].shape(), d)
                });
                let gw = a.needs[1].then(|| {
                    let mut d = vec![0.0; ci * co];
                    gemm(ci, rows, co, a.inputs[0].data(), true, g, false, &mut d, 0.0);
                    Tensor::new(&[ci, co], d)
                });
                let mut grads = vec![gx, gw];
                if a.inputs.len() == 3 {
                    grads.push(a.needs[2].then(|| column_sums(a.grad, co)));
                }
                grads
            }
        })
    }

    /// Concatenates along the trailing dim; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(&shape, out), parts, move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if a.needs[i] {
                        let mut d = vec![0.0; rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        res.push(Some(Tensor::new(a.inputs[i].shape(), d)));
                    } else {
                        res.push(None);
                    }
                    offset += w;
                }
                res
            }
        })
    }

    /// Slice `[start, start+len)` of the trailing dim.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap();
        assert!(start + len <= w, "slice {}..{} out of {}", start, start + len, w);
        let rows = self.value(x).len() / w;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = len;
        self.push(Tensor::new(&oshape, out), &[x], move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let mut d = vec![0.0; rows * w];
                for r in 0..rows {
                    d[r * w + start..r * w + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::new(&shape, d))]
            }
        })
    }

    /// Stacks equally-sized tensors into rows of a `[n, len]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let len = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * len);
        for &r in rows {
            assert_eq!(self.value(r).len(), len, "stack_rows length mismatch");
            out.extend_from_slice(self.value(r).data());
        }
        let n = rows.len();
        self.push(Tensor::new(&[n, len], out), rows, move || {
            move |a: &BackwardArgs<'_>| {
                (0..n)
                    .map(|i| {
                        a.needs[i].then(|| {
                            Tensor::new(a.inputs[i].shape(), a.grad.data()[i * len..(i + 1) * len].to_vec())
                        })
                    })
                    .collect()
            }
        })
    }

    /// Mean over all leading dims: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).len() / c;
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(&[c], out), &[x], move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let mut d = Vec::with_capacity(rows * c);
                for _ in 0..rows {
                    d.extend(g.iter().map(|v| v * inv));
                }
                vec![Some(Tensor::new(&shape, d))]
            }
        })
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(Tensor::new(&[r, c], out), &[x], move || {
            move |a: &BackwardArgs<'_>| {
                let y = a.output.data();
                let g = a.grad.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(&[r, c], d))]
            }
        })
    }

    /// Normalizes each trailing-dim vector to zero mean and unit (population)
    /// variance, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).len() / c;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert!(gv.len() == c && bv.len() == c, "layer_norm affine params must have length {c}");
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        for (i, row) in self.value(x).data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            let (xr, or) = (&mut xhat[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
            for j in 0..c {
                xr[j] = (row[j] - mean) * is;
                or[j] = xr[j] * gv[j] + bv[j];
            }
        }
        self.push(Tensor::new(&shape, out), &[x, gamma, beta], move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let gm = a.inputs[1].data();
                let gx = a.needs[0].then(|| {
                    let mut d = vec![0.0; rows * c];
                    let mut dxh = vec![0.0; c];
                    for i in 0..rows {
                        let gr = &g[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gm[j];
                        }
                        let mg = dxh.iter().sum::<f64>() / c as f64;
                        let mgx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] = inv_std[i] * (dxh[j] - mg - xr[j] * mgx);
                        }
                    }
                    Tensor::new(a.inputs[0].shape(), d)
                });
                let ggamma = a.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((s, g), x) in acc.iter_mut().zip(gr).zip(xr) {
                            *s += g * x;
                        }
                    }
                    Tensor::new(&[c], acc)
                });
                let gbeta = a.needs[2].then(|| column_sums(a.grad, c));
                vec![gx, ggamma, gbeta]
            }
        })
    }

    pub fn trace(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        assert_eq!(r, c, "trace of non-square matrix");
        let t: f64 = (0..r).map(|i| self.value(x).data()[i * c + i]).sum();
        self.push(Tensor::scalar(t), &[x], move || {
            move |a: &BackwardArgs<'_>| {
                let g = a.grad.item();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + i] = g;
                }
                vec![Some(Tensor::new(&[r, c], d))]
            }
        })
    }

    /// Frobenius norm of any tensor, as a rank-0 tensor.
    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).sq_norm().sqrt();
        self.push(Tensor::scalar(n), &[x], || {
            |a: &BackwardArgs<'_>| {
                let n = a.output.item();
                let g = a.grad.item();
                let s = if n > 0.0 { g / n } else { 0.0 };
                vec![Some(a.inputs[0].map(|v| v * s))]
            }
        })
    }
}
