use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// tanh through a single exp; saturates cleanly at both ends.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], move || {
            move |a: &crate::BackwardArgs<'_>| {
                let xv = a.inputs[0].data();
                let yv = a.output.data();
                let g = a.grad.data();
                let data = g.iter().zip(xv.iter().zip(yv)).map(|(g, (x, y))| g * df(*x, *y)).collect();
                vec![Some(Tensor::new(a.grad.shape(), data))]
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, &[x], move || {
            move |a: &crate::BackwardArgs<'_>| vec![Some(a.grad.map(|g| g * s))]
        })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, &[x], || |a: &crate::BackwardArgs<'_>| vec![Some(a.grad.clone())])
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let value = self.value(x).zip_map(self.value(y), |a, b| a + b);
        self.push(value, &[x, y], || {
            |a: &crate::BackwardArgs<'_>| {
                vec![
                    a.needs[0].then(|| a.grad.clone()),
                    a.needs[1].then(|| a.grad.clone()),
                ]
            }
        })
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        let value = self.value(x).zip_map(self.value(y), |a, b| a - b);
        self.push(value, &[x, y], || {
            |a: &crate::BackwardArgs<'_>| {
                vec![
                    a.needs[0].then(|| a.grad.clone()),
                    a.needs[1].then(|| a.grad.map(|g| -g)),
                ]
            }
        })
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Var {
        let value = self.value(x).zip_map(self.value(y), |a, b| a * b);
        self.push(value, &[x, y], || {
            |a: &crate::BackwardArgs<'_>| {
                vec![
                    a.needs[0].then(|| a.grad.zip_map(a.inputs[1], |g, b| g * b)),
                    a.needs[1].then(|| a.grad.zip_map(a.inputs[0], |g, x| g * x)),
                ]
            }
        })
    }

    /// Elementwise `x / y`.
    pub fn div(&mut self, x: Var, y: Var) -> Var {
        let value = self.value(x).zip_map(self.value(y), |a, b| a / b);
        self.push(value, &[x, y], || {
            |a: &crate::BackwardArgs<'_>| {
                let y = a.inputs[1];
                vec![
                    a.needs[0].then(|| a.grad.zip_map(y, |g, b| g / b)),
                    a.needs[1].then(|| {
                        let gy = a.grad.zip_map(a.output, |g, q| g * q);
                        gy.zip_map(y, |v, b| -v / b)
                    }),
                ]
            }
        })
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], || {
            |a: &crate::BackwardArgs<'_>| {
                vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.item()))]
            }
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        self.push(value, &[x], || {
            |a: &crate::BackwardArgs<'_>| {
                vec![Some(a.grad.clone().reshaped(a.inputs[0].shape()))]
            }
        })
    }

    /// `x + bias` with `bias` (length = last dim of `x`) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = bv.len();
        assert_eq!(
            *xv.shape().last().expect("add_bias on a scalar"),
            c,
            "bias length {} does not match trailing dim of {:?}",
            c,
            xv.shape()
        );
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let bshape = bv.shape().to_vec();
        self.push(value, &[x, bias], move || {
            move |a: &crate::BackwardArgs<'_>| {
                let gb = a.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for row in a.grad.data().chunks(c) {
                        for (s, g) in acc.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                    Tensor::new(&bshape, acc)
                });
                vec![a.needs[0].then(|| a.grad.clone()), gb]
            }
        })
    }

    /// `x * scale` with `scale` (length = last dim of `x`) broadcast over rows.
    pub fn mul_bias(&mut self, x: Var, scale: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(scale);
        let c = sv.len();
        assert_eq!(*xv.shape().last().expect("mul_bias on a scalar"), c);
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(sv.data()) {
                *v *= s;
            }
        }
        let sshape = sv.shape().to_vec();
        self.push(value, &[x, scale], move || {
            move |a: &crate::BackwardArgs<'_>| {
                let s = a.inputs[1].data();
                let gx = a.needs[0].then(|| {
                    let mut g = a.grad.clone();
                    for row in g.data_mut().chunks_mut(c) {
                        for (v, sv) in row.iter_mut().zip(s) {
                            *v *= sv;
                        }
                    }
                    g
                });
                let gs = a.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (grow, xrow) in a.grad.data().chunks(c).zip(a.inputs[0].data().chunks(c)) {
                        for j in 0..c {
                            acc[j] += grow[j] * xrow[j];
                        }
                    }
                    Tensor::new(&sshape, acc)
                });
                vec![gx, gs]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(0.5) - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn repeated_parent_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2], vec![3.0, -1.0]));
        let y = g.mul(x, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
    }
}
