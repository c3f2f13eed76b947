//! Hierarchical feature enhancement on the esophagus branch: queries from the
//! intermediate map, keys from the deeper map, values from the deepest map.

use autodiff::{Graph, Var};
use rand::Rng;

use crate::backbone::attention;
use crate::error::{contract, Result};
use crate::nn::{Init, Linear, ParamStore, ParamVars};

#[derive(Clone, Debug)]
pub struct Hfe {
    /// Point-wise adapters taking F1 and F2 to the channel count of F3.
    pub adapt1: Linear,
    pub adapt2: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub fuse: Linear,
    pub channels: usize,
}

impl Hfe {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c1: usize, c2: usize, c: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore, n: &str, i: usize, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, c, true, Init::ScaledNormal { fan_in: i, gain: 1.0 }, rng)
        };
        Self {
            adapt1: lin(store, "adapt1", c1, rng),
            adapt2: lin(store, "adapt2", c2, rng),
            q: lin(store, "q", c, rng),
            k: lin(store, "k", c, rng),
            v: lin(store, "v", c, rng),
            // Zero so the enhancement starts as an identity.
            fuse: Linear::new(store, &format!("{name}.fuse"), c, c, true, Init::Zeros, rng),
            channels: c,
        }
    }

    /// Returns the enhanced deepest map, same shape as `f3`.
    pub fn enhance(&self, g: &mut Graph, pv: &ParamVars, f1: Var, f2: Var, f3: Var) -> Result<Var> {
        let s3 = g.shape(f3).to_vec();
        contract!(
            s3.len() == 4 && s3[3] == self.channels,
            "HFE expects a [H, W, D, {}] deepest map, got {:?}",
            self.channels,
            s3
        );
        let grid = [s3[0], s3[1], s3[2]];
        let n: usize = grid.iter().product();
        let mut adapted = [f1, f2];
        for (slot, adapter) in adapted.iter_mut().zip([&self.adapt1, &self.adapt2]) {
            let s = g.shape(*slot).to_vec();
            contract!(
                s.len() == 4 && s[3] == adapter.in_dim && (0..3).all(|a| s[a] >= grid[a]),
                "HFE input {:?} cannot be aligned to {:?} with {} channels",
                s,
                s3,
                adapter.in_dim
            );
            let pooled = g.adaptive_avg_pool3d(*slot, grid);
            let pooled = adapter.forward(g, pv, pooled);
            *slot = g.reshape(pooled, &[n, self.channels]);
        }
        let t3 = g.reshape(f3, &[n, self.channels]);
        let q = self.q.forward(g, pv, adapted[0]);
        let k = self.k.forward(g, pv, adapted[1]);
        let v = self.v.forward(g, pv, t3);
        let attended = attention(g, q, k, v)?;
        let fused = self.fuse.forward(g, pv, attended);
        let fused = g.reshape(fused, &s3);
        Ok(g.add(f3, fused))
    }
}

#[cfg(test)]
mod tests {
    use autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn constant_keys_attend_to_the_mean_value_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let hfe = Hfe::new(&mut store, "hfe", 3, 4, 4, &mut rng);
        // Identity value and fusion maps so the residual is the attended mean.
        for lin in [&hfe.v, &hfe.fuse] {
            *store.get_mut(lin.weight) = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        }
        let f1 = Tensor::from_fn(&[4, 4, 4, 3], |i| (i as f64 * 0.37).sin());
        let f3 = Tensor::from_fn(&[2, 2, 2, 4], |i| (i as f64 * 0.11).cos());
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let a = g.constant(f1);
        let b = g.constant(Tensor::full(&[3, 3, 3, 4], 0.7));
        let c = g.constant(f3.clone());
        let out = hfe.enhance(&mut g, &pv, a, b, c).unwrap();
        let out = g.value(out);
        for ch in 0..4 {
            let mean = (0..8).map(|p| f3.data()[p * 4 + ch]).sum::<f64>() / 8.0;
            for p in 0..8 {
                let want = f3.data()[p * 4 + ch] + mean;
                assert!((out.data()[p * 4 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let hfe = Hfe::new(&mut store, "hfe", 2, 4, 4, &mut rng);
        store.zero_prefix("hfe.");
        let f3 = Tensor::from_fn(&[2, 2, 3, 4], |i| i as f64 - 7.5);
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let a = g.constant(Tensor::from_fn(&[3, 3, 5, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 3, 4], |i| -(i as f64)));
        let c = g.constant(f3.clone());
        let out = hfe.enhance(&mut g, &pv, a, b, c).unwrap();
        assert_eq!(g.value(out), &f3);
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let hfe = Hfe::new(&mut store, "hfe", 2, 4, 4, &mut rng);
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let a = g.constant(Tensor::zeros(&[2, 2, 2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2, 2, 4]));
        assert!(hfe.enhance(&mut g, &pv, a, b, b).is_err());
    }
}
