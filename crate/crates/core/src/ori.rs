//! Organ representation interaction: pairwise attention between the
//! esophagus map and a liver or spleen map on a shared coarse grid, fed back
//! as residual deltas at each organ's native resolution.

use autodiff::{Graph, Var};
use rand::Rng;

use crate::backbone::multi_head_attention;
use crate::error::{contract, Result};
use crate::nn::{Init, Linear, ParamStore, ParamVars};

/// Adaptive average pooling with the grid checked against the source dims.
pub fn pool_to_common_grid(g: &mut Graph, f: Var, grid: [usize; 3]) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    contract!(shape.len() == 4, "expected [H, W, D, C] map, got {:?}", shape);
    contract!(
        (0..3).all(|a| grid[a] >= 1 && grid[a] <= shape[a]),
        "grid {:?} does not fit source {:?}",
        grid,
        &shape[..3]
    );
    Ok(g.adaptive_avg_pool3d(f, grid))
}

/// Per-axis minimum of the requested grid and every map's dims, so pooling
/// never has to upsample.
pub fn fit_grid(grid: [usize; 3], dims: &[[usize; 3]]) -> [usize; 3] {
    [0, 1, 2].map(|a| dims.iter().fold(grid[a], |m, d| m.min(d[a])).max(1))
}

/// Parameters of one organ pair at one stage.
#[derive(Clone, Debug)]
pub struct OriPair {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// The `2C x 2C` output projection; no bias.
    pub proj: Linear,
    pub refine_e: Linear,
    pub refine_x: Linear,
    pub channels: usize,
    pub heads: usize,
}

impl OriPair {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, heads: usize, rng: &mut R) -> Self {
        let c2 = 2 * channels;
        let attn_init = Init::ScaledNormal { fan_in: c2, gain: 1.0 };
        let lin = |store: &mut ParamStore, n: &str, i: usize, o: usize, bias: bool, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, o, bias, Init::ScaledNormal { fan_in: i, gain: 1.0 }, rng)
        };
        Self {
            q: Linear::new(store, &format!("{name}.q"), c2, c2, true, attn_init, rng),
            k: Linear::new(store, &format!("{name}.k"), c2, c2, true, attn_init, rng),
            v: Linear::new(store, &format!("{name}.v"), c2, c2, true, attn_init, rng),
            proj: lin(store, "proj", c2, c2, false, rng),
            // Zero refinements make the stage an identity at initialization.
            refine_e: Linear::new(store, &format!("{name}.refine_e"), channels, channels, true, Init::Zeros, rng),
            refine_x: Linear::new(store, &format!("{name}.refine_x"), channels, channels, true, Init::Zeros, rng),
            channels,
            heads,
        }
    }

    /// Returns `(dF_E, dF_X)` at the native dims of `f_e` and `f_x`.
    pub fn interact(&self, g: &mut Graph, pv: &ParamVars, f_e: Var, f_x: Var, grid: [usize; 3]) -> Result<(Var, Var)> {
        let (se, sx) = (g.shape(f_e).to_vec(), g.shape(f_x).to_vec());
        contract!(
            se.len() == 4 && sx.len() == 4 && se[3] == self.channels && sx[3] == self.channels,
            "ORI pair expects {} channels, got {:?} and {:?}",
            self.channels,
            se,
            sx
        );
        let c = self.channels;
        let pe = pool_to_common_grid(g, f_e, grid)?;
        let px = pool_to_common_grid(g, f_x, grid)?;
        let n: usize = grid.iter().product();
        let joint = g.concat_last(&[pe, px]);
        let tokens = g.reshape(joint, &[n, 2 * c]);
        let q = self.q.forward(g, pv, tokens);
        let k = self.k.forward(g, pv, tokens);
        let v = self.v.forward(g, pv, tokens);
        let attended = multi_head_attention(g, q, k, v, self.heads)?;
        let projected = self.proj.forward(g, pv, attended);
        let grid_shape = [grid[0], grid[1], grid[2], c];
        let [de, dx] = [(0, &self.refine_e, &se), (c, &self.refine_x, &sx)].map(|(start, refine, native)| {
            let half = g.slice_last(projected, start, c);
            let half = g.reshape(half, &grid_shape);
            let half = refine.forward(g, pv, half);
            g.trilinear_resize(half, [native[0], native[1], native[2]])
        });
        Ok((de, dx))
    }
}

/// Both organ pairs of one stage.
#[derive(Clone, Debug)]
pub struct OriStage {
    pub liver: OriPair,
    pub spleen: OriPair,
    pub grid: [usize; 3],
}

impl OriStage {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        grid: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self {
            liver: OriPair::new(store, &format!("{name}.el"), channels, heads, rng),
            spleen: OriPair::new(store, &format!("{name}.es"), channels, heads, rng),
            grid,
        }
    }

    /// `F_E + (dE_L + dE_S) / 2`, `F_L + dL`, `F_S + dS`.
    pub fn apply(&self, g: &mut Graph, pv: &ParamVars, f_e: Var, f_l: Var, f_s: Var) -> Result<(Var, Var, Var)> {
        let dims: Vec<[usize; 3]> = [f_e, f_l, f_s]
            .iter()
            .map(|&f| {
                let s = g.shape(f);
                [s[0], s[1], s[2]]
            })
            .collect();
        let grid = fit_grid(self.grid, &dims);
        let (de_l, dl) = self.liver.interact(g, pv, f_e, f_l, grid)?;
        let (de_s, ds) = self.spleen.interact(g, pv, f_e, f_s, grid)?;
        let de = g.add(de_l, de_s);
        let de = g.scale(de, 0.5);
        Ok((g.add(f_e, de), g.add(f_l, dl), g.add(f_s, ds)))
    }
}

#[cfg(test)]
mod tests {
    use autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn map(dims: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pooling_octants_match_direct_means() {
        let src = map([4, 4, 4, 2], 0);
        let mut g = Graph::new();
        let x = g.constant(src.clone());
        let p = pool_to_common_grid(&mut g, x, [2, 2, 2]).unwrap();
        let out = g.value(p);
        for (ox, oy, oz, c) in octant_cells() {
            let mut s = 0.0;
            for dx in 0..2 {
                for dy in 0..2 {
                    for dz in 0..2 {
                        let (x, y, z) = (2 * ox + dx, 2 * oy + dy, 2 * oz + dz);
                        s += src.data()[((x * 4 + y) * 4 + z) * 2 + c];
                    }
                }
            }
            let got = out.data()[((ox * 2 + oy) * 2 + oz) * 2 + c];
            assert!((got - s / 8.0).abs() < 1e-12);
        }
        let same = pool_to_common_grid(&mut g, x, [4, 4, 4]).unwrap();
        assert_eq!(g.value(same), &src);
        assert!(pool_to_common_grid(&mut g, x, [5, 4, 4]).is_err());
    }

    fn octant_cells() -> impl Iterator<Item = (usize, usize, usize, usize)> {
        (0..16).map(|i| (i >> 3 & 1, i >> 2 & 1, i >> 1 & 1, i & 1))
    }

    #[test]
    fn output_is_resized_to_native_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let pair = OriPair::new(&mut store, "ori", 4, 2, &mut rng);
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let fe = g.constant(map([10, 10, 25, 4], 2));
        let fl = g.constant(map([6, 5, 4, 4], 3));
        let (de, dl) = pair.interact(&mut g, &pv, fe, fl, [4, 4, 4]).unwrap();
        assert_eq!(g.shape(de), &[10, 10, 25, 4]);
        assert_eq!(g.shape(dl), &[6, 5, 4, 4]);
    }

    #[test]
    fn zero_inputs_give_zero_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let stage = OriStage::new(&mut store, "ori", 4, 2, [2, 2, 2], &mut rng);
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let z = g.constant(Tensor::zeros(&[3, 3, 3, 4]));
        let (e, l, s) = stage.apply(&mut g, &pv, z, z, z).unwrap();
        for v in [e, l, s] {
            assert_eq!(g.value(v).max_abs(), 0.0);
        }
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let pair = OriPair::new(&mut store, "ori", 4, 2, &mut rng);
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let fe = g.constant(Tensor::zeros(&[2, 2, 2, 4]));
        let fl = g.constant(Tensor::zeros(&[2, 2, 2, 3]));
        assert!(pair.interact(&mut g, &pv, fe, fl, [1, 1, 1]).is_err());
    }

    #[test]
    fn grid_is_clamped_to_smallest_map() {
        assert_eq!(fit_grid([4, 4, 4], &[[2, 2, 4], [8, 7, 2], [5, 7, 1]]), [2, 2, 1]);
        assert_eq!(fit_grid([4, 4, 4], &[[9, 9, 9]]), [4, 4, 4]);
    }
}
