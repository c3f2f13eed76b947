//! Branch heads, the four fusion strategies, and ordinal decoding.

use std::fmt;

use autodiff::{sigmoid, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Grade, Task};
use crate::error::{contract, Result};
use crate::nn::{Init, Linear, ParamId, ParamStore, ParamVars};

/// Ordinal thresholds for three grades.
pub const NUM_THRESHOLDS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    Concat,
    PredSum,
    LowRank,
    #[serde(rename = "FiLM")]
    Film,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [Self::Concat, Self::PredSum, Self::LowRank, Self::Film];

    pub fn label(self) -> &'static str {
        match self {
            Self::Concat => "Concat",
            Self::PredSum => "PredSum",
            Self::LowRank => "LowRank",
            Self::Film => "FiLM",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Affine map from a pooled embedding to threshold logits.
pub fn branch_head<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Linear {
    Linear::new(store, name, dim, NUM_THRESHOLDS, true, Init::ScaledNormal { fan_in: dim, gain: 1.0 }, rng)
}

#[derive(Clone, Debug)]
enum FusionParams {
    Concat(Linear),
    PredSum,
    LowRank {
        factors: [Linear; 3],
        rank_weights: ParamId,
        bias: ParamId,
        rank: usize,
    },
    /// Output layer is the esophagus branch head.
    Film { gamma: Linear, beta: Linear },
}

/// Produces the unified logits `H_F` from branch embeddings and logits.
#[derive(Clone, Debug)]
pub struct Fusion {
    strategy: FusionStrategy,
    dim: usize,
    params: FusionParams,
}

impl Fusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        strategy: FusionStrategy,
        dim: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let params = match strategy {
            FusionStrategy::Concat => FusionParams::Concat(Linear::new(
                store,
                &format!("{name}.concat"),
                3 * dim,
                NUM_THRESHOLDS,
                true,
                Init::ScaledNormal { fan_in: 3 * dim, gain: 1.0 },
                rng,
            )),
            FusionStrategy::PredSum => FusionParams::PredSum,
            FusionStrategy::LowRank => {
                let factors = [0, 1, 2].map(|m| {
                    Linear::new(
                        store,
                        &format!("{name}.lowrank.factor{m}"),
                        dim,
                        rank * NUM_THRESHOLDS,
                        true,
                        Init::ScaledNormal { fan_in: dim, gain: 1.0 },
                        rng,
                    )
                });
                // Bias 1 keeps each factor's 1-augmented term active at init.
                for f in &factors {
                    store.get_mut(f.bias.expect("factor bias")).data_mut().fill(1.0);
                }
                let rank_weights = store.add(
                    format!("{name}.lowrank.rank_weights"),
                    Init::ScaledNormal { fan_in: rank, gain: 1.0 }.tensor(&[1, rank], rng),
                );
                let bias = store.add(format!("{name}.lowrank.bias"), Tensor::zeros(&[NUM_THRESHOLDS]));
                FusionParams::LowRank {
                    factors,
                    rank_weights,
                    bias,
                    rank,
                }
            }
            FusionStrategy::Film => {
                let gen = |store: &mut ParamStore, n: &str, rng: &mut R| {
                    Linear::new(
                        store,
                        &format!("{name}.film.{n}"),
                        2 * dim,
                        dim,
                        true,
                        Init::ScaledNormal { fan_in: 2 * dim, gain: 0.1 },
                        rng,
                    )
                };
                let gamma = gen(store, "gamma", rng);
                let beta = gen(store, "beta", rng);
                store.get_mut(gamma.bias.expect("gamma bias")).data_mut().fill(1.0);
                FusionParams::Film { gamma, beta }
            }
        };
        Self { strategy, dim, params }
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.strategy
    }

    /// `emb` holds `[n, C]` embeddings for esophagus, liver, spleen, `logits`
    /// the matching `[n, 2]` branch logits; `eso_head` is the esophagus head.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        emb: [Var; 3],
        logits: [Var; 3],
        eso_head: &Linear,
    ) -> Result<Var> {
        let n = g.shape(emb[0])[0];
        for e in emb {
            contract!(
                g.shape(e) == [n, self.dim],
                "fusion expects [{}, {}] embeddings, got {:?}",
                n,
                self.dim,
                g.shape(e)
            );
        }
        Ok(match &self.params {
            FusionParams::Concat(lin) => {
                let joint = g.concat_last(&emb);
                lin.forward(g, pv, joint)
            }
            FusionParams::PredSum => {
                let s = g.add(logits[0], logits[1]);
                g.add(s, logits[2])
            }
            FusionParams::LowRank {
                factors,
                rank_weights,
                bias,
                rank,
            } => {
                let mut prod = factors[0].forward(g, pv, emb[0]);
                for m in 1..3 {
                    let z = factors[m].forward(g, pv, emb[m]);
                    prod = g.mul(prod, z);
                }
                // out[i, j] = sum_r w_r * prod[i, r * 2 + j] + b_j
                let t = NUM_THRESHOLDS;
                let expand = g.constant(Tensor::from_fn(&[*rank, rank * t], |k| {
                    let (r, col) = (k / (rank * t), k % (rank * t));
                    if col / t == r {
                        1.0
                    } else {
                        0.0
                    }
                }));
                let w = g.matmul(pv[*rank_weights], expand);
                let w = g.reshape(w, &[rank * t]);
                let weighted = g.mul_bias(prod, w);
                let collapse = g.constant(Tensor::from_fn(&[rank * t, t], |k| {
                    if (k / t) % t == k % t {
                        1.0
                    } else {
                        0.0
                    }
                }));
                let out = g.matmul(weighted, collapse);
                g.add_bias(out, pv[*bias])
            }
            FusionParams::Film { gamma, beta } => {
                let ctx = g.concat_last(&emb[1..]);
                let gm = gamma.forward(g, pv, ctx);
                let bt = beta.forward(g, pv, ctx);
                let m = g.mul(gm, emb[0]);
                let m = g.add(m, bt);
                eso_head.forward(g, pv, m)
            }
        })
    }
}

/// Grade from threshold logits under the prefix rule: count leading
/// thresholds with `sigmoid(h) > 0.5`.
pub fn ordinal_decode(h: &[f64]) -> Grade {
    let k = h.iter().take_while(|&&v| sigmoid(v) > 0.5).count();
    Grade::from_level(k.min(2)).expect("level in range")
}

/// Probability of the positive class of `task`.
pub fn task_score(h: &[f64], task: Task) -> f64 {
    match task {
        Task::AtLeastG2 => sigmoid(h[0]),
        Task::G3 => sigmoid(h[1]),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(strategy: FusionStrategy, dim: usize, rank: usize) -> (ParamStore, Fusion, Linear) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let head = branch_head(&mut store, "head.esophagus", dim, &mut rng);
        let fusion = Fusion::new(&mut store, "fusion", strategy, dim, rank, &mut rng);
        (store, fusion, head)
    }

    fn run(store: &ParamStore, fusion: &Fusion, head: &Linear, emb: [Tensor; 3], logits: [Tensor; 3]) -> Tensor {
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let e = emb.map(|t| g.constant(t));
        let l = logits.map(|t| g.constant(t));
        let out = fusion.forward(&mut g, &pv, e, l, head).unwrap();
        g.value(out).clone()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec())
    }

    #[test]
    fn decoding_follows_prefix_rule() {
        assert_eq!(ordinal_decode(&[-3.0, -3.0]), Grade::G1);
        assert_eq!(ordinal_decode(&[3.0, -3.0]), Grade::G2);
        assert_eq!(ordinal_decode(&[3.0, 3.0]), Grade::G3);
        assert_eq!(ordinal_decode(&[-3.0, 3.0]), Grade::G1);
        assert_eq!(ordinal_decode(&[0.0, 0.0]), Grade::G1);
    }

    #[test]
    fn task_scores_are_threshold_sigmoids() {
        assert_eq!(task_score(&[0.0, 0.0], Task::AtLeastG2), 0.5);
        assert_eq!(task_score(&[0.0, 0.0], Task::G3), 0.5);
        assert!((task_score(&[0.5, -0.5], Task::AtLeastG2) - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
        assert!((task_score(&[0.5, -0.5], Task::G3) - 1.0 / (1.0 + 0.5f64.exp())).abs() < 1e-15);
        assert!(task_score(&[40.0, -40.0], Task::AtLeastG2) > 1.0 - 1e-12);
        assert!(task_score(&[40.0, -40.0], Task::G3) < 1e-12);
    }

    #[test]
    fn pred_sum_adds_branch_logits() {
        let (store, fusion, head) = setup(FusionStrategy::PredSum, 3, 4);
        let emb = [row(&[0.0; 3]), row(&[0.0; 3]), row(&[0.0; 3])];
        let out = run(&store, &fusion, &head, emb, [row(&[1.0, 0.0]), row(&[0.0, 1.0]), row(&[1.0, 1.0])]);
        assert_eq!(out.data(), &[2.0, 2.0]);
    }

    #[test]
    fn identity_film_equals_esophagus_head() {
        let (mut store, fusion, head) = setup(FusionStrategy::Film, 3, 4);
        store.zero_prefix("fusion.film.gamma.weight");
        store.zero_prefix("fusion.film.beta");
        let e = [0.3, -1.2, 2.0];
        let out = run(
            &store,
            &fusion,
            &head,
            [row(&e), row(&[5.0, 1.0, -2.0]), row(&[0.1, 0.2, 0.3])],
            [row(&[0.0; 2]), row(&[0.0; 2]), row(&[0.0; 2])],
        );
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let x = g.constant(row(&e));
        let direct = head.forward(&mut g, &pv, x);
        assert_eq!(&out, g.value(direct));
    }

    #[test]
    fn rank_one_low_rank_matches_hand_expansion() {
        let (mut store, fusion, head) = setup(FusionStrategy::LowRank, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut factors = Vec::new();
        for m in 0..3 {
            let w = store.find(&format!("fusion.lowrank.factor{m}.weight")).unwrap();
            let b = store.find(&format!("fusion.lowrank.factor{m}.bias")).unwrap();
            let wv = Tensor::from_fn(&[2, 2], |_| rng.random_range(-1.0..1.0));
            let bv = Tensor::from_fn(&[2], |_| rng.random_range(-1.0..1.0));
            *store.get_mut(w) = wv.clone();
            *store.get_mut(b) = bv.clone();
            factors.push((wv, bv));
        }
        let rw = store.find("fusion.lowrank.rank_weights").unwrap();
        *store.get_mut(rw) = Tensor::new(&[1, 1], vec![0.7]);
        let fb = store.find("fusion.lowrank.bias").unwrap();
        *store.get_mut(fb) = Tensor::new(&[2], vec![0.05, -0.1]);
        let emb = [[0.4, -0.9], [1.1, 0.2], [-0.3, 0.6]];
        let out = run(
            &store,
            &fusion,
            &head,
            emb.map(|e| row(&e)),
            [row(&[0.0; 2]), row(&[0.0; 2]), row(&[0.0; 2])],
        );
        for j in 0..2 {
            let mut p = 1.0;
            for (m, (w, b)) in factors.iter().enumerate() {
                // [e; 1] times the augmented factor column j.
                p *= emb[m][0] * w.data()[j] + emb[m][1] * w.data()[2 + j] + b.data()[j];
            }
            let want = 0.7 * p + [0.05, -0.1][j];
            assert!((out.data()[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn low_rank_weights_collapse_over_rank() {
        let (store, fusion, head) = setup(FusionStrategy::LowRank, 3, 4);
        let out = run(
            &store,
            &fusion,
            &head,
            [row(&[0.1, 0.2, 0.3]), row(&[1.0, -1.0, 0.5]), row(&[0.0, 0.3, -0.2])],
            [row(&[0.0; 2]), row(&[0.0; 2]), row(&[0.0; 2])],
        );
        assert_eq!(out.shape(), &[1, 2]);
        assert!(out.all_finite());
    }

    #[test]
    fn concat_rejects_wrong_dims() {
        let (store, fusion, head) = setup(FusionStrategy::Concat, 3, 4);
        let mut g = Graph::new();
        let pv = store.bind(&mut g, false);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.constant(Tensor::zeros(&[2, 2]));
        assert!(fusion.forward(&mut g, &pv, [a, a, b], [l, l, l], &head).is_err());
    }
}
