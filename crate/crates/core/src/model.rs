//! The full three-branch network: organ encoders, per-stage ORI, HFE on the
//! esophagus branch, branch heads and fusion.

use autodiff::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderConfig};
use crate::datamodel::Organ;
use crate::error::{contract, MoonError, Result};
use crate::fusion::{branch_head, Fusion, FusionStrategy};
use crate::hfe::Hfe;
use crate::losses::BatchLogits;
use crate::nn::{Linear, ParamStore, ParamVars};
use crate::ori::OriStage;
use crate::seed::mix_seed;

/// One value per organ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerOrgan<T> {
    pub esophagus: T,
    pub liver: T,
    pub spleen: T,
}

impl<T> PerOrgan<T> {
    pub fn get(&self, organ: Organ) -> &T {
        match organ {
            Organ::Esophagus => &self.esophagus,
            Organ::Liver => &self.liver,
            Organ::Spleen => &self.spleen,
        }
    }
}

/// Per-organ ROI dims: the cohort ROI sizes divided by 4.
pub const DESK_DIMS: PerOrgan<[usize; 3]> = PerOrgan {
    esophagus: [10, 10, 25],
    liver: [64, 49, 9],
    spleen: [38, 49, 6],
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Per-organ replacements for `encoder.strides`. The liver and spleen
    /// ROIs are wide but thin: a coarser stem keeps them cheap and a smaller
    /// cumulative stride along the last axis keeps them valid. The esophagus
    /// keeps a 5x5 cross-section in its final map so Grad-CAM can resolve
    /// lesions inside a 10x10 crop.
    pub organ_strides: PerOrgan<Option<Vec<[usize; 3]>>>,
    pub input_dims: PerOrgan<[usize; 3]>,
    pub fusion: FusionStrategy,
    pub lowrank_rank: usize,
    pub use_ori: bool,
    pub use_hfe: bool,
    pub ori_grid: [usize; 3],
    /// Train a single branch whose logits are the prediction.
    pub single_organ: Option<Organ>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let thin = vec![[4, 4, 2], [2, 2, 2], [2, 2, 1], [1, 1, 1]];
        Self {
            encoder: EncoderConfig::default(),
            organ_strides: PerOrgan {
                esophagus: Some(vec![[2, 2, 2], [1, 1, 1], [1, 1, 2], [1, 1, 1]]),
                liver: Some(thin.clone()),
                spleen: Some(thin),
            },
            input_dims: DESK_DIMS,
            fusion: FusionStrategy::Concat,
            lowrank_rank: 4,
            use_ori: true,
            use_hfe: true,
            ori_grid: [4, 4, 4],
            single_organ: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder_for(&self, organ: Organ) -> EncoderConfig {
        let mut cfg = self.encoder.clone();
        if let Some(s) = self.organ_strides.get(organ) {
            cfg.strides = s.clone();
        }
        cfg
    }

    pub fn organs(&self) -> Vec<Organ> {
        match self.single_organ {
            Some(o) => vec![o],
            None => Organ::ALL.to_vec(),
        }
    }

    /// ORI needs all three branches.
    pub fn ori_active(&self) -> bool {
        self.use_ori && self.single_organ.is_none()
    }

    pub fn hfe_active(&self) -> bool {
        self.use_hfe && matches!(self.single_organ, None | Some(Organ::Esophagus))
    }

    pub fn validate(&self) -> Result<()> {
        for organ in Organ::ALL {
            self.encoder_for(organ).validate()?;
        }
        if self.lowrank_rank == 0 || self.ori_grid.contains(&0) {
            return Err(MoonError::Config("lowrank_rank and ori_grid must be positive".into()));
        }
        Ok(())
    }

    /// Row label in Table-1 style reports.
    pub fn label(&self) -> String {
        match self.single_organ {
            Some(o) => format!("Single-organ ({o})"),
            None => {
                let mark = if self.use_ori || self.use_hfe { "" } else { "‡" };
                format!("MOON{mark} ({})", self.fusion)
            }
        }
    }
}

/// Network inputs for one case, `[H, W, D, 1]` per organ.
#[derive(Clone, Debug)]
pub struct CaseInputs {
    pub volumes: [Tensor; 3],
}

/// Graph outputs for one batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: BatchLogits,
    /// Per case, the last pre-pooling map of each active branch.
    pub final_maps: Vec<[Option<Var>; 3]>,
}

#[derive(Clone, Debug)]
pub struct MoonModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoders: [Option<Encoder>; 3],
    ori: Vec<OriStage>,
    hfe: Option<Hfe>,
    heads: [Option<Linear>; 3],
    fusion: Option<Fusion>,
}

impl MoonModel {
    /// Every component draws from its own seed stream so toggling one part
    /// leaves the initial weights of the others unchanged.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let rng_for = |tag: u64, idx: u64| ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[tag, idx]));
        let mut encoders: [Option<Encoder>; 3] = [None, None, None];
        let mut heads: [Option<Linear>; 3] = [None, None, None];
        for organ in cfg.organs() {
            let i = organ.index();
            let mut rng = rng_for(1, i as u64);
            encoders[i] = Some(Encoder::new(
                &mut store,
                &format!("enc.{organ}"),
                &cfg.encoder_for(organ),
                *cfg.input_dims.get(organ),
                &mut rng,
            )?);
        }
        let channels = cfg.encoder.channels.clone();
        let stages = channels.len();
        let mut ori = Vec::new();
        if cfg.ori_active() {
            let mut rng = rng_for(2, 0);
            for s in stages - 3..stages {
                ori.push(OriStage::new(
                    &mut store,
                    &format!("ori.stage{}", s + 1),
                    channels[s],
                    cfg.encoder.heads,
                    cfg.ori_grid,
                    &mut rng,
                ));
            }
        }
        let hfe = cfg.hfe_active().then(|| {
            let mut rng = rng_for(3, 0);
            Hfe::new(
                &mut store,
                "hfe",
                channels[stages - 3],
                channels[stages - 2],
                channels[stages - 1],
                &mut rng,
            )
        });
        let c = channels[stages - 1];
        for organ in cfg.organs() {
            let mut rng = rng_for(4, organ.index() as u64);
            heads[organ.index()] = Some(branch_head(&mut store, &format!("head.{organ}"), c, &mut rng));
        }
        let fusion = cfg.single_organ.is_none().then(|| {
            let mut rng = rng_for(5, 0);
            Fusion::new(&mut store, "fusion", cfg.fusion, c, cfg.lowrank_rank, &mut rng)
        });
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoders,
            ori,
            hfe,
            heads,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self, organ: Organ) -> Option<&Encoder> {
        self.encoders[organ.index()].as_ref()
    }

    pub fn ori_stages(&self) -> &[OriStage] {
        &self.ori
    }

    pub fn hfe(&self) -> Option<&Hfe> {
        self.hfe.as_ref()
    }

    pub fn check_case(&self, case: &CaseInputs) -> Result<()> {
        for organ in self.cfg.organs() {
            let want = self.cfg.input_dims.get(organ);
            let shape = case.volumes[organ.index()].shape();
            contract!(
                shape.len() == 4 && shape[..3] == want[..] && shape[3] == 1,
                "{} volume {:?} does not match configured dims {:?}",
                organ,
                shape,
                want
            );
        }
        Ok(())
    }

    /// Records the forward pass of a batch; `inputs[i][organ]` is a graph
    /// node holding that organ's `[H, W, D, 1]` volume.
    pub fn forward_vars(&self, g: &mut Graph, pv: &ParamVars, inputs: &[[Var; 3]]) -> Result<ForwardOutput> {
        contract!(!inputs.is_empty(), "empty batch");
        let organs = self.cfg.organs();
        let stages = self.cfg.encoder.channels.len();
        let mut pooled: [Vec<Var>; 3] = Default::default();
        let mut final_maps = Vec::with_capacity(inputs.len());
        for case in inputs {
            let mut cur: [Option<Var>; 3] = [None; 3];
            let mut eso_tail = Vec::with_capacity(3);
            for &organ in &organs {
                let enc = self.encoders[organ.index()].as_ref().expect("active encoder");
                enc.check_input(g, case[organ.index()])?;
                cur[organ.index()] = Some(case[organ.index()]);
            }
            for s in 0..stages {
                for &organ in &organs {
                    let i = organ.index();
                    let enc = self.encoders[i].as_ref().expect("active encoder");
                    cur[i] = Some(enc.stage_forward(g, pv, s, cur[i].expect("stage input"))?);
                }
                if s + 3 >= stages {
                    if let Some(ori) = self.ori.get(s + 3 - stages) {
                        let [e, l, sp] = cur.map(|v| v.expect("all branches active under ORI"));
                        let (e, l, sp) = ori.apply(g, pv, e, l, sp)?;
                        cur = [Some(e), Some(l), Some(sp)];
                    }
                    if let Some(e) = cur[0] {
                        eso_tail.push(e);
                    }
                }
            }
            if let Some(hfe) = &self.hfe {
                cur[0] = Some(hfe.enhance(g, pv, eso_tail[0], eso_tail[1], eso_tail[2])?);
            }
            for &organ in &organs {
                let i = organ.index();
                pooled[i].push(g.mean_rows(cur[i].expect("branch output")));
            }
            final_maps.push(cur);
        }
        let mut emb: [Option<Var>; 3] = [None; 3];
        let mut logits: [Option<Var>; 3] = [None; 3];
        for &organ in &organs {
            let i = organ.index();
            let e = g.stack_rows(&pooled[i]);
            emb[i] = Some(e);
            logits[i] = Some(self.heads[i].as_ref().expect("active head").forward(g, pv, e));
        }
        let logits = match &self.fusion {
            Some(f) => {
                let emb = emb.map(|v| v.expect("embedding"));
                let lg = logits.map(|v| v.expect("logits"));
                let fused = f.forward(g, pv, emb, lg, self.heads[0].as_ref().expect("esophagus head"))?;
                BatchLogits {
                    fused,
                    eso: lg[0],
                    liver: lg[1],
                    spleen: lg[2],
                }
            }
            None => {
                let only = logits[organs[0].index()].expect("single branch logits");
                BatchLogits {
                    fused: only,
                    eso: only,
                    liver: only,
                    spleen: only,
                }
            }
        };
        Ok(ForwardOutput { logits, final_maps })
    }

    /// Adds the batch volumes as constants and records the forward pass.
    pub fn forward(&self, g: &mut Graph, pv: &ParamVars, batch: &[&CaseInputs]) -> Result<ForwardOutput> {
        let mut vars = Vec::with_capacity(batch.len());
        for case in batch {
            self.check_case(case)?;
            vars.push(case.volumes.clone().map(|t| g.constant(t)));
        }
        self.forward_vars(g, pv, &vars)
    }

    /// Fused threshold logits per case, evaluated in chunks.
    pub fn predict(&self, cases: &[&CaseInputs]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(cases.len());
        for chunk in cases.chunks(16) {
            let mut g = Graph::new();
            let pv = self.store.bind(&mut g, false);
            let fo = self.forward(&mut g, &pv, chunk)?;
            let v = g.value(fo.logits.fused);
            out.extend(v.data().chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: vec![4, 8, 8, 8],
                heads: 2,
                ..EncoderConfig::default()
            },
            input_dims: PerOrgan {
                esophagus: [8, 8, 12],
                liver: [16, 16, 6],
                spleen: [16, 16, 4],
            },
            ..ModelConfig::default()
        }
    }

    fn case(cfg: &ModelConfig, shift: f64) -> CaseInputs {
        CaseInputs {
            volumes: Organ::ALL.map(|o| {
                let [h, w, d] = *cfg.input_dims.get(o);
                Tensor::from_fn(&[h, w, d, 1], |i| ((i as f64 * 0.31 + shift).sin() + 1.0) * 0.5)
            }),
        }
    }

    #[test]
    fn every_strategy_produces_finite_logits() {
        for fusion in FusionStrategy::ALL {
            let cfg = ModelConfig { fusion, ..tiny() };
            let model = MoonModel::new(&cfg).unwrap();
            let cases = [case(&cfg, 0.0), case(&cfg, 1.0)];
            let preds = model.predict(&cases.iter().collect::<Vec<_>>()).unwrap();
            assert_eq!(preds.len(), 2);
            assert!(preds.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn shared_components_keep_their_initial_weights_across_ablations() {
        let full = MoonModel::new(&tiny()).unwrap();
        let bare = MoonModel::new(&ModelConfig {
            use_ori: false,
            use_hfe: false,
            ..tiny()
        })
        .unwrap();
        for (name, t) in bare.params().iter() {
            let id = full.params().find(name).expect("shared name");
            assert_eq!(full.params().get(id), t, "{name}");
        }
        assert!(full.params().len() > bare.params().len());
    }

    #[test]
    fn single_organ_model_has_one_branch() {
        let cfg = ModelConfig {
            single_organ: Some(Organ::Esophagus),
            ..tiny()
        };
        let model = MoonModel::new(&cfg).unwrap();
        assert!(model.encoder(Organ::Liver).is_none());
        assert!(model.hfe().is_some());
        assert!(model.params().iter().all(|(n, _)| !n.contains("liver") && !n.starts_with("ori.")));
        let c = case(&cfg, 0.5);
        assert_eq!(model.predict(&[&c]).unwrap().len(), 1);
        assert_eq!(cfg.label(), "Single-organ (esophagus)");
    }

    #[test]
    fn wrong_volume_dims_are_rejected() {
        let cfg = tiny();
        let model = MoonModel::new(&cfg).unwrap();
        let mut c = case(&cfg, 0.0);
        c.volumes[1] = Tensor::zeros(&[4, 4, 4, 1]);
        assert!(matches!(model.predict(&[&c]), Err(MoonError::Contract(_))));
    }
}
