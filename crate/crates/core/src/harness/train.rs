use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use autodiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::checkpoint::Checkpoint;
use super::data::Dataset;
use super::optim::{clip_global_norm, Adam, AdamConfig};
use crate::datamodel::{ordinal_encode, Organ};
use crate::error::{io_err, MoonError, Result};
use crate::losses::{overall_loss, LossConfig};
use crate::metrics::{evaluate_logits, MetricSet};
use crate::model::{CaseInputs, ModelConfig, MoonModel};
use crate::seed::mix_seed;

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// The learning rate halves after every this many epochs.
    pub lr_halve_every: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub use_cca: bool,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-5,
            lr_halve_every: 20,
            batch_size: 8,
            clip_norm: 5.0,
            use_cca: true,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MoonError::Config(m.into()));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        if self.batch_size == 0 || self.lr_halve_every == 0 {
            return bad("train.batch_size and train.lr_halve_every must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm must be positive");
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    /// Learning rate of the 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch.max(1) - 1) / self.lr_halve_every;
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "val_acc_geG2")]
    pub val_acc_ge_g2: Option<f64>,
    #[serde(rename = "val_auc_geG2")]
    pub val_auc_ge_g2: Option<f64>,
    #[serde(rename = "val_acc_G3")]
    pub val_acc_g3: Option<f64>,
    #[serde(rename = "val_auc_G3")]
    pub val_auc_g3: Option<f64>,
}

pub struct TrainOutcome {
    pub model: MoonModel,
    /// Epoch, validation score and weights of the best validation epoch.
    pub best: Option<(usize, f64, MoonModel)>,
    pub log: Vec<EpochRecord>,
}

/// Network inputs for the given cases, without augmentation.
pub fn case_inputs(data: &Dataset, idx: &[usize]) -> Vec<CaseInputs> {
    idx.iter().map(|&i| data.cases[i].inputs()).collect()
}

pub fn evaluate_model(model: &MoonModel, data: &Dataset, idx: &[usize]) -> Result<MetricSet> {
    let inputs = case_inputs(data, idx);
    let refs: Vec<&CaseInputs> = inputs.iter().collect();
    let logits = model.predict(&refs)?;
    evaluate_logits(&logits, &data.grades(idx))
}

/// Trains a fresh model. With `out` set, writes `train_log.jsonl`,
/// `final.ckpt` and (given validation cases) `best.ckpt` there.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(MoonError::Contract("training set is empty".into()));
    }
    let mut model = MoonModel::new(model_cfg)?;
    let mut adam = Adam::new(cfg.adam, model.params().values());
    let use_cca = cfg.use_cca && model_cfg.single_organ.is_none();
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("train_log.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(io_err(&p))?), p))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, MoonModel)> = None;
    let mut order = train_idx.to_vec();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.copy_from_slice(train_idx);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<CaseInputs> = chunk
                .iter()
                .map(|&i| {
                    let case = &data.cases[i];
                    let volumes = Organ::ALL.map(|o| {
                        let seed = mix_seed(cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64, o.index() as u64]);
                        augment(&case.volumes[o.index()], seed, &cfg.augment).to_tensor()
                    });
                    CaseInputs { volumes }
                })
                .collect();
            let refs: Vec<&CaseInputs> = inputs.iter().collect();
            let targets: Vec<_> = chunk.iter().map(|&i| ordinal_encode(data.cases[i].grade)).collect();
            let mut g = Graph::new();
            let pv = model.params().bind(&mut g, true);
            let fo = model.forward(&mut g, &pv, &refs)?;
            // Diverged weights show up as non-finite logits, which the loss
            // rejects; report both the same way.
            let l = &fo.logits;
            let finite = [l.fused, l.eso, l.liver, l.spleen].iter().all(|&v| g.value(v).data().iter().all(|x| x.is_finite()));
            let terms = if finite {
                Some(overall_loss(&mut g, fo.logits, &targets, &cfg.loss, use_cca)?)
            } else {
                None
            };
            let loss = terms.as_ref().map_or(f64::NAN, |t| g.value(t.total).item());
            let Some(terms) = terms.filter(|_| loss.is_finite()) else {
                let cases: Vec<String> = chunk.iter().map(|&i| data.cases[i].id.clone()).collect();
                log::error!("non-finite loss at epoch {epoch}, batch {b}: cases {cases:?}");
                if let Some(dir) = out {
                    let dump = serde_json::json!({ "epoch": epoch, "batch": b, "cases": cases, "loss": loss.to_string() });
                    let p = dir.join("nonfinite_batch.json");
                    fs::write(&p, dump.to_string()).map_err(io_err(&p))?;
                }
                return Err(MoonError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    cases,
                });
            };
            let mut grads = g.backward(terms.total);
            let mut flat: Vec<Tensor> = pv
                .vars()
                .iter()
                .zip(model.params().values())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let norm = clip_global_norm(&mut flat, cfg.clip_norm);
            if norm > cfg.clip_norm {
                log::debug!("epoch {epoch} batch {b}: gradient norm {norm:.3} clipped to {}", cfg.clip_norm);
            }
            adam.step(model.params_mut().values_mut(), &flat, lr);
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val = if val_idx.is_empty() {
            None
        } else {
            match evaluate_model(&model, data, val_idx) {
                Ok(m) => Some(m),
                Err(MoonError::UndefinedAuc) => None,
                Err(e) => return Err(e),
            }
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_acc_ge_g2: val.map(|m| m.ge_g2.acc),
            val_auc_ge_g2: val.map(|m| m.ge_g2.auc),
            val_acc_g3: val.map(|m| m.g3.acc),
            val_auc_g3: val.map(|m| m.g3.auc),
        };
        log::info!("epoch {epoch}: lr {lr:.3e}, train loss {train_loss:.5}");
        if let Some((w, p)) = log_file.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io_err(p.as_path()))?;
        }
        log.push(rec);
        if let Some(m) = val {
            let score = m.mean_auc();
            if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                best = Some((epoch, score, model.clone()));
            }
        }
    }
    if let Some((mut w, p)) = log_file {
        w.flush().map_err(io_err(p))?;
    }
    if let Some(dir) = out {
        Checkpoint::from_model(&model, Some(cfg), cfg.epochs).save(&dir.join("final.ckpt"))?;
        if let Some((epoch, _, m)) = &best {
            Checkpoint::from_model(m, Some(cfg), *epoch).save(&dir.join("best.ckpt"))?;
        }
    }
    Ok(TrainOutcome { model, best, log })
}
