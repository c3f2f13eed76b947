//! Cross-validation, held-out evaluation and the strategy/ablation grids.

use std::path::Path;

use super::data::Dataset;
use super::train::{evaluate_model, train, TrainConfig};
use crate::datamodel::{stratified_kfold, FoldSplit, Organ};
use crate::error::Result;
use crate::fusion::FusionStrategy;
use crate::metrics::{aggregate_cv, AblationFlags, Aggregate, MetricSet, MetricsReport, ReportRow};
use crate::model::{ModelConfig, MoonModel};

/// Per-fold metrics of one cross-validation run.
#[derive(Clone, Debug)]
pub struct CrossvalResult {
    pub split: FoldSplit,
    pub folds: Vec<MetricSet>,
    pub aggregate: Aggregate,
}

/// Trains one model per fold on the remaining folds and scores it on the
/// held-out fold. `model_cfg.seed` and `train_cfg.seed` are used as given.
pub fn run_crossval(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    k: usize,
    split_seed: u64,
    out: Option<&Path>,
) -> Result<CrossvalResult> {
    let split = stratified_kfold(&data.manifest(), k, split_seed)?;
    let mut folds = Vec::with_capacity(k);
    for (i, held) in split.folds.iter().enumerate() {
        let train_idx = data.indices_of(&split.train_ids(i))?;
        let test_idx = data.indices_of(held)?;
        let dir = out.map(|d| d.join(format!("fold{i}")));
        let outcome = train(model_cfg, train_cfg, data, &train_idx, &[], dir.as_deref())?;
        let m = evaluate_model(&outcome.model, data, &test_idx)?;
        log::info!("fold {i}: AUC(>=G2) {:.4}, AUC(G3) {:.4}", m.ge_g2.auc, m.g3.auc);
        folds.push(m);
    }
    let aggregate = aggregate_cv(&folds)?;
    Ok(CrossvalResult {
        split,
        folds,
        aggregate,
    })
}

/// Trains on all of `train_data` and scores on all of `test_data`.
pub fn run_holdout(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    out: Option<&Path>,
) -> Result<(MetricSet, MoonModel)> {
    let idx: Vec<usize> = (0..train_data.len()).collect();
    let outcome = train(model_cfg, train_cfg, train_data, &idx, &[], out)?;
    let test_idx: Vec<usize> = (0..test_data.len()).collect();
    let m = evaluate_model(&outcome.model, test_data, &test_idx)?;
    Ok((m, outcome.model))
}

/// How a report row's runs are produced.
#[derive(Clone, Copy, Debug)]
pub enum Protocol<'a> {
    /// `k`-fold cross-validation of one dataset; every fold of every seed
    /// is one run.
    CrossVal { data: &'a Dataset, k: usize },
    /// Train on one dataset, test on another; one run per seed.
    Holdout { train: &'a Dataset, test: &'a Dataset },
}

impl Protocol<'_> {
    pub fn describe(&self, seeds: &[u64]) -> String {
        match self {
            Protocol::CrossVal { data, k } => {
                format!("{k}-fold cross-validation (n={}), seeds {seeds:?}", data.len())
            }
            Protocol::Holdout { train, test } => {
                format!("independent test (train n={}, test n={}), seeds {seeds:?}", train.len(), test.len())
            }
        }
    }
}

/// One row of a comparison grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
    pub use_cca: bool,
}

impl Variant {
    pub fn new(label: impl Into<String>, model: ModelConfig, use_cca: bool) -> Self {
        Self {
            label: label.into(),
            model,
            use_cca,
        }
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            ori: self.model.ori_active(),
            hfe: self.model.hfe_active(),
            cca: self.use_cca && self.model.single_organ.is_none(),
        }
    }

    /// Directory-safe name.
    pub fn slug(&self) -> String {
        let s: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        let mut out = String::with_capacity(s.len());
        for c in s.chars() {
            if !(c == '_' && (out.is_empty() || out.ends_with('_'))) {
                out.push(c);
            }
        }
        let trimmed = out.trim_end_matches('_');
        let tag = if self.label.contains('‡') { "_plain" } else { "" };
        format!("{trimmed}{tag}")
    }
}

/// Concat / PredSum / LowRank / FiLM, each with and without ORI+HFE.
pub fn fusion_variants(base: &ModelConfig, use_cca: bool) -> Vec<Variant> {
    let mut out = Vec::with_capacity(8);
    for interact in [true, false] {
        for strategy in FusionStrategy::ALL {
            let model = ModelConfig {
                fusion: strategy,
                use_ori: interact,
                use_hfe: interact,
                single_organ: None,
                ..base.clone()
            };
            out.push(Variant::new(model.label(), model, use_cca));
        }
    }
    out
}

/// All eight on/off combinations of ORI, HFE and CCA, full model first.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    let mut out = Vec::with_capacity(8);
    for mask in (0..8u8).rev() {
        let (ori, hfe, cca) = (mask & 4 != 0, mask & 2 != 0, mask & 1 != 0);
        let missing: Vec<&str> = [("ORI", ori), ("HFE", hfe), ("CCA", cca)]
            .iter()
            .filter(|(_, on)| !on)
            .map(|(n, _)| *n)
            .collect();
        let label = if missing.is_empty() {
            "MOON (full)".to_string()
        } else {
            format!("MOON w/o {}", missing.join("+"))
        };
        let model = ModelConfig {
            use_ori: ori,
            use_hfe: hfe,
            single_organ: None,
            ..base.clone()
        };
        out.push(Variant::new(label, model, cca));
    }
    out
}

/// The esophagus-only baseline.
pub fn single_organ_variant(base: &ModelConfig) -> Variant {
    let model = ModelConfig {
        single_organ: Some(Organ::Esophagus),
        ..base.clone()
    };
    Variant::new(model.label(), model, false)
}

/// Runs one variant under `protocol` for every seed. The seed replaces the
/// model, training and split seeds. `on_model` sees each trained holdout
/// model.
pub fn run_variant(
    variant: &Variant,
    train_cfg: &TrainConfig,
    protocol: Protocol<'_>,
    seeds: &[u64],
    out: Option<&Path>,
    on_model: &mut dyn FnMut(u64, &MoonModel),
) -> Result<ReportRow> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let model = ModelConfig {
            seed,
            ..variant.model.clone()
        };
        let tc = TrainConfig {
            seed,
            use_cca: variant.use_cca,
            ..train_cfg.clone()
        };
        let dir = out.map(|d| d.join(variant.slug()).join(format!("seed{seed}")));
        log::info!("{} (seed {seed})", variant.label);
        match protocol {
            Protocol::CrossVal { data, k } => {
                runs.extend(run_crossval(&model, &tc, data, k, seed, dir.as_deref())?.folds);
            }
            Protocol::Holdout { train, test } => {
                let (m, trained) = run_holdout(&model, &tc, train, test, dir.as_deref())?;
                on_model(seed, &trained);
                runs.push(m);
            }
        }
    }
    let strategy = variant.model.single_organ.is_none().then(|| variant.model.fusion.to_string());
    ReportRow::new(variant.label.clone(), strategy, variant.flags(), runs)
}

pub fn run_grid(
    variants: &[Variant],
    train_cfg: &TrainConfig,
    protocol: Protocol<'_>,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let rows = variants
        .iter()
        .map(|v| run_variant(v, train_cfg, protocol, seeds, out, &mut |_, _| {}))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        protocol: protocol.describe(seeds),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_eight_distinct_rows() {
        let base = ModelConfig::default();
        let f = fusion_variants(&base, true);
        assert_eq!(f.len(), 8);
        assert_eq!(f.iter().filter(|v| v.label.contains('‡')).count(), 4);
        let a = ablation_variants(&base);
        assert_eq!(a.len(), 8);
        assert_eq!(a[0].flags(), AblationFlags { ori: true, hfe: true, cca: true });
        let mut flags: Vec<_> = a.iter().map(|v| (v.flags().ori, v.flags().hfe, v.flags().cca)).collect();
        flags.sort();
        flags.dedup();
        assert_eq!(flags.len(), 8);
        let mut slugs: Vec<_> = f.iter().chain(&a).map(Variant::slug).collect();
        slugs.sort();
        slugs.dedup();
        assert_eq!(slugs.len(), 16);
    }

    #[test]
    fn single_organ_row_skips_cca() {
        let v = single_organ_variant(&ModelConfig::default());
        assert_eq!(v.label, "Single-organ (esophagus)");
        assert!(!v.flags().cca);
    }
}
