use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grade::Grade;
use super::manifest::DatasetManifest;
use crate::error::{io_err, MoonError, Result};
use crate::seed::mix_seed;

/// `k` disjoint lists of case ids covering a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    /// Training ids for fold `i`: every id not held out in it.
    pub fn train_ids(&self, i: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Stratified k-fold assignment: ids of each grade are shuffled, then dealt
/// round-robin, with the dealing position carried across grades so fold
/// sizes differ by at most one.
pub fn stratified_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(MoonError::Split(format!("k = {k}; need at least 2 folds")));
    }
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for grade in Grade::ALL {
        let mut ids: Vec<String> = manifest
            .cases
            .iter()
            .filter(|c| c.grade == grade)
            .map(|c| c.id.clone())
            .collect();
        if ids.len() < k {
            return Err(MoonError::Split(format!(
                "grade {grade} has {} cases, fewer than k = {k}",
                ids.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[grade.level() as u64]));
        ids.shuffle(&mut rng);
        for id in ids {
            folds[cursor % k].push(id);
            cursor += 1;
        }
    }
    Ok(FoldSplit { k, seed, folds })
}
