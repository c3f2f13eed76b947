//! Ordinal loss, the eigen-projected CCA loss between branch logits, and the
//! weighted total objective.

use autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datamodel::OrdinalTarget;
use crate::error::{contract, MoonError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the ordinal term; the CCA terms get `1 - lambda`.
    pub lambda: f64,
    pub eps: f64,
    /// Batches smaller than this skip the CCA terms.
    pub cca_min_batch: usize,
    /// Floor on eigenvalue gaps in the eigenvector backward pass.
    pub eig_min_gap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            eps: 1e-12,
            cca_min_batch: 4,
            eig_min_gap: 1e-9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MoonError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.eps > 0.0) || !(self.eig_min_gap > 0.0) {
            return Err(MoonError::Config("eps and eig_min_gap must be positive".into()));
        }
        Ok(())
    }
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    contract!(g.value(v).all_finite(), "{} contains non-finite values", what);
    Ok(())
}

/// Mean per-threshold binary cross-entropy of `[n, 2]` logits.
pub fn ordinal_loss(g: &mut Graph, logits: Var, targets: &[OrdinalTarget]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    contract!(
        shape.len() == 2 && shape[0] >= 1 && shape[0] == targets.len() && shape[1] == 2,
        "ordinal loss expects [{}, 2] logits, got {:?}",
        targets.len(),
        shape
    );
    check_finite(g, logits, "ordinal logits")?;
    let bits: Vec<f64> = targets.iter().flat_map(|t| t.bits()).collect();
    let t = g.constant(Tensor::new(&shape, bits));
    Ok(g.bce_with_logits_mean(logits, t))
}

/// Standardize, eigen-project, and score the normalized cross-covariance
/// trace of two `[n, h]` logit matrices; lies in `[-1/(n-1), 1/(n-1)]`.
pub fn cca_loss(g: &mut Graph, h1: Var, h2: Var, cfg: &LossConfig) -> Result<Var> {
    let s1 = g.shape(h1).to_vec();
    contract!(
        s1.len() == 2 && s1 == g.shape(h2),
        "CCA inputs must be equal-shape matrices, got {:?} and {:?}",
        s1,
        g.shape(h2)
    );
    let (n, h) = (s1[0], s1[1]);
    contract!(n >= 2 && h >= 1, "CCA needs n >= 2 and h >= 1, got n = {}, h = {}", n, h);
    check_finite(g, h1, "CCA input")?;
    check_finite(g, h2, "CCA input")?;
    let inv = 1.0 / (n - 1) as f64;
    let [p1, p2] = [h1, h2].map(|x| {
        let s = g.standardize_cols(x, cfg.eps);
        let cov = g.matmul_t(s, true, s, false);
        let cov = g.scale(cov, inv);
        let vecs = g.sym_eigvecs(cov, cfg.eig_min_gap);
        g.matmul(s, vecs)
    });
    let cross = g.matmul_t(p1, true, p2, false);
    let cross = g.scale(cross, inv);
    let tr = g.trace(cross);
    let n1 = g.frobenius_norm(p1);
    let n2 = g.frobenius_norm(p2);
    let den = g.mul(n1, n2);
    let den = g.add_scalar(den, cfg.eps);
    let ratio = g.div(tr, den);
    Ok(g.neg(ratio))
}

/// Value-only CCA loss.
pub fn cca_loss_value(h1: &Tensor, h2: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(h1.clone());
    let b = g.constant(h2.clone());
    let l = cca_loss(&mut g, a, b, cfg)?;
    Ok(g.value(l).item())
}

/// `lambda * ordinal + (1 - lambda) * (cca_el + cca_es)`.
pub fn combine(lambda: f64, ordinal: f64, cca_el: f64, cca_es: f64) -> f64 {
    lambda * ordinal + (1.0 - lambda) * (cca_el + cca_es)
}

/// Loss components recorded for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ordinal: Var,
    pub cca: Option<(Var, Var)>,
}

/// Branch logits of one batch, each `[n, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchLogits {
    pub fused: Var,
    pub eso: Var,
    pub liver: Var,
    pub spleen: Var,
}

/// The composite objective. With `use_cca` off, or a batch below
/// `cca_min_batch`, the result is the ordinal loss alone.
pub fn overall_loss(
    g: &mut Graph,
    logits: BatchLogits,
    targets: &[OrdinalTarget],
    cfg: &LossConfig,
    use_cca: bool,
) -> Result<LossTerms> {
    let n = targets.len();
    for v in [logits.eso, logits.liver, logits.spleen] {
        contract!(
            g.shape(v) == g.shape(logits.fused),
            "branch logits {:?} do not match fused logits {:?}",
            g.shape(v),
            g.shape(logits.fused)
        );
    }
    let ordinal = ordinal_loss(g, logits.fused, targets)?;
    if !use_cca {
        return Ok(LossTerms {
            total: ordinal,
            ordinal,
            cca: None,
        });
    }
    if n < cfg.cca_min_batch {
        log::debug!("batch of {n} below cca_min_batch {}; CCA terms skipped", cfg.cca_min_batch);
        let total = g.scale(ordinal, cfg.lambda);
        return Ok(LossTerms {
            total,
            ordinal,
            cca: None,
        });
    }
    let el = cca_loss(g, logits.eso, logits.liver, cfg)?;
    let es = cca_loss(g, logits.eso, logits.spleen, cfg)?;
    let weighted_ord = g.scale(ordinal, cfg.lambda);
    let cca_sum = g.add(el, es);
    let weighted_cca = g.scale(cca_sum, 1.0 - cfg.lambda);
    Ok(LossTerms {
        total: g.add(weighted_ord, weighted_cca),
        ordinal,
        cca: Some((el, es)),
    })
}
