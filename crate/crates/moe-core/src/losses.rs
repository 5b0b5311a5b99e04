//! Balancing regularizers for noisy softmax gating: the importance loss on
//! expert-wise gate mass and the load loss on expected selection counts,
//! both squared coefficients of variation across experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{sorted_indices_desc, Tensor};

/// Weights for the combined balancing loss. The load-loss CDF width is tied
/// to the expert count (`N(0, 1/E)`), not configured here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxLossConfig {
    pub importance_weight: f64,
    pub load_weight: f64,
    pub k: usize,
}

impl Default for AuxLossConfig {
    fn default() -> Self {
        AuxLossConfig {
            importance_weight: 0.005,
            load_weight: 0.005,
            k: 1,
        }
    }
}

impl AuxLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.importance_weight >= 0.0 && self.importance_weight.is_finite()) {
            return Err(Error::invalid("importance weight must be finite and >= 0"));
        }
        if !(self.load_weight >= 0.0 && self.load_weight.is_finite()) {
            return Err(Error::invalid("load weight must be finite and >= 0"));
        }
        if self.k < 1 {
            return Err(Error::invalid("aux loss k must be >= 1"));
        }
        Ok(())
    }
}

/// Squared coefficient of variation `(population std / mean)^2` of a
/// vector; differentiable, scale-invariant, and an error at zero mean.
pub fn coefficient_of_variation_sq<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let n = v.value().numel();
    if n < 2 {
        return Err(Error::invalid("cv^2 needs at least two entries"));
    }
    let mean_value = v.value().mean_all();
    if mean_value.abs() < 1e-300 {
        return Err(Error::ZeroMean);
    }
    let mean = v.mean_all()?;
    let mean_sq = mean.mul(mean)?;
    let second_moment = v.mul(v)?.mean_all()?;
    // population variance = E[v^2] - mean^2
    let variance = second_moment.sub(mean_sq)?;
    variance.div(mean_sq)
}

/// Variability of total gate mass per expert: `cv^2` of the column sums of
/// `softmax(X W)` (noiseless).
pub fn importance_loss<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let probs = x.matmul(w)?.softmax_rows()?;
    let per_expert = probs.sum_axis(0)?;
    coefficient_of_variation_sq(per_expert)
}

/// Variability of the experts' expected selection counts under fresh
/// threshold noise.
///
/// Per token, expert `i` contributes `Phi((X W)[t,i] - s_t)` where `s_t` is
/// the k-th largest noisy logit `(X W + eps)[t,:]` and `Phi` is the CDF of
/// `N(0, 1/E)`. `eps` must be the same realization the router drew this
/// step. The k-th-largest selection is treated as locally constant:
/// gradients flow through the clean logit and through the selected
/// threshold logit, not through the ranking.
pub fn load_loss<'t>(
    x: Var<'t>,
    w: Var<'t>,
    realized_noise: &Tensor,
    k: usize,
) -> Result<Var<'t>> {
    let logits = x.matmul(w)?;
    let shape = logits.shape();
    let (tokens, experts) = (shape[0], shape[1]);
    if k < 1 || k > experts {
        return Err(Error::invalid("load loss: k out of range"));
    }
    if realized_noise.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "load_loss",
            lhs: shape,
            rhs: realized_noise.shape().to_vec(),
        });
    }
    let tape = x.tape();
    let noisy = logits.add(tape.constant(realized_noise.clone()))?;

    // index of the k-th largest noisy logit per token
    let noisy_values = noisy.value();
    let threshold_cols: Vec<usize> = (0..tokens)
        .map(|t| sorted_indices_desc(noisy_values.row(t))[k - 1])
        .collect();
    let thresholds = noisy.select_per_row(&threshold_cols)?;

    let sigma = (1.0 / experts as f64).sqrt();
    let margins = logits.sub_col(thresholds)?;
    let selection_probs = margins.normal_cdf(sigma)?;
    let per_expert = selection_probs.sum_axis(0)?;
    coefficient_of_variation_sq(per_expert)
}

/// Weighted sum of the two balancing losses.
pub fn combined_aux_loss<'t>(
    cfg: &AuxLossConfig,
    x: Var<'t>,
    w: Var<'t>,
    realized_noise: &Tensor,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let importance = importance_loss(x, w)?.scale(cfg.importance_weight)?;
    let load = load_loss(x, w, realized_noise, cfg.k)?.scale(cfg.load_weight)?;
    importance.add(load)
}
