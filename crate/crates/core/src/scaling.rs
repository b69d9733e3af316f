//! Per-subgroup scaling coefficients: initialization, gradients and updates.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SyqError};
use crate::subgroups::{ScaleVector, SubgroupIndex, MIN_SCALE};
use crate::weight_quant::MaskedQuant;

/// How the gradient of a scaling coefficient is formed from the gradient of
/// the scaled weights `Ŵ = α·Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleGradRule {
    /// `Σ_{j∈S} ∂E/∂Ŵ_j · Q_j`, the exact derivative of the forward pass.
    #[default]
    ChainRule,
    /// `Σ_{j∈S} ∂E/∂W_j` taken verbatim, without the code factor. Experimental.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleState {
    pub alpha: ScaleVector,
    pub grad_alpha: Vec<f64>,
    pub step: u64,
}

impl ScaleState {
    pub fn new(alpha: ScaleVector) -> Self {
        let len = alpha.len();
        Self {
            alpha,
            grad_alpha: vec![0.0; len],
            step: 0,
        }
    }
}

/// Mean absolute weight of every subgroup. Groups whose weights are all zero
/// start at [`MIN_SCALE`].
pub fn init_scales(w: &[f64], subgroups: &SubgroupIndex) -> Result<ScaleVector> {
    subgroups.check_covers(w.len(), "init_scales")?;
    let mut sums = vec![0.0; subgroups.group_count()];
    let mut counts = vec![0usize; subgroups.group_count()];
    for (&v, &g) in w.iter().zip(subgroups.group_of()) {
        if !v.is_finite() {
            return Err(SyqError::NonFinite("weights"));
        }
        sums[g] += v.abs();
        counts[g] += 1;
    }
    let mut alpha = Vec::with_capacity(sums.len());
    for (g, (s, c)) in sums.into_iter().zip(counts).enumerate() {
        if c == 0 {
            return Err(SyqError::EmptySubgroup(g));
        }
        alpha.push((s / c as f64).max(MIN_SCALE));
    }
    ScaleVector::new(alpha)
}

/// `‖W‖₁ / Z`.
pub fn layerwise_scale(w: &[f64]) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
}

/// Chain-rule gradient of the loss w.r.t. each coefficient:
/// `∂E/∂α_i = Σ_{j∈S_i} ∂E/∂Ŵ_j · q_j`.
pub fn scale_gradient(grad_scaled_w: &[f64], q: &MaskedQuant, subgroups: &SubgroupIndex) -> Result<Vec<f64>> {
    scale_gradient_with(grad_scaled_w, q, subgroups, ScaleGradRule::ChainRule)
}

pub fn scale_gradient_with(
    grad: &[f64],
    q: &MaskedQuant,
    subgroups: &SubgroupIndex,
    rule: ScaleGradRule,
) -> Result<Vec<f64>> {
    subgroups.check_covers(grad.len(), "scale_gradient")?;
    subgroups.check_covers(q.len(), "scale_gradient")?;
    let mut out = vec![0.0; subgroups.group_count()];
    for ((&g, &code), &grp) in grad.iter().zip(&q.q).zip(subgroups.group_of()) {
        out[grp] += match rule {
            ScaleGradRule::ChainRule => g * code as f64,
            ScaleGradRule::Literal => g,
        };
    }
    Ok(out)
}

/// Plain gradient step `α ← max(α − γ·∂E/∂α, MIN_SCALE)`.
pub fn update_scales(state: &ScaleState, learning_rate: f64) -> Result<ScaleState> {
    if !(learning_rate > 0.0) {
        return Err(SyqError::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if state.grad_alpha.len() != state.alpha.len() {
        return Err(SyqError::shape(
            "update_scales",
            state.alpha.len(),
            state.grad_alpha.len(),
        ));
    }
    let alpha: Vec<f64> = state
        .alpha
        .as_slice()
        .iter()
        .zip(&state.grad_alpha)
        .map(|(a, g)| (a - learning_rate * g).max(MIN_SCALE))
        .collect();
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(SyqError::NonFinite("scaling coefficients"));
    }
    Ok(ScaleState {
        alpha: ScaleVector::new(alpha)?,
        grad_alpha: state.grad_alpha.clone(),
        step: state.step + 1,
    })
}
