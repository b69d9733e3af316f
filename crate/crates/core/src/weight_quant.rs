//! Binary/ternary weight quantization `Q = sign(W) ⊙ M` and the weight-side STE.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SyqError};
use crate::subgroups::{ScaleVector, SubgroupIndex};

/// Fraction of `max|W|` used as the ternary threshold.
pub const TERNARY_THRESHOLD_RATIO: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Codes in {−1, +1}.
    Binary,
    /// Codes in {−1, 0, +1}.
    Ternary,
}

impl QuantMode {
    pub fn code_base(self) -> &'static [i8] {
        match self {
            QuantMode::Binary => &[-1, 1],
            QuantMode::Ternary => &[-1, 0, 1],
        }
    }

    /// Weight bit-width as used on the command line (1 = binary, 2 = ternary).
    pub fn bits(self) -> u8 {
        match self {
            QuantMode::Binary => 1,
            QuantMode::Ternary => 2,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            1 => Some(QuantMode::Binary),
            2 => Some(QuantMode::Ternary),
            _ => None,
        }
    }
}

/// Quantized codes together with the mask and threshold that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedQuant {
    pub q: Vec<i8>,
    pub mask: Vec<u8>,
    pub eta: f64,
}

impl MaskedQuant {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn zero_count(&self) -> usize {
        self.q.iter().filter(|&&c| c == 0).count()
    }
}

/// Per-layer threshold: 0 for binary, `0.05·max|W|` for ternary.
pub fn compute_threshold(w: &[f64], mode: QuantMode) -> Result<f64> {
    if w.is_empty() {
        return Err(SyqError::InvalidArgument(
            "cannot threshold an empty weight tensor".into(),
        ));
    }
    match mode {
        QuantMode::Binary => Ok(0.0),
        QuantMode::Ternary => {
            let mut max = 0.0f64;
            for &v in w {
                if !v.is_finite() {
                    return Err(SyqError::NonFinite("weights"));
                }
                max = max.max(v.abs());
            }
            Ok(TERNARY_THRESHOLD_RATIO * max)
        }
    }
}

/// Masks `|W| < eta` to zero and keeps the sign elsewhere; `sign(0) = +1`.
pub fn quantize_weights(w: &[f64], eta: f64) -> Result<MaskedQuant> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(SyqError::InvalidArgument(format!(
            "threshold must be a finite non-negative value, got {eta}"
        )));
    }
    let mut q = Vec::with_capacity(w.len());
    let mut mask = Vec::with_capacity(w.len());
    for &v in w {
        if v.is_nan() {
            return Err(SyqError::NonFinite("weights"));
        }
        let m = u8::from(v.abs() >= eta);
        let sign: i8 = if v < 0.0 { -1 } else { 1 };
        q.push(sign * m as i8);
        mask.push(m);
    }
    Ok(MaskedQuant { q, mask, eta })
}

/// Finite, sorted, duplicate-free set of codebook values.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    values: Vec<f64>,
}

impl Codebook {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SyqError::NonFinite("codebook"));
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        values.dedup();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// True when every positive value has a negative partner of equal magnitude
/// and vice versa. Zero is ignored.
pub fn is_symmetric(codebook: &Codebook) -> bool {
    let pos: Vec<f64> = codebook.values.iter().copied().filter(|&v| v > 0.0).collect();
    let mut neg: Vec<f64> = codebook.values.iter().filter(|&&v| v < 0.0).map(|v| -v).collect();
    neg.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    pos == neg
}

/// Weight-side STE: `∂E/∂W_j = α_{g(j)} · ∂E/∂Ŵ_j`.
pub fn ste_weight_grad(grad_q: &[f64], scales: &ScaleVector, subgroups: &SubgroupIndex) -> Result<Vec<f64>> {
    subgroups.check_covers(grad_q.len(), "ste_weight_grad")?;
    scales.check_len(subgroups.group_count())?;
    let alpha = scales.as_slice();
    Ok(grad_q
        .iter()
        .zip(subgroups.group_of())
        .map(|(&g, &grp)| alpha[grp] * g)
        .collect())
}
