//! Unsigned fixed-point activation quantizer
//! `G(x) = floor(2^f·x + 1/2) / 2^f` on `[0, M]`, `M = 2^(k−f) − 2^(−f)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SyqError};

pub const MAX_ACT_BITS: u8 = 16;

/// `k` total bits, `f` of them fractional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActQuantConfig {
    pub bits: u8,
    pub frac_bits: u8,
}

impl ActQuantConfig {
    pub fn new(bits: u8, frac_bits: u8) -> Result<Self> {
        let cfg = Self { bits, frac_bits };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `f = k`, i.e. activations in `[0, 1 − 2^(−k)]`.
    pub fn unit(bits: u8) -> Result<Self> {
        Self::new(bits, bits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > MAX_ACT_BITS {
            return Err(SyqError::InvalidArgument(format!(
                "activation bits must be in 1..={MAX_ACT_BITS}, got {}",
                self.bits
            )));
        }
        if self.frac_bits > self.bits {
            return Err(SyqError::InvalidArgument(format!(
                "fractional bits {} exceed total bits {}",
                self.frac_bits, self.bits
            )));
        }
        Ok(())
    }

    /// Quantization step `2^(−f)`.
    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Upper bound `M = 2^(k−f) − 2^(−f)`.
    pub fn upper_bound(&self) -> f64 {
        ((self.bits - self.frac_bits) as f64).exp2() - self.step()
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    /// Integer code of `G(x)`, in `0..levels`.
    #[inline]
    pub fn code(&self, x: f64) -> u32 {
        let scale = (self.frac_bits as f64).exp2();
        let clamped = x.clamp(0.0, self.upper_bound());
        (scale * clamped + 0.5).floor() as u32
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        let scale = (self.frac_bits as f64).exp2();
        let clamped = if x.is_nan() {
            0.0
        } else {
            x.clamp(0.0, self.upper_bound())
        };
        (scale * clamped + 0.5).floor() / scale
    }
}

/// Clamps to `[0, M]`, then rounds to the nearest multiple of `2^(−f)`.
pub fn quantize_activation(x: &[f64], cfg: &ActQuantConfig) -> Vec<f64> {
    x.iter().map(|&v| cfg.quantize(v)).collect()
}

pub(crate) fn quantize_activation_in_place(x: &mut [f64], cfg: &ActQuantConfig) {
    for v in x {
        *v = cfg.quantize(*v);
    }
}

/// Clipped pass-through: the gradient flows where `0 ≤ x ≤ M` and is zero elsewhere.
pub fn act_ste_backward(grad: &[f64], x: &[f64], cfg: &ActQuantConfig) -> Result<Vec<f64>> {
    if grad.len() != x.len() {
        return Err(SyqError::shape("act_ste_backward", x.len(), grad.len()));
    }
    let m = cfg.upper_bound();
    Ok(grad
        .iter()
        .zip(x)
        .map(|(&g, &v)| if (0.0..=m).contains(&v) { g } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_examples() {
        let cfg = ActQuantConfig::new(2, 2).unwrap();
        assert_eq!(cfg.upper_bound(), 0.75);
        assert_eq!(cfg.quantize(0.3), 0.25);
        assert_eq!(cfg.quantize(0.0), 0.0);
        assert_eq!(cfg.quantize(0.75), 0.75);
        assert_eq!(cfg.quantize(0.9), 0.75);
        assert_eq!(cfg.quantize(-3.0), 0.0);
    }

    #[test]
    fn integer_part_bits() {
        let cfg = ActQuantConfig::new(4, 2).unwrap();
        assert_eq!(cfg.upper_bound(), 3.75);
        assert_eq!(cfg.levels(), 16);
        assert_eq!(cfg.quantize(1.13), 1.25);
        assert_eq!(cfg.code(1.13), 5);
    }

    #[test]
    fn invalid_configs() {
        assert!(ActQuantConfig::new(0, 0).is_err());
        assert!(ActQuantConfig::new(4, 5).is_err());
        assert!(ActQuantConfig::new(17, 1).is_err());
    }

    #[test]
    fn ste_region_mask() {
        let cfg = ActQuantConfig::new(2, 2).unwrap();
        let g = act_ste_backward(&[1.0; 3], &[-0.1, 0.2, 0.9], &cfg).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
        let inside = act_ste_backward(&[0.5, -2.0], &[0.0, 0.75], &cfg).unwrap();
        assert_eq!(inside, vec![0.5, -2.0]);
        assert_eq!(act_ste_backward(&[3.0], &[1.0], &cfg).unwrap(), vec![0.0]);
    }

    #[test]
    fn high_precision_mse_is_tiny() {
        let cfg = ActQuantConfig::new(16, 16).unwrap();
        let n = 10_000;
        let mse: f64 = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64 * cfg.upper_bound();
                (cfg.quantize(x) - x).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        assert!(mse < 1e-9, "{mse}");
    }
}
