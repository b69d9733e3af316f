//! Analytic scaling-coefficient and operation counts per layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SyqError};
use crate::tensor::LayerShape;

/// Scaling schemes compared by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMethod {
    Layer,
    Row,
    Pixel,
    Asymmetric,
    Grouping,
    Channel,
}

impl ScalingMethod {
    pub const ALL: [ScalingMethod; 6] = [
        ScalingMethod::Layer,
        ScalingMethod::Row,
        ScalingMethod::Pixel,
        ScalingMethod::Asymmetric,
        ScalingMethod::Grouping,
        ScalingMethod::Channel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScalingMethod::Layer => "layer",
            ScalingMethod::Row => "row",
            ScalingMethod::Pixel => "pixel",
            ScalingMethod::Asymmetric => "asymmetric",
            ScalingMethod::Grouping => "grouping",
            ScalingMethod::Channel => "channel",
        }
    }

    /// Whether both polarities share one coefficient per group.
    pub fn is_symmetric(self) -> bool {
        self != ScalingMethod::Asymmetric
    }
}

impl fmt::Display for ScalingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalingMethod {
    type Err = SyqError;

    fn from_str(s: &str) -> Result<Self> {
        ScalingMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                SyqError::InvalidArgument(format!(
                    "unknown scaling method `{s}` (expected layer, row, pixel, asymmetric, grouping or channel)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: ScalingMethod,
    pub scalars: u64,
    pub ops: u64,
}

/// Scaling coefficients and operations for one convolution layer.
///
/// | method     | scalars   | ops   |
/// |------------|-----------|-------|
/// | layer      | 1         | P     |
/// | row        | K         | P     |
/// | pixel      | K²        | P     |
/// | asymmetric | 2         | P + Z |
/// | grouping   | K²·N / 4  | P     |
/// | channel    | N         | P     |
pub fn complexity_report(shape: &LayerShape, method: ScalingMethod) -> Result<CostReport> {
    shape.validate_conv()?;
    let k = shape.k as u64;
    let n = shape.n as u64;
    let (p, z) = (shape.p(), shape.z());
    let (scalars, ops) = match method {
        ScalingMethod::Layer => (1, p),
        ScalingMethod::Row => (k, p),
        ScalingMethod::Pixel => (k * k, p),
        ScalingMethod::Asymmetric => (2, p + z),
        ScalingMethod::Grouping => {
            if !n.is_multiple_of(4) {
                return Err(SyqError::InvalidArgument(format!(
                    "grouping needs N divisible by 4, got N = {n}"
                )));
            }
            (k * k * n / 4, p)
        }
        ScalingMethod::Channel => (n, p),
    };
    Ok(CostReport { method, scalars, ops })
}

/// Per-output operation counts of the pixel-wise sub-dot decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubOpCounts {
    /// Dot-product length `K²·I`.
    pub lv: u64,
    /// Binary or ternary multiplies (one per weight).
    pub mul_low: u64,
    /// Full-precision multiplies (one per pixel group).
    pub mul_full: u64,
    pub mul: u64,
    pub add: u64,
}

pub fn sub_op_counts(shape: &LayerShape) -> Result<SubOpCounts> {
    shape.validate_conv()?;
    let k2 = (shape.k * shape.k) as u64;
    let lv = k2 * shape.i as u64;
    Ok(SubOpCounts {
        lv,
        mul_low: lv,
        mul_full: k2,
        mul: lv + k2,
        add: lv - 1,
    })
}

/// Plain-text table with one row per report.
pub fn format_cost_table(shape: &LayerShape, reports: &[CostReport]) -> String {
    let mut out = format!(
        "K={} I={} N={} F={}  P={} Z={}\n{:<12}{:>12}{:>16}\n",
        shape.k,
        shape.i,
        shape.n,
        shape.f,
        shape.p(),
        shape.z(),
        "method",
        "scalars",
        "ops"
    );
    for r in reports {
        out.push_str(&format!("{:<12}{:>12}{:>16}\n", r.method.name(), r.scalars, r.ops));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alexnet_like() -> LayerShape {
        LayerShape::conv(3, 384, 256, 13).unwrap()
    }

    #[test]
    fn reference_layer_counts() {
        let s = alexnet_like();
        let p = 9 * 384 * 256 * 169;
        let z = 9 * 384 * 256;
        assert_eq!(p, 149_520_384);
        assert_eq!(z, 884_736);
        let got: Vec<(u64, u64)> = ScalingMethod::ALL
            .iter()
            .map(|&m| {
                let r = complexity_report(&s, m).unwrap();
                (r.scalars, r.ops)
            })
            .collect();
        assert_eq!(got, vec![(1, p), (3, p), (9, p), (2, p + z), (576, p), (256, p)]);
    }

    #[test]
    fn grouping_needs_multiple_of_four() {
        let s = LayerShape::conv(3, 4, 6, 5).unwrap();
        assert!(complexity_report(&s, ScalingMethod::Grouping).is_err());
        assert!(complexity_report(&s, ScalingMethod::Channel).is_ok());
    }

    #[test]
    fn sub_op_examples() {
        let c = sub_op_counts(&LayerShape::conv(3, 384, 1, 1).unwrap()).unwrap();
        assert_eq!((c.lv, c.mul, c.add), (3456, 3465, 3455));
        let c = sub_op_counts(&LayerShape::conv(1, 1, 1, 1).unwrap()).unwrap();
        assert_eq!((c.lv, c.mul, c.add), (1, 2, 0));
    }

    #[test]
    fn method_names_parse() {
        for m in ScalingMethod::ALL {
            assert_eq!(m.name().parse::<ScalingMethod>().unwrap(), m);
        }
        assert!("diagonal".parse::<ScalingMethod>().is_err());
    }
}
