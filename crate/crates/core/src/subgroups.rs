//! Weight subgroups sharing one scaling coefficient.
//!
//! Convolution weights are laid out `(N, I, K, K)`, so the flat coordinate of
//! `(n, i, k1, k2)` is `((n·I + i)·K + k1)·K + k2`. Pixel-wise grouping maps it
//! to `k1·K + k2`, row-wise to `k1`, layer-wise to `0`. Fully-connected layers
//! only support a single layer-wise group.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SyqError};
use crate::tensor::{LayerShape, Matrix, Tensor4};

/// Smallest value a scaling coefficient may take.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[serde(alias = "pixel-wise")]
    Pixel,
    #[serde(alias = "row-wise")]
    Row,
    #[serde(alias = "layer-wise")]
    Layer,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Pixel => "pixel",
            Granularity::Row => "row",
            Granularity::Layer => "layer",
        }
    }

    /// Number of groups for a `K × K` convolution kernel.
    pub fn group_count(self, k: usize) -> usize {
        match self {
            Granularity::Pixel => k * k,
            Granularity::Row => k,
            Granularity::Layer => 1,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Granularity {
    type Err = SyqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" | "pixel-wise" => Ok(Granularity::Pixel),
            "row" | "row-wise" => Ok(Granularity::Row),
            "layer" | "layer-wise" => Ok(Granularity::Layer),
            other => Err(SyqError::InvalidArgument(format!(
                "unknown granularity `{other}` (expected pixel, row or layer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "convolution",
            LayerKind::Fc => "fully-connected",
        }
    }
}

/// Partition of a layer's flat weight coordinates into `G` equal-size groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgroupIndex {
    group_of: Vec<usize>,
    group_count: usize,
    group_size: usize,
}

impl SubgroupIndex {
    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    /// Coordinates of every group, each list in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::with_capacity(self.group_size); self.group_count];
        for (j, &g) in self.group_of.iter().enumerate() {
            out[g].push(j);
        }
        out
    }

    pub(crate) fn check_covers(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.group_of.len() {
            return Err(SyqError::Contract(format!(
                "{context}: {len} coordinates but the subgroup index covers {}",
                self.group_of.len()
            )));
        }
        Ok(())
    }
}

/// Builds the subgroup partition for a layer.
pub fn build_subgroups(shape: &LayerShape, kind: LayerKind, granularity: Granularity) -> Result<SubgroupIndex> {
    match kind {
        LayerKind::Fc => {
            shape.validate_fc()?;
            if granularity != Granularity::Layer {
                return Err(SyqError::UnsupportedGranularity {
                    granularity: granularity.name(),
                    kind: kind.name(),
                });
            }
            let z = shape.l * shape.h;
            Ok(SubgroupIndex {
                group_of: vec![0; z],
                group_count: 1,
                group_size: z,
            })
        }
        LayerKind::Conv => {
            shape.validate_conv()?;
            let k = shape.k;
            let z = k * k * shape.i * shape.n;
            let group_count = granularity.group_count(k);
            let mut group_of = Vec::with_capacity(z);
            for _ in 0..shape.n * shape.i {
                for k1 in 0..k {
                    for k2 in 0..k {
                        group_of.push(match granularity {
                            Granularity::Pixel => k1 * k + k2,
                            Granularity::Row => k1,
                            Granularity::Layer => 0,
                        });
                    }
                }
            }
            Ok(SubgroupIndex {
                group_of,
                group_count,
                group_size: z / group_count,
            })
        }
    }
}

/// Strictly positive per-group scaling coefficients (the diagonal of `diag(α)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    alpha: Vec<f64>,
}

impl ScaleVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(SyqError::InvalidArgument("scale vector must not be empty".into()));
        }
        if let Some(bad) = alpha.iter().find(|&&a| !(a > 0.0) || !a.is_finite()) {
            return Err(SyqError::InvalidArgument(format!(
                "scaling coefficients must be finite and positive, got {bad}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn ones(len: usize) -> Self {
        Self { alpha: vec![1.0; len] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.alpha
    }

    pub(crate) fn check_len(&self, groups: usize) -> Result<()> {
        if self.alpha.len() != groups {
            return Err(SyqError::shape("scale vector length", groups, self.alpha.len()));
        }
        Ok(())
    }
}

/// Scaled weights `Ŵ_j = α_{g(j)} · q_j`.
pub fn scale_codes(q: &[i8], alpha: &ScaleVector, subgroups: &SubgroupIndex) -> Result<Vec<f64>> {
    subgroups.check_covers(q.len(), "scale_codes")?;
    alpha.check_len(subgroups.group_count())?;
    let a = alpha.as_slice();
    Ok(q.iter()
        .zip(subgroups.group_of())
        .map(|(&c, &g)| a[g] * c as f64)
        .collect())
}

fn matrix_index(dims: [usize; 4], granularity: Granularity, flat: usize) -> (usize, usize) {
    let k = dims[2];
    let k2 = flat % k;
    let k1 = (flat / k) % k;
    let ni = flat / (k * k);
    match granularity {
        Granularity::Pixel => (k1 * k + k2, ni),
        Granularity::Row => (k1, ni * k + k2),
        Granularity::Layer => (0, flat),
    }
}

fn matrix_dims(dims: [usize; 4], granularity: Granularity) -> (usize, usize) {
    let [n, i, k, _] = dims;
    match granularity {
        Granularity::Pixel => (k * k, i * n),
        Granularity::Row => (k, i * n * k),
        Granularity::Layer => (1, n * i * k * k),
    }
}

fn check_kernel(weights_dims: [usize; 4]) -> Result<()> {
    if weights_dims[2] != weights_dims[3] || weights_dims[2] == 0 {
        return Err(SyqError::shape("square kernel (N, I, K, K)", "K == K", weights_dims));
    }
    Ok(())
}

/// Reshapes `(N, I, K, K)` weights to `K² × (I·N)`, `K × (I·N·K)` or `1 × Z`.
///
/// Row `r` of the pixel-wise form holds every weight at kernel pixel `r`;
/// columns enumerate `(n, i)` in layout order.
pub fn reshape_to_matrix(weights: &Tensor4, granularity: Granularity) -> Result<Matrix> {
    let dims = weights.dims();
    check_kernel(dims)?;
    let (rows, cols) = matrix_dims(dims, granularity);
    let mut m = Matrix::zeros(rows, cols);
    for (flat, &v) in weights.as_slice().iter().enumerate() {
        let (r, c) = matrix_index(dims, granularity, flat);
        m.set(r, c, v);
    }
    Ok(m)
}

/// Inverse of [`reshape_to_matrix`].
pub fn matrix_to_weights(matrix: &Matrix, dims: [usize; 4], granularity: Granularity) -> Result<Tensor4> {
    check_kernel(dims)?;
    let (rows, cols) = matrix_dims(dims, granularity);
    if (matrix.rows(), matrix.cols()) != (rows, cols) {
        return Err(SyqError::shape(
            "matrix_to_weights",
            (rows, cols),
            (matrix.rows(), matrix.cols()),
        ));
    }
    let mut t = Tensor4::zeros(dims);
    for (flat, v) in t.as_mut_slice().iter_mut().enumerate() {
        let (r, c) = matrix_index(dims, granularity, flat);
        *v = matrix.get(r, c);
    }
    Ok(t)
}

/// `diag(α) · Q`: scales row `g` of a `G × m` matrix by `α_g`.
pub fn apply_diagonal_scale(q: &Matrix, alpha: &ScaleVector) -> Result<Matrix> {
    alpha.check_len(q.rows())?;
    let mut out = q.clone();
    for (r, &a) in alpha.as_slice().iter().enumerate() {
        for v in out.row_mut(r) {
            *v *= a;
        }
    }
    Ok(out)
}
