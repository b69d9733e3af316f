//! Exported models and the sub-dot-product inference path.

use crate::act_quant::{quantize_activation_in_place, ActQuantConfig};
use crate::error::{Result, SyqError};
use crate::subgroups::{build_subgroups, scale_codes, Granularity, LayerKind, ScaleVector, SubgroupIndex};
use crate::tensor::conv::im2col;
use crate::tensor::{
    argmax, batchnorm_inference, conv2d_forward, conv_output_size, fc_forward, softmax_cross_entropy, BatchNormParams,
    LayerShape, Matrix, Tensor4, DEFAULT_EPS,
};
use crate::training::{Dataset, Network, TrainState};
use crate::weight_quant::{compute_threshold, quantize_weights, QuantMode};

/// Parameters of one exported weight layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    /// Codes in `{−1, 0, +1}` in weight layout order plus one coefficient per subgroup.
    Quantized {
        mode: QuantMode,
        granularity: Granularity,
        codes: Vec<i8>,
        alpha: ScaleVector,
    },
    /// Full-precision weights (32-bit values widened to `f64`).
    Full(Vec<f64>),
}

/// A convolution or fully-connected layer as stored in an exported model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub kind: LayerKind,
    pub shape: LayerShape,
    pub stride: usize,
    pub pad: usize,
    pub weights: LayerWeights,
    /// Quantizer applied to this layer's output.
    pub activation: Option<ActQuantConfig>,
}

impl QuantizedLayer {
    /// Builds a quantized layer, checking codes and scale count against the shape.
    pub fn quantized(
        kind: LayerKind,
        shape: LayerShape,
        mode: QuantMode,
        granularity: Granularity,
        codes: Vec<i8>,
        alpha: ScaleVector,
    ) -> Result<Self> {
        let layer = Self {
            kind,
            shape,
            stride: 1,
            pad: 0,
            weights: LayerWeights::Quantized {
                mode,
                granularity,
                codes,
                alpha,
            },
            activation: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_geometry(mut self, stride: usize, pad: usize) -> Result<Self> {
        self.stride = stride;
        self.pad = pad;
        self.validate()?;
        Ok(self)
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.weights, LayerWeights::Quantized { .. })
    }

    /// Weights per output: `I·K·K` or `L`.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.shape.i * self.shape.k * self.shape.k,
            LayerKind::Fc => self.shape.l,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.shape.n,
            LayerKind::Fc => self.shape.h,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.fan_in() * self.outputs()
    }

    pub fn in_dims(&self) -> [usize; 3] {
        match self.kind {
            LayerKind::Conv => [self.shape.i, self.shape.f, self.shape.f],
            LayerKind::Fc => [self.shape.l, 1, 1],
        }
    }

    pub fn out_dims(&self) -> Result<[usize; 3]> {
        match self.kind {
            LayerKind::Conv => {
                let o = conv_output_size(self.shape.f, self.shape.k, self.stride, self.pad)?;
                Ok([self.shape.n, o, o])
            }
            LayerKind::Fc => Ok([self.shape.h, 1, 1]),
        }
    }

    pub fn subgroups(&self) -> Result<Option<SubgroupIndex>> {
        match &self.weights {
            LayerWeights::Quantized { granularity, .. } => {
                Ok(Some(build_subgroups(&self.shape, self.kind, *granularity)?))
            }
            LayerWeights::Full(_) => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv => {
                self.shape.validate_conv()?;
                if self.shape.l != 0 || self.shape.h != 0 {
                    return Err(SyqError::InvalidArgument(
                        "convolution layers must leave L and H at 0".into(),
                    ));
                }
                self.out_dims()?;
            }
            LayerKind::Fc => {
                self.shape.validate_fc()?;
                if self.shape.k != 0 || self.shape.i != 0 || self.shape.n != 0 || self.shape.f != 0 {
                    return Err(SyqError::InvalidArgument(
                        "fully-connected layers must leave K, I, N and F at 0".into(),
                    ));
                }
            }
        }
        if let Some(act) = &self.activation {
            act.validate()?;
        }
        let z = self.weight_count();
        match &self.weights {
            LayerWeights::Quantized { mode, codes, alpha, .. } => {
                if codes.len() != z {
                    return Err(SyqError::shape("layer codes", z, codes.len()));
                }
                let sg = self.subgroups()?.expect("quantized");
                if alpha.len() != sg.group_count() {
                    return Err(SyqError::shape("layer scales", sg.group_count(), alpha.len()));
                }
                if let Some(bad) = codes.iter().find(|&&c| !(-1..=1).contains(&c)) {
                    return Err(SyqError::InvalidArgument(format!("code {bad} outside {{-1, 0, +1}}")));
                }
                if *mode == QuantMode::Binary && codes.contains(&0) {
                    return Err(SyqError::InvalidArgument("binary layer contains a zero code".into()));
                }
            }
            LayerWeights::Full(w) => {
                if w.len() != z {
                    return Err(SyqError::shape("layer weights", z, w.len()));
                }
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(SyqError::NonFinite("layer weights"));
                }
            }
        }
        Ok(())
    }

    /// Dense effective weights `α ⊙ Q` (or the full-precision weights).
    pub fn dense_weights(&self) -> Result<Vec<f64>> {
        match &self.weights {
            LayerWeights::Quantized { codes, alpha, .. } => {
                scale_codes(codes, alpha, &self.subgroups()?.expect("quantized"))
            }
            LayerWeights::Full(w) => Ok(w.clone()),
        }
    }

    /// Per output: for every subgroup, the input taps with code `+1` and with code `−1`.
    fn subdot_plan(&self) -> Result<SubdotPlan> {
        let LayerWeights::Quantized { codes, alpha, .. } = &self.weights else {
            return Err(SyqError::Contract("sub-dot inference needs a quantized layer".into()));
        };
        let sg = self.subgroups()?.expect("quantized");
        let fan_in = self.fan_in();
        let groups = sg.group_count();
        let mut outputs = Vec::with_capacity(self.outputs());
        for o in 0..self.outputs() {
            let mut plus = vec![Vec::new(); groups];
            let mut minus = vec![Vec::new(); groups];
            for t in 0..fan_in {
                let j = o * fan_in + t;
                let g = sg.group_of()[j];
                match codes[j] {
                    1 => plus[g].push(t),
                    -1 => minus[g].push(t),
                    _ => {}
                }
            }
            outputs.push(plus.into_iter().zip(minus).collect());
        }
        Ok(SubdotPlan {
            alpha: alpha.as_slice().to_vec(),
            outputs,
        })
    }

    /// Runs the layer (without its activation quantizer) on `(n, C, H, W)` input.
    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let n = x.dims()[0];
        let in_dims = self.in_dims();
        let [_, c, h, w] = x.dims();
        match self.kind {
            LayerKind::Conv => {
                if [c, h, w] != in_dims {
                    return Err(SyqError::shape("layer input", in_dims, [c, h, w]));
                }
            }
            LayerKind::Fc => {
                if c * h * w != self.shape.l {
                    return Err(SyqError::shape("layer input width", self.shape.l, c * h * w));
                }
            }
        }
        match (&self.weights, self.kind) {
            (LayerWeights::Full(wts), LayerKind::Conv) => {
                let wt = Tensor4::new([self.shape.n, self.shape.i, self.shape.k, self.shape.k], wts.clone())?;
                conv2d_forward(x, &wt, self.stride, self.pad)
            }
            (LayerWeights::Full(wts), LayerKind::Fc) => {
                let wm = Matrix::new(self.shape.h, self.shape.l, wts.clone())?;
                let xm = Matrix::new(n, self.shape.l, x.as_slice().to_vec())?;
                Ok(fc_forward(&xm, &wm)?.into_tensor())
            }
            (LayerWeights::Quantized { .. }, LayerKind::Conv) => self.subdot_conv(x),
            (LayerWeights::Quantized { .. }, LayerKind::Fc) => self.subdot_fc(x),
        }
    }

    fn subdot_conv(&self, x: &Tensor4) -> Result<Tensor4> {
        let plan = self.subdot_plan()?;
        let [n, c, h, w] = x.dims();
        let k = self.shape.k;
        let [oc, oh, ow] = self.out_dims()?;
        let positions = oh * ow;
        let mut col = vec![0.0; c * k * k * positions];
        let mut acc = vec![0.0; positions];
        let mut out = Tensor4::zeros([n, oc, oh, ow]);
        for s in 0..n {
            im2col(x.item(s), [c, h, w], k, self.stride, self.pad, [oh, ow], &mut col);
            let dst = &mut out.as_mut_slice()[s * oc * positions..(s + 1) * oc * positions];
            for (o, groups) in plan.outputs.iter().enumerate() {
                let y = &mut dst[o * positions..(o + 1) * positions];
                for (g, (plus, minus)) in groups.iter().enumerate() {
                    if plus.is_empty() && minus.is_empty() {
                        continue;
                    }
                    acc.fill(0.0);
                    for &t in plus {
                        for (a, &v) in acc.iter_mut().zip(&col[t * positions..(t + 1) * positions]) {
                            *a += v;
                        }
                    }
                    for &t in minus {
                        for (a, &v) in acc.iter_mut().zip(&col[t * positions..(t + 1) * positions]) {
                            *a -= v;
                        }
                    }
                    let alpha = plan.alpha[g];
                    for (yv, &a) in y.iter_mut().zip(&acc) {
                        *yv += alpha * a;
                    }
                }
            }
        }
        Ok(out)
    }

    fn subdot_fc(&self, x: &Tensor4) -> Result<Tensor4> {
        let plan = self.subdot_plan()?;
        let n = x.dims()[0];
        let xt = Matrix::new(n, self.shape.l, x.as_slice().to_vec())?.transpose();
        let hdim = self.shape.h;
        let mut out = Matrix::zeros(n, hdim);
        let mut acc = vec![0.0; n];
        let mut y = vec![0.0; n];
        for (o, groups) in plan.outputs.iter().enumerate() {
            y.fill(0.0);
            for (g, (plus, minus)) in groups.iter().enumerate() {
                acc.fill(0.0);
                for &t in plus {
                    for (a, &v) in acc.iter_mut().zip(xt.row(t)) {
                        *a += v;
                    }
                }
                for &t in minus {
                    for (a, &v) in acc.iter_mut().zip(xt.row(t)) {
                        *a -= v;
                    }
                }
                let alpha = plan.alpha[g];
                for (yv, &a) in y.iter_mut().zip(&acc) {
                    *yv += alpha * a;
                }
            }
            for (b, &v) in y.iter().enumerate() {
                out.set(b, o, v);
            }
        }
        Ok(out.into_tensor())
    }
}

struct SubdotPlan {
    alpha: Vec<f64>,
    /// `outputs[o][g] = (plus taps, minus taps)`.
    outputs: Vec<Vec<(Vec<usize>, Vec<usize>)>>,
}

/// Outputs of a quantized layer for one input patch, computed as
/// `Σ_g α_g · (Σ_{j∈g} q_j·x_j)` where every inner sum only adds, subtracts
/// or skips inputs.
///
/// The patch is laid out like one filter: `(i, k1, k2)` for convolutions,
/// `L` inputs for fully-connected layers.
pub fn subdot_infer(layer: &QuantizedLayer, patch: &[f64]) -> Result<Vec<f64>> {
    if patch.len() != layer.fan_in() {
        return Err(SyqError::shape("subdot_infer patch", layer.fan_in(), patch.len()));
    }
    let plan = layer.subdot_plan()?;
    Ok(plan
        .outputs
        .iter()
        .map(|groups| {
            let mut y = 0.0;
            for (g, (plus, minus)) in groups.iter().enumerate() {
                let mut acc = 0.0;
                for &t in plus {
                    acc += patch[t];
                }
                for &t in minus {
                    acc -= patch[t];
                }
                y += plan.alpha[g] * acc;
            }
            y
        })
        .collect())
}

/// Inference-time batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub activation: Option<ActQuantConfig>,
}

impl BatchNormLayer {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0 || self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(SyqError::InvalidArgument(
                "batch norm parameter lengths disagree".into(),
            ));
        }
        if self.var.iter().any(|v| !(*v >= 0.0)) {
            return Err(SyqError::InvalidArgument(
                "batch norm variance must be non-negative".into(),
            ));
        }
        if let Some(act) = &self.activation {
            act.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelLayer {
    Weights(QuantizedLayer),
    BatchNorm(BatchNormLayer),
}

impl ModelLayer {
    pub fn activation(&self) -> Option<ActQuantConfig> {
        match self {
            ModelLayer::Weights(l) => l.activation,
            ModelLayer::BatchNorm(b) => b.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Fraction of correctly classified samples.
    pub top1: f64,
    /// Mean softmax cross-entropy.
    pub loss: f64,
    pub count: usize,
}

/// Samples per inference batch in [`QuantizedModel::evaluate`].
pub const EVAL_BATCH: usize = 250;

/// A trained network with full-precision weights discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    layers: Vec<ModelLayer>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl QuantizedModel {
    pub fn new(layers: Vec<ModelLayer>) -> Result<Self> {
        let model = Self { layers };
        model.validate()?;
        Ok(model)
    }

    /// Freezes a training state: quantized layers keep their codes and
    /// coefficients, everything stored as 32-bit reals.
    pub fn from_state(network: &Network, state: &TrainState) -> Result<Self> {
        if state.layers.len() != network.plans().len() {
            return Err(SyqError::Contract("state does not belong to this network".into()));
        }
        let mut layers = Vec::new();
        for (plan, ls) in network.plans().iter().zip(&state.layers) {
            let spec = &plan.spec;
            let weights = match &ls.scales {
                Some(scales) => {
                    let eta = compute_threshold(&ls.weights, spec.mode)?;
                    let mq = quantize_weights(&ls.weights, eta)?;
                    let alpha = scales.alpha.as_slice().iter().map(|&a| f32_round(a)).collect();
                    LayerWeights::Quantized {
                        mode: spec.mode,
                        granularity: spec.granularity,
                        codes: mq.q,
                        alpha: ScaleVector::new(alpha)?,
                    }
                }
                None => LayerWeights::Full(ls.weights.iter().map(|&w| f32_round(w)).collect()),
            };
            let (stride, pad) = match spec.kind {
                LayerKind::Conv => (spec.stride, spec.pad),
                LayerKind::Fc => (1, 0),
            };
            layers.push(ModelLayer::Weights(QuantizedLayer {
                kind: spec.kind,
                shape: plan.shape,
                stride,
                pad,
                weights,
                activation: if ls.bn.is_some() { None } else { spec.activation },
            }));
            if let Some(bn) = &ls.bn {
                layers.push(ModelLayer::BatchNorm(freeze_bn(bn, spec.activation)?));
            }
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[ModelLayer] {
        &self.layers
    }

    pub fn weight_layers(&self) -> impl Iterator<Item = &QuantizedLayer> {
        self.layers.iter().filter_map(|l| match l {
            ModelLayer::Weights(w) => Some(w),
            ModelLayer::BatchNorm(_) => None,
        })
    }

    /// `(channels, height, width)` the first layer expects.
    pub fn input_dims(&self) -> [usize; 3] {
        self.weight_layers().next().expect("validated").in_dims()
    }

    pub fn classes(&self) -> usize {
        self.weight_layers().last().expect("validated").outputs()
    }

    /// Checks that consecutive layers agree on their dimensions.
    pub fn validate(&self) -> Result<()> {
        let first = match self.layers.first() {
            Some(ModelLayer::Weights(l)) => l,
            Some(ModelLayer::BatchNorm(_)) => {
                return Err(SyqError::InvalidArgument("model must start with a weight layer".into()))
            }
            None => return Err(SyqError::InvalidArgument("model has no layers".into())),
        };
        let mut dims = first.in_dims();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                ModelLayer::Weights(l) => {
                    l.validate()?;
                    let ok = match l.kind {
                        LayerKind::Conv => l.in_dims() == dims,
                        LayerKind::Fc => l.shape.l == dims.iter().product::<usize>(),
                    };
                    if !ok {
                        return Err(at_layer(idx, SyqError::shape("model layer input", dims, l.in_dims())));
                    }
                    dims = l.out_dims()?;
                }
                ModelLayer::BatchNorm(b) => {
                    b.validate()?;
                    if b.channels() != dims[0] {
                        return Err(at_layer(
                            idx,
                            SyqError::shape("batch norm channels", dims[0], b.channels()),
                        ));
                    }
                }
            }
        }
        match self.layers.last() {
            Some(ModelLayer::Weights(l)) if l.kind == LayerKind::Fc && l.activation.is_none() => Ok(()),
            _ => Err(SyqError::InvalidArgument(
                "model must end with a fully-connected layer producing logits".into(),
            )),
        }
    }

    pub fn predict_logits(&self, batch: &Tensor4) -> Result<Matrix> {
        let [n, c, h, w] = batch.dims();
        if n == 0 {
            return Err(SyqError::InvalidArgument("empty batch".into()));
        }
        let want = self.input_dims();
        if c * h * w != want.iter().product::<usize>() {
            return Err(SyqError::shape("model input", want, [c, h, w]));
        }
        let mut x = batch.clone().reshape([n, want[0], want[1], want[2]])?;
        for layer in &self.layers {
            x = match layer {
                ModelLayer::Weights(l) => {
                    let y = l.forward(&x)?;
                    let [oc, oh, ow] = l.out_dims()?;
                    y.reshape([n, oc, oh, ow])?
                }
                ModelLayer::BatchNorm(b) => batchnorm_inference(&x, &b.gamma, &b.beta, &b.mean, &b.var, DEFAULT_EPS)?,
            };
            if let Some(cfg) = layer.activation() {
                quantize_activation_in_place(x.as_mut_slice(), &cfg);
            }
        }
        Ok(x.into_matrix())
    }

    pub fn predict(&self, batch: &Tensor4) -> Result<Vec<usize>> {
        let logits = self.predict_logits(batch)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Top-1 accuracy and mean cross-entropy over a whole dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        if data.is_empty() {
            return Err(SyqError::InvalidArgument("cannot evaluate on an empty dataset".into()));
        }
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        let mut start = 0;
        while start < data.len() {
            let end = (start + EVAL_BATCH).min(data.len());
            let idx: Vec<usize> = (start..end).collect();
            let (x, y) = data.batch(&idx)?;
            let logits = self.predict_logits(&x)?;
            if let Some(&bad) = y.iter().find(|&&l| l >= logits.cols()) {
                return Err(SyqError::InvalidArgument(format!(
                    "label {bad} out of range for {} classes",
                    logits.cols()
                )));
            }
            let (loss, _) = softmax_cross_entropy(&logits, &y)?;
            loss_sum += loss * idx.len() as f64;
            correct += (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == y[r]).count();
            start = end;
        }
        Ok(Metrics {
            top1: correct as f64 / data.len() as f64,
            loss: loss_sum / data.len() as f64,
            count: data.len(),
        })
    }
}

fn freeze_bn(bn: &BatchNormParams, activation: Option<ActQuantConfig>) -> Result<BatchNormLayer> {
    if bn.eps != DEFAULT_EPS {
        return Err(SyqError::InvalidArgument(format!(
            "exported batch norm uses eps = {DEFAULT_EPS}, layer has {}",
            bn.eps
        )));
    }
    let r = |v: &[f64]| v.iter().map(|&x| f32_round(x)).collect::<Vec<_>>();
    Ok(BatchNormLayer {
        gamma: r(&bn.gamma),
        beta: r(&bn.beta),
        mean: r(&bn.running_mean),
        var: r(&bn.running_var),
        activation,
    })
}

fn at_layer(idx: usize, err: SyqError) -> SyqError {
    SyqError::InvalidArgument(format!("layer {idx}: {err}"))
}
