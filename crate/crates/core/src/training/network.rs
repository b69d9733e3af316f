//! Quantized forward pass, STE backward pass and the per-step update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerSpec, ModelConfig, TrainConfig};
use super::state::{LayerState, TrainState};
use crate::act_quant::{act_ste_backward, quantize_activation_in_place, ActQuantConfig};
use crate::error::{Result, SyqError};
use crate::scaling::{init_scales, scale_gradient_with, update_scales, ScaleGradRule, ScaleState};
use crate::subgroups::{build_subgroups, scale_codes, LayerKind, SubgroupIndex};
use crate::tensor::conv::conv2d_backward_weights;
use crate::tensor::linear::fc_backward_weights;
use crate::tensor::{
    argmax, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, conv2d_forward_cached,
    conv_output_size, fc_backward, fc_forward, fc_forward_cached, softmax_cross_entropy, BatchNormCache,
    BatchNormParams, Conv2dCache, FcCache, LayerShape, Matrix, Tensor4,
};
use crate::weight_quant::{compute_threshold, quantize_weights, ste_weight_grad, MaskedQuant};

/// Resolved dimensions of one layer.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub spec: LayerSpec,
    pub shape: LayerShape,
    /// `(channels, height, width)` of the layer input.
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    /// `(N, I, K, K)` for convolutions, `(H, L, 1, 1)` for FC.
    pub weight_dims: [usize; 4],
    pub subgroups: Option<SubgroupIndex>,
}

impl LayerPlan {
    pub fn weight_count(&self) -> usize {
        self.weight_dims.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.weight_dims[1] * self.weight_dims[2] * self.weight_dims[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone)]
enum OpCache {
    Conv(Conv2dCache),
    Fc(FcCache),
}

#[derive(Debug, Clone)]
struct LayerCache {
    op: OpCache,
    quant: Option<MaskedQuant>,
    bn: Option<BatchNormCache>,
    pre_activation: Option<Vec<f64>>,
}

/// Output of a cached forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub logits: Matrix,
    layers: Vec<LayerCache>,
    phase: Phase,
}

impl ForwardCache {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn quantized_codes(&self, layer: usize) -> Option<&MaskedQuant> {
        self.layers.get(layer).and_then(|c| c.quant.as_ref())
    }

    pub fn batch_norm_cache(&self, layer: usize) -> Option<&BatchNormCache> {
        self.layers.get(layer).and_then(|c| c.bn.as_ref())
    }

    pub fn pre_activation(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(layer).and_then(|c| c.pre_activation.as_deref())
    }
}

/// Activation outputs pinned to the codes of a reference forward pass.
///
/// Inside `[0, M]` the quantizer becomes `x ↦ x + (G(x₀) − x₀)`, outside it
/// becomes the constant `G(x₀)`. This is the function whose exact derivative
/// the activation STE computes, which makes finite-difference checks of the
/// full backward pass possible.
#[derive(Debug, Clone)]
pub struct FrozenActivations {
    layers: Vec<Option<FrozenLayer>>,
}

/// Reference pre-activations, their codes and the clip bound `M`.
type FrozenLayer = (Vec<f64>, Vec<f64>, f64);

impl FrozenActivations {
    pub fn capture(network: &Network, cache: &ForwardCache) -> Self {
        let layers = network
            .plans
            .iter()
            .zip(&cache.layers)
            .map(|(plan, lc)| {
                let cfg = plan.spec.activation?;
                let x0 = lc.pre_activation.clone()?;
                let mut g0 = x0.clone();
                quantize_activation_in_place(&mut g0, &cfg);
                Some((x0, g0, cfg.upper_bound()))
            })
            .collect();
        Self { layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Gradient w.r.t. the weights the forward pass used (`Ŵ` on quantized layers).
    pub effective: Vec<f64>,
    /// Gradient routed to the full-precision weights.
    pub weights: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub bn_gamma: Option<Vec<f64>>,
    pub bn_beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub correct: usize,
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

/// A validated model configuration with resolved layer dimensions.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    plans: Vec<LayerPlan>,
}

impl Network {
    /// Requires full-precision first and last layers.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::build(config, false)
    }

    /// Like [`Network::new`] but also accepts quantized first/last layers.
    pub fn new_relaxed(config: ModelConfig) -> Result<Self> {
        Self::build(config, true)
    }

    fn build(config: ModelConfig, relaxed: bool) -> Result<Self> {
        config.validate(relaxed)?;
        let mut dims = config.input;
        let mut plans = Vec::with_capacity(config.layers.len());
        for (idx, spec) in config.layers.iter().enumerate() {
            let field = format!("layers[{idx}]");
            let plan = match spec.kind {
                LayerKind::Conv => {
                    let [c, h, w] = dims;
                    if h != w {
                        return Err(SyqError::config(&field, "convolution input must be square"));
                    }
                    let oh = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
                        .map_err(|e| SyqError::config(&field, e.to_string()))?;
                    let shape = LayerShape::conv(spec.kernel, c, spec.out, h)?;
                    LayerPlan {
                        spec: spec.clone(),
                        shape,
                        in_dims: dims,
                        out_dims: [spec.out, oh, oh],
                        weight_dims: shape.conv_weight_dims(),
                        subgroups: None,
                    }
                }
                LayerKind::Fc => {
                    let l = dims.iter().product();
                    let shape = LayerShape::fc(l, spec.out)?;
                    LayerPlan {
                        spec: spec.clone(),
                        shape,
                        in_dims: dims,
                        out_dims: [spec.out, 1, 1],
                        weight_dims: [spec.out, l, 1, 1],
                        subgroups: None,
                    }
                }
            };
            let subgroups = if spec.quantized {
                Some(
                    build_subgroups(&plan.shape, spec.kind, spec.granularity)
                        .map_err(|e| SyqError::config(&field, e.to_string()))?,
                )
            } else {
                None
            };
            dims = plan.out_dims;
            plans.push(LayerPlan { subgroups, ..plan });
        }
        Ok(Self { config, plans })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plans(&self) -> &[LayerPlan] {
        &self.plans
    }

    /// He-normal weights from the config seed; scales start at the mean
    /// absolute weight of their subgroup.
    pub fn init_state(&self, learning_rate: f64) -> Result<TrainState> {
        if !(learning_rate > 0.0) {
            return Err(SyqError::config("learning_rate", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut layers = Vec::with_capacity(self.plans.len());
        for plan in &self.plans {
            let std = (2.0 / plan.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let weights: Vec<f64> = (0..plan.weight_count()).map(|_| normal.sample(&mut rng)).collect();
            let scales = match &plan.subgroups {
                Some(sg) => Some(ScaleState::new(init_scales(&weights, sg)?)),
                None => None,
            };
            let scale_len = scales.as_ref().map_or(0, |s| s.alpha.len());
            let bn = plan.spec.batch_norm.then(|| BatchNormParams::new(plan.out_dims[0]));
            let bn_len = bn.as_ref().map_or(0, |b| 2 * b.channels());
            layers.push(LayerState {
                velocity: vec![0.0; weights.len()],
                weights,
                scales,
                scale_velocity: vec![0.0; scale_len],
                bn,
                bn_velocity: vec![0.0; bn_len],
            });
        }
        Ok(TrainState {
            layers,
            learning_rate,
            step: 0,
            epoch: 0,
            rng,
        })
    }

    /// Quantized starting point taken from a state trained on the
    /// [`ModelConfig::full_precision`] twin of this network: weights and batch
    /// norm are copied, scales are initialized from the copied weights,
    /// momentum and the step counter start over, and the RNG continues.
    pub fn init_state_from(&self, warm: &TrainState, learning_rate: f64) -> Result<TrainState> {
        if !(learning_rate > 0.0) {
            return Err(SyqError::config("learning_rate", "must be positive"));
        }
        if warm.layers.len() != self.plans.len() {
            return Err(SyqError::Contract(format!(
                "warm-start state has {} layers, network has {}",
                warm.layers.len(),
                self.plans.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.plans.len());
        for (idx, (plan, src)) in self.plans.iter().zip(&warm.layers).enumerate() {
            if src.weights.len() != plan.weight_count() || src.bn.is_some() != plan.spec.batch_norm {
                return Err(SyqError::Contract(format!(
                    "warm-start layer {idx} does not match the network"
                )));
            }
            let scales = match &plan.subgroups {
                Some(sg) => Some(ScaleState::new(init_scales(&src.weights, sg)?)),
                None => None,
            };
            let scale_len = scales.as_ref().map_or(0, |s| s.alpha.len());
            layers.push(LayerState {
                weights: src.weights.clone(),
                velocity: vec![0.0; src.weights.len()],
                scales,
                scale_velocity: vec![0.0; scale_len],
                bn: src.bn.clone(),
                bn_velocity: vec![0.0; src.bn_velocity.len()],
            });
        }
        Ok(TrainState {
            layers,
            learning_rate,
            step: 0,
            epoch: 0,
            rng: warm.rng.clone(),
        })
    }

    fn check_state(&self, state: &TrainState) -> Result<()> {
        if state.layers.len() != self.plans.len() {
            return Err(SyqError::Contract(format!(
                "state has {} layers, network has {}",
                state.layers.len(),
                self.plans.len()
            )));
        }
        for (idx, (plan, layer)) in self.plans.iter().zip(&state.layers).enumerate() {
            if layer.weights.len() != plan.weight_count()
                || layer.scales.is_some() != plan.subgroups.is_some()
                || layer.bn.is_some() != plan.spec.batch_norm
            {
                return Err(SyqError::Contract(format!(
                    "state layer {idx} does not match the network"
                )));
            }
        }
        Ok(())
    }

    /// Weights the forward pass uses: `α ⊙ Q` on quantized layers, `W` elsewhere.
    pub fn effective_weights(&self, state: &TrainState, layer: usize) -> Result<(Vec<f64>, Option<MaskedQuant>)> {
        let plan = &self.plans[layer];
        let ls = &state.layers[layer];
        match (&plan.subgroups, &ls.scales) {
            (Some(sg), Some(scales)) => {
                let eta = compute_threshold(&ls.weights, plan.spec.mode)?;
                let mq = quantize_weights(&ls.weights, eta)?;
                let w_hat = scale_codes(&mq.q, &scales.alpha, sg)?;
                Ok((w_hat, Some(mq)))
            }
            _ => Ok((ls.weights.clone(), None)),
        }
    }

    fn check_batch(&self, batch: &Tensor4) -> Result<()> {
        let [_, c, h, w] = batch.dims();
        if [c, h, w] != self.config.input {
            return Err(SyqError::shape("network input", self.config.input, [c, h, w]));
        }
        if batch.dims()[0] == 0 {
            return Err(SyqError::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }

    /// Quantized forward pass keeping everything the backward pass needs.
    pub fn forward(&self, state: &TrainState, batch: &Tensor4, phase: Phase) -> Result<ForwardCache> {
        self.forward_impl(state, batch, phase, None)
    }

    /// Forward pass with activation codes pinned by [`FrozenActivations`].
    pub fn forward_frozen(
        &self,
        state: &TrainState,
        batch: &Tensor4,
        phase: Phase,
        frozen: &FrozenActivations,
    ) -> Result<ForwardCache> {
        self.forward_impl(state, batch, phase, Some(frozen))
    }

    fn forward_impl(
        &self,
        state: &TrainState,
        batch: &Tensor4,
        phase: Phase,
        frozen: Option<&FrozenActivations>,
    ) -> Result<ForwardCache> {
        self.check_state(state)?;
        self.check_batch(batch)?;
        let n = batch.dims()[0];
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(self.plans.len());
        for (idx, plan) in self.plans.iter().enumerate() {
            let (w_eff, quant) = self.effective_weights(state, idx)?;
            let (mut y, op) = match plan.spec.kind {
                LayerKind::Conv => {
                    let w = Tensor4::new(plan.weight_dims, w_eff)?;
                    let (y, c) = conv2d_forward_cached(&x, &w, plan.spec.stride, plan.spec.pad)?;
                    (y, OpCache::Conv(c))
                }
                LayerKind::Fc => {
                    let w = Matrix::new(plan.weight_dims[0], plan.weight_dims[1], w_eff)?;
                    let (y, c) = fc_forward_cached(&x.into_matrix(), &w)?;
                    (y.into_tensor(), OpCache::Fc(c))
                }
            };
            let mut bn_cache = None;
            if let Some(bn) = &state.layers[idx].bn {
                y = match phase {
                    Phase::Train => {
                        let (out, c) = batchnorm_forward(&y, &bn.gamma, &bn.beta, bn.eps)?;
                        bn_cache = Some(c);
                        out
                    }
                    Phase::Eval => bn.forward_eval(&y)?,
                };
            }
            let mut pre_activation = None;
            if let Some(cfg) = &plan.spec.activation {
                pre_activation = Some(y.as_slice().to_vec());
                match frozen.and_then(|f| f.layers.get(idx)).and_then(Option::as_ref) {
                    Some((x0, g0, m)) => apply_frozen(y.as_mut_slice(), x0, g0, *m)?,
                    None => quantize_activation_in_place(y.as_mut_slice(), cfg),
                }
            }
            caches.push(LayerCache {
                op,
                quant,
                bn: bn_cache,
                pre_activation,
            });
            let [c, h, w] = plan.out_dims;
            x = y.reshape([n, c, h, w])?;
        }
        let logits = x.into_matrix();
        if !logits.is_finite() {
            return Err(SyqError::Divergence {
                step: state.step,
                loss: f64::NAN,
            });
        }
        Ok(ForwardCache {
            logits,
            layers: caches,
            phase,
        })
    }

    /// Evaluation-mode logits along the training path (no caches kept).
    pub fn predict_logits(&self, state: &TrainState, batch: &Tensor4) -> Result<Matrix> {
        self.check_state(state)?;
        self.check_batch(batch)?;
        let n = batch.dims()[0];
        let mut x = batch.clone();
        for (idx, plan) in self.plans.iter().enumerate() {
            let (w_eff, _) = self.effective_weights(state, idx)?;
            let mut y = match plan.spec.kind {
                LayerKind::Conv => conv2d_forward(
                    &x,
                    &Tensor4::new(plan.weight_dims, w_eff)?,
                    plan.spec.stride,
                    plan.spec.pad,
                )?,
                LayerKind::Fc => {
                    let w = Matrix::new(plan.weight_dims[0], plan.weight_dims[1], w_eff)?;
                    fc_forward(&x.into_matrix(), &w)?.into_tensor()
                }
            };
            if let Some(bn) = &state.layers[idx].bn {
                y = bn.forward_eval(&y)?;
            }
            if let Some(cfg) = &plan.spec.activation {
                quantize_activation_in_place(y.as_mut_slice(), cfg);
            }
            let [c, h, w] = plan.out_dims;
            x = y.reshape([n, c, h, w])?;
        }
        Ok(x.into_matrix())
    }

    /// Loss and gradients for a cached forward pass.
    pub fn backward(
        &self,
        state: &TrainState,
        cache: &ForwardCache,
        targets: &[usize],
        rule: ScaleGradRule,
    ) -> Result<Gradients> {
        let (loss, grad_logits) = softmax_cross_entropy(&cache.logits, targets)?;
        let correct = (0..cache.logits.rows())
            .filter(|&b| argmax(cache.logits.row(b)) == targets[b])
            .count();
        let layers = self.backward_from(state, cache, grad_logits, rule)?;
        Ok(Gradients { loss, correct, layers })
    }

    /// Backpropagates an arbitrary upstream gradient on the logits.
    pub fn backward_from(
        &self,
        state: &TrainState,
        cache: &ForwardCache,
        grad_logits: Matrix,
        rule: ScaleGradRule,
    ) -> Result<Vec<LayerGrad>> {
        self.check_state(state)?;
        if cache.layers.len() != self.plans.len() {
            return Err(SyqError::Contract(
                "forward cache does not belong to this network".into(),
            ));
        }
        if (grad_logits.rows(), grad_logits.cols()) != (cache.logits.rows(), cache.logits.cols()) {
            return Err(SyqError::Contract(
                "logit gradient does not match the cached forward pass".into(),
            ));
        }
        let n = cache.logits.rows();
        let mut grads: Vec<Option<LayerGrad>> = vec![None; self.plans.len()];
        let mut g = grad_logits.into_tensor();
        for idx in (0..self.plans.len()).rev() {
            let plan = &self.plans[idx];
            let lc = &cache.layers[idx];
            let [c, h, w] = plan.out_dims;
            g = g.reshape([n, c, h, w])?;

            if let (Some(cfg), Some(pre)) = (&plan.spec.activation, &lc.pre_activation) {
                let masked = act_ste_backward(g.as_slice(), pre, cfg)?;
                g = Tensor4::new(g.dims(), masked)?;
            }
            let (mut bn_gamma, mut bn_beta) = (None, None);
            if state.layers[idx].bn.is_some() {
                let bn_cache = lc.bn.as_ref().ok_or_else(|| {
                    SyqError::Contract("backward needs a training-phase forward pass (batch norm cache missing)".into())
                })?;
                let (gx, gg, gb) = batchnorm_backward(&g, bn_cache)?;
                g = gx;
                bn_gamma = Some(gg);
                bn_beta = Some(gb);
            }
            let want_input = idx > 0;
            let (grad_in, effective) = match &lc.op {
                OpCache::Conv(oc) => {
                    if want_input {
                        let (gi, gw) = conv2d_backward(&g, oc)?;
                        (Some(gi), gw.into_vec())
                    } else {
                        (None, conv2d_backward_weights(&g, oc)?.into_vec())
                    }
                }
                OpCache::Fc(fc) => {
                    let gm = g.into_matrix();
                    if want_input {
                        let (gi, gw) = fc_backward(&gm, fc)?;
                        (Some(gi.into_tensor()), gw.into_vec())
                    } else {
                        (None, fc_backward_weights(&gm, fc)?.into_vec())
                    }
                }
            };
            let (weights, alpha) = match (&plan.subgroups, &state.layers[idx].scales, &lc.quant) {
                (Some(sg), Some(scales), Some(mq)) => {
                    let ga = scale_gradient_with(&effective, mq, sg, rule)?;
                    let gw = ste_weight_grad(&effective, &scales.alpha, sg)?;
                    (gw, Some(ga))
                }
                (None, None, None) => (effective.clone(), None),
                _ => {
                    return Err(SyqError::Contract(
                        "quantization cache does not match the network".into(),
                    ))
                }
            };
            grads[idx] = Some(LayerGrad {
                effective,
                weights,
                alpha,
                bn_gamma,
                bn_beta,
            });
            if let Some(gi) = grad_in {
                g = gi;
            } else {
                break;
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every layer visited")).collect())
    }

    /// One optimizer step: quantized forward, STE backward, SGD with momentum
    /// on weights, scales and batch-norm affine parameters, then the
    /// learning-rate schedule. On divergence the state is left untouched.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        cfg: &TrainConfig,
        batch: &Tensor4,
        labels: &[usize],
    ) -> Result<StepStats> {
        let cache = self.forward(state, batch, Phase::Train)?;
        let grads = self.backward(state, &cache, labels, cfg.scale_grad_rule)?;
        let finite = grads.loss.is_finite()
            && grads.layers.iter().all(|l| {
                l.weights.iter().all(|v| v.is_finite())
                    && l.alpha.as_ref().is_none_or(|a| a.iter().all(|v| v.is_finite()))
            });
        if !finite {
            return Err(SyqError::Divergence {
                step: state.step,
                loss: grads.loss,
            });
        }
        let mut next = state.clone();
        self.apply_gradients(&mut next, cfg, &grads, Some(&cache))?;
        if !next.is_finite() {
            return Err(SyqError::Divergence {
                step: state.step,
                loss: grads.loss,
            });
        }
        *state = next;
        Ok(StepStats {
            loss: grads.loss,
            correct: grads.correct,
            batch: labels.len(),
        })
    }

    /// Applies one optimizer update and advances the step counter and schedule.
    /// `cache`, when given, supplies the batch statistics folded into the
    /// batch-norm running averages.
    pub fn apply_gradients(
        &self,
        state: &mut TrainState,
        cfg: &TrainConfig,
        grads: &Gradients,
        cache: Option<&ForwardCache>,
    ) -> Result<()> {
        self.check_state(state)?;
        let lr = state.learning_rate;
        let mu = cfg.momentum;
        for (idx, (ls, lg)) in state.layers.iter_mut().zip(&grads.layers).enumerate() {
            for ((w, v), g) in ls.weights.iter_mut().zip(ls.velocity.iter_mut()).zip(&lg.weights) {
                *v = mu * *v + g + cfg.weight_decay * *w;
                *w -= lr * *v;
            }
            if let (Some(scales), Some(ga)) = (ls.scales.as_mut(), lg.alpha.as_ref()) {
                for (v, g) in ls.scale_velocity.iter_mut().zip(ga) {
                    *v = mu * *v + g;
                }
                let stepped = update_scales(
                    &ScaleState {
                        alpha: scales.alpha.clone(),
                        grad_alpha: ls.scale_velocity.clone(),
                        step: scales.step,
                    },
                    lr,
                )?;
                scales.alpha = stepped.alpha;
                scales.step = stepped.step;
                scales.grad_alpha = ga.clone();
            }
            if let Some(bn) = ls.bn.as_mut() {
                if let Some(bc) = cache.and_then(|c| c.batch_norm_cache(idx)) {
                    bn.update_running(bc);
                }
                if let (Some(gg), Some(gb)) = (&lg.bn_gamma, &lg.bn_beta) {
                    let ch = bn.channels();
                    let (vg, vb) = ls.bn_velocity.split_at_mut(ch);
                    for c in 0..ch {
                        vg[c] = mu * vg[c] + gg[c];
                        vb[c] = mu * vb[c] + gb[c];
                        bn.gamma[c] -= lr * vg[c];
                        bn.beta[c] -= lr * vb[c];
                    }
                }
            }
        }
        state.step += 1;
        if cfg.lr_step > 0 && state.step.is_multiple_of(cfg.lr_step) {
            state.learning_rate *= cfg.lr_decay;
        }
        Ok(())
    }
}

fn apply_frozen(y: &mut [f64], x0: &[f64], g0: &[f64], m: f64) -> Result<()> {
    if y.len() != x0.len() {
        return Err(SyqError::Contract(
            "frozen activations captured from a different batch shape".into(),
        ));
    }
    for ((v, &a), &q) in y.iter_mut().zip(x0).zip(g0) {
        *v = if (0.0..=m).contains(&a) { *v + (q - a) } else { q };
    }
    Ok(())
}

/// Activation settings shared by a whole network, for callers that only need one.
pub fn uniform_activation(config: &ModelConfig) -> Option<ActQuantConfig> {
    config.layers.iter().find_map(|l| l.activation)
}
