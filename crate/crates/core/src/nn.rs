//! Layer abstraction with hand-derived backward passes, the parameter
//! registry, and a central-difference gradient checker.
//!
//! A `Layer` is one row of the architecture tables: a linear op (conv,
//! deconv, or fully connected), an optional batch normalization, and an
//! optional activation, applied in that order. Parameters live in a
//! `ParamStore`; layers hold handles, which is what lets the reconstruction
//! path reuse the discriminator's encoder and the generator's decoder without
//! copying weights.

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, Mode};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Handle into a `ParamStore`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors with paired gradient
/// buffers. Iteration order is registration order, always.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name, value, grad });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Add `delta` elementwise into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) -> Result<()> {
        let grad = &mut self.entries[id.0].grad;
        if grad.numel() != delta.len() {
            return Err(Error::shape(
                format!("gradient for {}", self.entries[id.0].name),
                grad.numel(),
                delta.len(),
            ));
        }
        for (g, d) in grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// (name, value, grad) triples in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, &e.grad))
    }

    pub fn snapshot_values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot size");
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            e.value = s.clone();
        }
    }
}

/// Linear part of a layer. Conv weights are `[F, C, k, k]`, deconv weights
/// `[C_in, C_out, k, k]`, fc weights `[Out, In]`.
#[derive(Clone, Debug)]
pub enum LinearOp {
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    Deconv {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    Fc {
        weight: ParamId,
        bias: Option<ParamId>,
    },
}

/// Batch-normalization state attached to a layer: learnable gamma/beta plus
/// running statistics (exponential moving average, momentum 0.9) for eval
/// mode.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm {
    pub fn new(gamma: ParamId, beta: ParamId, channels: usize) -> Self {
        Self {
            gamma,
            beta,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            running_mean: vec![0.0; channels],
            running_var: vec![0.0; channels],
            initialized: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub op: LinearOp,
    pub bn: Option<BatchNorm>,
    pub act: Option<Activation>,
}

/// Everything `backward` needs from a matching `forward` call.
pub struct LayerCache {
    mode: Mode,
    input: Tensor,
    /// Output of the linear op (input to batchnorm / activation).
    linear_out: Tensor,
    bn: Option<BnCacheEntry>,
    /// Input to the activation (linear or batchnorm output).
    pre_act: Tensor,
    output: Tensor,
}

struct BnCacheEntry {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Layer {
    fn shape_err(&self, err: Error) -> Error {
        match err {
            Error::Shape { context, expected, got } => Error::Shape {
                context: format!("layer {}: {context}", self.name),
                expected,
                got,
            },
            other => other,
        }
    }

    /// Linear op -> batchnorm (if present) -> activation (if present).
    pub fn forward(&mut self, store: &ParamStore, input: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        let linear_out = match &self.op {
            LinearOp::Conv { weight, bias, stride, pad } => kernels::conv2d(
                input,
                store.value(*weight),
                bias.map(|b| store.value(b)),
                *stride,
                *pad,
            ),
            LinearOp::Deconv { weight, bias, stride, pad } => kernels::deconv2d(
                input,
                store.value(*weight),
                bias.map(|b| store.value(b)),
                *stride,
                *pad,
            ),
            LinearOp::Fc { weight, bias } => {
                let flat = input
                    .clone()
                    .reshaped(&[input.shape()[0], input.numel() / input.shape()[0]])?;
                kernels::fc_forward(&flat, store.value(*weight), bias.map(|b| store.value(b)))
            }
        }
        .map_err(|e| self.shape_err(e))?;

        let (bn_cache, pre_act) = match &mut self.bn {
            Some(bn) => match mode {
                Mode::Train => {
                    let f = kernels::bn_forward_train(
                        &linear_out,
                        store.value(bn.gamma).data(),
                        store.value(bn.beta).data(),
                        bn.eps,
                    )?;
                    if bn.initialized {
                        for (r, b) in bn.running_mean.iter_mut().zip(&f.batch_mean) {
                            *r = bn.momentum * *r + (1.0 - bn.momentum) * b;
                        }
                        for (r, b) in bn.running_var.iter_mut().zip(&f.batch_var) {
                            *r = bn.momentum * *r + (1.0 - bn.momentum) * b;
                        }
                    } else {
                        bn.running_mean.copy_from_slice(&f.batch_mean);
                        bn.running_var.copy_from_slice(&f.batch_var);
                        bn.initialized = true;
                    }
                    (
                        Some(BnCacheEntry {
                            normalized: f.normalized,
                            inv_std: f.inv_std,
                        }),
                        f.output,
                    )
                }
                Mode::Eval => {
                    if !bn.initialized {
                        return Err(Error::Config(format!(
                            "layer {}: eval-mode batchnorm has no running statistics; \
                             load a checkpoint or run a train-mode forward pass first",
                            self.name
                        )));
                    }
                    let out = kernels::bn_forward_eval(
                        &linear_out,
                        store.value(bn.gamma).data(),
                        store.value(bn.beta).data(),
                        bn.eps,
                        &bn.running_mean,
                        &bn.running_var,
                    )?;
                    (None, out)
                }
            },
            None => (None, linear_out.clone()),
        };

        let output = match self.act {
            Some(kind) => kernels::activation_forward(&pre_act, kind),
            None => pre_act.clone(),
        };

        let cache = LayerCache {
            mode,
            input: input.clone(),
            linear_out,
            bn: bn_cache,
            pre_act,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Propagate `grad_out` back through the layer, accumulating parameter
    /// gradients into `store` and returning the gradient w.r.t. the input.
    pub fn backward(&self, store: &mut ParamStore, grad_out: &Tensor, cache: &LayerCache) -> Result<Tensor> {
        if grad_out.shape() != cache.output.shape() {
            return Err(self.shape_err(Error::shape(
                "backward grad",
                format!("{:?}", cache.output.shape()),
                format!("{:?}", grad_out.shape()),
            )));
        }

        let grad_pre_act = match self.act {
            Some(kind) => kernels::activation_backward(kind, grad_out, &cache.pre_act, &cache.output),
            None => grad_out.clone(),
        };

        let grad_linear = match (&self.bn, &cache.bn) {
            (Some(bn), Some(entry)) => {
                let (gin, dgamma, dbeta) = kernels::bn_backward_train(
                    &grad_pre_act,
                    &entry.normalized,
                    &entry.inv_std,
                    store.value(bn.gamma).data(),
                )?;
                store.accumulate_grad(bn.gamma, &dgamma)?;
                store.accumulate_grad(bn.beta, &dbeta)?;
                gin
            }
            (Some(bn), None) => {
                debug_assert_eq!(cache.mode, Mode::Eval);
                // Eval-mode cache carries no batch statistics; recompute the
                // frozen normalization for the gamma gradient.
                let normalized = {
                    let (n, c, h, w) = cache.linear_out.dims4()?;
                    let mut t = cache.linear_out.clone();
                    let plane = h * w;
                    for idx in 0..n * c {
                        let ch = idx % c;
                        let istd = 1.0 / (bn.running_var[ch] + bn.eps).sqrt();
                        let mean = bn.running_mean[ch];
                        for v in &mut t.data_mut()[idx * plane..(idx + 1) * plane] {
                            *v = (*v - mean) * istd;
                        }
                    }
                    t
                };
                let (gin, dgamma, dbeta) = kernels::bn_backward_eval(
                    &grad_pre_act,
                    &normalized,
                    store.value(bn.gamma).data(),
                    bn.eps,
                    &bn.running_var,
                )?;
                store.accumulate_grad(bn.gamma, &dgamma)?;
                store.accumulate_grad(bn.beta, &dbeta)?;
                gin
            }
            (None, _) => grad_pre_act,
        };

        let grad_in = match &self.op {
            LinearOp::Conv { weight, bias, stride, pad } => {
                let (_, _, h, w) = cache.input.dims4()?;
                let gw = kernels::conv2d_weight_grad(
                    &cache.input,
                    &grad_linear,
                    *stride,
                    *pad,
                    store.value(*weight).shape()[2],
                )?;
                store.accumulate_grad(*weight, gw.data())?;
                if let Some(b) = bias {
                    let gb = kernels::bias_grad(&grad_linear)?;
                    store.accumulate_grad(*b, &gb)?;
                }
                kernels::conv2d_input_grad(&grad_linear, store.value(*weight), *stride, *pad, (h, w))?
            }
            LinearOp::Deconv { weight, bias, stride, pad } => {
                let (_, _, h, w) = cache.input.dims4()?;
                let gw = kernels::deconv2d_weight_grad(
                    &cache.input,
                    &grad_linear,
                    *stride,
                    *pad,
                    store.value(*weight).shape()[2],
                )?;
                store.accumulate_grad(*weight, gw.data())?;
                if let Some(b) = bias {
                    let gb = kernels::bias_grad(&grad_linear)?;
                    store.accumulate_grad(*b, &gb)?;
                }
                kernels::deconv2d_input_grad(&grad_linear, store.value(*weight), *stride, *pad, (h, w))?
            }
            LinearOp::Fc { weight, bias } => {
                let n = cache.input.shape()[0];
                let flat = cache
                    .input
                    .clone()
                    .reshaped(&[n, cache.input.numel() / n])?;
                let gw = kernels::fc_weight_grad(&flat, &grad_linear)?;
                store.accumulate_grad(*weight, gw.data())?;
                if let Some(b) = bias {
                    let gb = kernels::fc_bias_grad(&grad_linear)?;
                    store.accumulate_grad(*b, &gb)?;
                }
                let gin = kernels::fc_input_grad(&grad_linear, store.value(*weight))?;
                gin.reshaped(cache.input.shape())?
            }
        };
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Layer construction helpers
// ---------------------------------------------------------------------------

/// Weight init: zero-mean Gaussian sigma = 0.02; batchnorm gamma ~ N(1, 0.02),
/// beta = 0; biases = 0. Biases exist only where no batchnorm follows the
/// linear op (beta subsumes them otherwise).
pub const INIT_SIGMA: f64 = 0.02;

pub struct LayerBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut RngState,
    pub prefix: &'a str,
    /// When true, parameters are zero-initialized (checkpoint loading paths).
    pub zero_init: bool,
}

impl<'a> LayerBuilder<'a> {
    fn init(&mut self, shape: &[usize], mean: f64, sigma: f64) -> Tensor {
        if self.zero_init {
            Tensor::zeros(shape)
        } else {
            crate::tensor::sample_gaussian(self.rng, shape, mean, sigma)
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bn: bool,
        act: Option<Activation>,
    ) -> Result<Layer> {
        let w = self.init(&[out_ch, in_ch, k, k], 0.0, INIT_SIGMA);
        let weight = self.store.register(format!("{}.{name}.weight", self.prefix), w)?;
        let bias = if bn {
            None
        } else {
            Some(self.store.register(
                format!("{}.{name}.bias", self.prefix),
                Tensor::zeros(&[out_ch]),
            )?)
        };
        let bn = self.make_bn(name, out_ch, bn)?;
        Ok(Layer {
            name: format!("{}.{name}", self.prefix),
            op: LinearOp::Conv { weight, bias, stride, pad },
            bn,
            act,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deconv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bn: bool,
        act: Option<Activation>,
    ) -> Result<Layer> {
        let w = self.init(&[in_ch, out_ch, k, k], 0.0, INIT_SIGMA);
        let weight = self.store.register(format!("{}.{name}.weight", self.prefix), w)?;
        let bias = if bn {
            None
        } else {
            Some(self.store.register(
                format!("{}.{name}.bias", self.prefix),
                Tensor::zeros(&[out_ch]),
            )?)
        };
        let bn = self.make_bn(name, out_ch, bn)?;
        Ok(Layer {
            name: format!("{}.{name}", self.prefix),
            op: LinearOp::Deconv { weight, bias, stride, pad },
            bn,
            act,
        })
    }

    pub fn fc(
        &mut self,
        name: &str,
        in_features: usize,
        out_features: usize,
        act: Option<Activation>,
    ) -> Result<Layer> {
        let w = self.init(&[out_features, in_features], 0.0, INIT_SIGMA);
        let weight = self.store.register(format!("{}.{name}.weight", self.prefix), w)?;
        let bias = Some(self.store.register(
            format!("{}.{name}.bias", self.prefix),
            Tensor::zeros(&[out_features]),
        )?);
        Ok(Layer {
            name: format!("{}.{name}", self.prefix),
            op: LinearOp::Fc { weight, bias },
            bn: None,
            act,
        })
    }

    fn make_bn(&mut self, name: &str, channels: usize, enabled: bool) -> Result<Option<BatchNorm>> {
        if !enabled {
            return Ok(None);
        }
        let gamma_t = self.init(&[channels], 1.0, INIT_SIGMA);
        let gamma = self
            .store
            .register(format!("{}.{name}.gamma", self.prefix), gamma_t)?;
        let beta = self.store.register(
            format!("{}.{name}.beta", self.prefix),
            Tensor::zeros(&[channels]),
        )?;
        Ok(Some(BatchNorm::new(gamma, beta, channels)))
    }
}

/// Run `layers` in order, collecting caches for a later backward sweep.
pub fn forward_stack(
    layers: &mut [Layer],
    store: &ParamStore,
    input: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Vec<LayerCache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for layer in layers.iter_mut() {
        let (out, cache) = layer.forward(store, &x, mode)?;
        caches.push(cache);
        x = out;
    }
    Ok((x, caches))
}

/// Backward sweep matching `forward_stack`, returning the input gradient.
pub fn backward_stack(
    layers: &[Layer],
    store: &mut ParamStore,
    grad_out: &Tensor,
    caches: &[LayerCache],
) -> Result<Tensor> {
    assert_eq!(layers.len(), caches.len(), "cache count");
    let mut g = grad_out.clone();
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = layer.backward(store, &g, cache)?;
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub const GRAD_CHECK_MAX_COORDS: usize = 200;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// (parameter name, coordinates checked, max relative error).
    pub per_param: Vec<(String, usize, f64)>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&(String, usize, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
    }
}

/// Compare analytic gradients in `store` against central finite differences
/// of `loss`, sampling at most `GRAD_CHECK_MAX_COORDS` coordinates per
/// parameter tensor.
///
/// `loss` must be a pure function of the parameter values (forward passes
/// only); the analytic gradients must already be accumulated in `store` by
/// the caller's backward pass.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss: F,
    h: f64,
    tol: f64,
    rng: &mut RngState,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("grad_check step h={h} outside [1e-7, 1e-4]")));
    }
    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        let numel = store.value(id).numel();
        let coords: Vec<usize> = if numel <= GRAD_CHECK_MAX_COORDS {
            (0..numel).collect()
        } else {
            (0..GRAD_CHECK_MAX_COORDS)
                .map(|_| rng.next_below(numel as u64) as usize)
                .collect()
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let lp = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let lm = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::GradCheck(format!(
                    "loss returned a non-finite value while perturbing {}[{i}]",
                    store.name(id)
                )));
            }
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = store.grad(id).data()[i];
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
        max_rel = max_rel.max(worst);
        per_param.push((store.name(id).to_string(), coords.len(), worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        tol,
    })
}
