//! Quantized layer primitives and reference architectures. This is where the
//! quantizer forward, the backward estimators, and the progressive
//! replacement masks meet the tape: weights flow through
//! leaf -> quantize -> mix -> layer op, with custom backward hooks routing
//! gradients to the latent full-precision weights and the clip parameters.

use crate::config::{ArchKind, QuantCfg};
use crate::curriculum::{mix_precision, ReplacementMask};
use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorConfig};
use crate::quantizer::{self, ClipFamily, QuantizerSpec, RoundFamily};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorId};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// Trainable quantizer clip parameters.
    Alpha,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct Params<T: Scalar> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Params<T> {
    fn add(&mut self, name: impl Into<String>, data: Vec<T>, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry { name: name.into(), data, shape, kind });
        self.entries.len() - 1
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.data.len()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BnState<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Quantization config of one quantized layer: weight quantizer, activation
/// quantizer (applied to the layer input), and their clip parameters.
#[derive(Debug, Clone)]
pub struct SiteCfg {
    pub layer_name: String,
    pub w_spec: QuantizerSpec,
    pub a_spec: QuantizerSpec,
    pub w_alpha: Option<ParamId>,
    pub a_alpha: Option<ParamId>,
    pub w_param: ParamId,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv { name: String, w: ParamId, stride: usize, pad: usize, site: Option<usize> },
    Linear { name: String, w: ParamId, b: ParamId, site: Option<usize> },
    BatchNorm { gamma: ParamId, beta: ParamId, state: usize },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    /// out = relu(body(x) + shortcut(x)); the shortcut zero-pads channels and
    /// subsamples when `pad_channels` is set.
    Residual { body: Vec<Layer>, pad_channels: Option<usize> },
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub width: f64,
    pub classes: usize,
    pub input_shape: (usize, usize, usize),
    pub quant: QuantCfg,
    pub seed: u64,
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub sites: Vec<SiteCfg>,
    pub params: Params<T>,
    pub bn_states: Vec<BnState<T>>,
    /// Interval activation quantizers calibrate on the first training batch.
    pub a_alpha_ready: Vec<bool>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteRole {
    Weight,
    Activation,
}

/// Tape handles recorded at one quantization node during a forward pass.
#[derive(Debug, Clone)]
pub struct SiteRecord {
    pub site: usize,
    pub role: SiteRole,
    /// Clip output in the normalized [0,1] domain.
    pub x_cn: TensorId,
    /// Quantizer output consumed by the layer.
    pub x_q: TensorId,
    /// Mean |x_cn - q_n| over the tensor at this step.
    pub disc_err: f64,
}

/// Everything a training step needs to know about the forward pass.
pub struct StepRun {
    pub logits: TensorId,
    /// Tape leaf of each parameter (by ParamId) for gradient retrieval.
    pub param_leaf: Vec<Option<TensorId>>,
    pub sites: Vec<SiteRecord>,
}

/// Per-step context: the resolved estimator, the sampled replacement mask,
/// and whether activations participate in replacement.
pub struct StepCtx<'a> {
    pub mode: Mode,
    pub estimator: EstimatorConfig,
    pub mask: Option<&'a ReplacementMask>,
    pub replace_activations: bool,
}

impl<'a> StepCtx<'a> {
    pub fn eval() -> StepCtx<'static> {
        StepCtx {
            mode: Mode::Eval,
            estimator: EstimatorConfig::ste(),
            mask: None,
            replace_activations: false,
        }
    }
}

const INIT_STREAM: u64 = 0x494e_4954;

fn he_uniform<T: Scalar>(seed: u64, name: &str, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let tag = rng::hash_str(name);
    (0..n)
        .map(|i| T::from_f64((2.0 * rng::uniform(seed, &[INIT_STREAM, tag, i as u64]) - 1.0) * bound))
        .collect()
}

/// Round a scaled channel count, never below 1.
fn scaled(ch: usize, width: f64) -> usize {
    ((ch as f64 * width).round() as usize).max(1)
}

struct Builder<T: Scalar> {
    params: Params<T>,
    sites: Vec<SiteCfg>,
    bn_count: usize,
    seed: u64,
    quant: QuantCfg,
}

impl<T: Scalar> Builder<T> {
    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let n = shape.iter().product();
        let data = he_uniform(self.seed, name, n, fan_in);
        self.params.add(format!("{name}.w"), data, shape, ParamKind::Weight)
    }

    fn specs(&self) -> Result<(QuantizerSpec, QuantizerSpec)> {
        let w_spec = if self.quant.bits_w == 32 {
            QuantizerSpec::bypass()
        } else {
            // the learnable-upper-bound clip cannot represent signed weights
            let clip = match self.quant.clip_family {
                ClipFamily::Pact => ClipFamily::Interval,
                other => other,
            };
            QuantizerSpec::new(self.quant.bits_w, clip, self.quant.round_family)?
        };
        let a_spec = if self.quant.bits_a == 32 {
            QuantizerSpec::bypass()
        } else {
            QuantizerSpec::new(self.quant.bits_a, self.quant.clip_family, RoundFamily::Activation)?
        };
        Ok((w_spec, a_spec))
    }

    /// Register a quantization site for layer `name` whose weights are
    /// parameter `w`.
    fn site(&mut self, name: &str, w: ParamId) -> Result<usize> {
        let (w_spec, a_spec) = self.specs()?;
        let w_alpha = match w_spec.alpha_count() {
            0 => None,
            n => {
                let alpha = quantizer::init_alpha(&w_spec, &self.params.entries[w].data, self.quant.pact_init_m)?;
                Some(self.params.add(format!("{name}.wq.alpha"), alpha, vec![n], ParamKind::Alpha))
            }
        };
        let a_alpha = match a_spec.alpha_count() {
            0 => None,
            n => {
                // placeholder span; interval quantizers calibrate on the
                // first training batch
                let alpha = match a_spec.clip {
                    ClipFamily::Pact => vec![T::from_f64(self.quant.pact_init_m)],
                    _ => vec![T::zero(), T::one()],
                };
                Some(self.params.add(format!("{name}.aq.alpha"), alpha, vec![n], ParamKind::Alpha))
            }
        };
        self.sites.push(SiteCfg {
            layer_name: name.to_string(),
            w_spec,
            a_spec,
            w_alpha,
            a_alpha,
            w_param: w,
        });
        Ok(self.sites.len() - 1)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize, quantized: bool) -> Result<Layer> {
        let w = self.weight(name, vec![c_out, c_in, 3, 3], c_in * 9);
        let site = if quantized { Some(self.site(name, w)?) } else { None };
        Ok(Layer::Conv { name: name.to_string(), w, stride, pad: 1, site })
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, quantized: bool) -> Result<Layer> {
        let w = self.weight(name, vec![d_out, d_in], d_in);
        let b = self.params.add(format!("{name}.b"), vec![T::zero(); d_out], vec![d_out], ParamKind::Bias);
        let site = if quantized { Some(self.site(name, w)?) } else { None };
        Ok(Layer::Linear { name: name.to_string(), w, b, site })
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> Layer {
        let gamma = self.params.add(format!("{name}.gamma"), vec![T::one(); c], vec![c], ParamKind::Gamma);
        let beta = self.params.add(format!("{name}.beta"), vec![T::zero(); c], vec![c], ParamKind::Beta);
        let state = self.bn_count;
        self.bn_count += 1;
        Layer::BatchNorm { gamma, beta, state }
    }
}

/// Instantiate an architecture with seeded fan-in-scaled weights. The first
/// and last layers of every architecture are never quantized.
pub fn build_model<T: Scalar>(spec: &ModelSpec) -> Result<Model<T>> {
    if spec.width <= 0.0 {
        return Err(Error::Config(format!("width multiplier {} must be > 0", spec.width)));
    }
    if spec.classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let (c_in, h, w) = spec.input_shape;
    let mut b = Builder::<T> {
        params: Params::default(),
        sites: Vec::new(),
        bn_count: 0,
        seed: spec.seed,
        quant: spec.quant.clone(),
    };
    let mut layers = Vec::new();
    match spec.arch {
        ArchKind::Mlp => {
            let d_in = c_in * h * w;
            let h1 = scaled(256, spec.width);
            let h2 = scaled(128, spec.width);
            layers.push(Layer::Flatten);
            layers.push(b.linear("fc1", d_in, h1, false)?);
            layers.push(Layer::Relu);
            layers.push(b.linear("fc2", h1, h2, true)?);
            layers.push(Layer::Relu);
            layers.push(b.linear("head", h2, spec.classes, false)?);
        }
        ArchKind::SmallCnn => {
            let (c1, c2, c3) = (scaled(16, spec.width), scaled(32, spec.width), scaled(64, spec.width));
            layers.push(b.conv("conv1", c_in, c1, 1, false)?);
            layers.push(b.batch_norm("bn1", c1));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(b.conv("conv2", c1, c2, 1, true)?);
            layers.push(b.batch_norm("bn2", c2));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(b.conv("conv3", c2, c3, 1, true)?);
            layers.push(b.batch_norm("bn3", c3));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            let d = c3 * (h / 8).max(1) * (w / 8).max(1);
            layers.push(b.linear("head", d, spec.classes, false)?);
        }
        ArchKind::Resnet20Lite => {
            // ResNet-20 topology at a 0.25 base width; spec.width scales on
            // top of that (width 4.0 recovers the full-size network).
            let widths = [
                scaled(16, 0.25 * spec.width),
                scaled(32, 0.25 * spec.width),
                scaled(64, 0.25 * spec.width),
            ];
            layers.push(b.conv("stem", c_in, widths[0], 1, false)?);
            layers.push(b.batch_norm("stem_bn", widths[0]));
            layers.push(Layer::Relu);
            let mut prev = widths[0];
            for (s, &wd) in widths.iter().enumerate() {
                for blk in 0..3 {
                    let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                    let name = format!("s{}b{}", s + 1, blk + 1);
                    let body = vec![
                        b.conv(&format!("{name}.conv1"), prev, wd, stride, true)?,
                        b.batch_norm(&format!("{name}.bn1"), wd),
                        Layer::Relu,
                        b.conv(&format!("{name}.conv2"), wd, wd, 1, true)?,
                        b.batch_norm(&format!("{name}.bn2"), wd),
                    ];
                    let pad_channels = if stride == 2 || prev != wd { Some(wd) } else { None };
                    layers.push(Layer::Residual { body, pad_channels });
                    prev = wd;
                }
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(b.linear("head", prev, spec.classes, false)?);
        }
    }
    let bn_sizes: Vec<usize> = collect_bn_sizes(&layers, &b.params);
    let site_count = b.sites.len();
    Ok(Model {
        spec: spec.clone(),
        layers,
        sites: b.sites,
        params: b.params,
        bn_states: bn_sizes
            .into_iter()
            .map(|c| BnState { mean: vec![T::zero(); c], var: vec![T::one(); c] })
            .collect(),
        a_alpha_ready: vec![false; site_count],
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    })
}

fn collect_bn_sizes<T: Scalar>(layers: &[Layer], params: &Params<T>) -> Vec<usize> {
    let mut sizes = Vec::new();
    fn walk<T: Scalar>(layers: &[Layer], params: &Params<T>, out: &mut Vec<usize>) {
        for l in layers {
            match l {
                Layer::BatchNorm { gamma, state, .. } => {
                    if out.len() <= *state {
                        out.resize(*state + 1, 0);
                    }
                    out[*state] = params.entries[*gamma].data.len();
                }
                Layer::Residual { body, .. } => walk(body, params, out),
                _ => {}
            }
        }
    }
    walk(layers, params, &mut sizes);
    sizes
}

impl<T: Scalar> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Element count of each quantized layer's weight tensor, in site order
    /// (the shape list the replacement sampler needs).
    pub fn site_weight_sizes(&self) -> Vec<usize> {
        self.sites.iter().map(|s| self.params.entries[s.w_param].data.len()).collect()
    }

    pub fn has_quantized_sites(&self) -> bool {
        self.sites.iter().any(|s| !s.w_spec.bypass || !s.a_spec.bypass)
    }

    /// Run the model on a batch. TRAIN records gradients and applies the
    /// estimator hooks; EVAL runs the deterministic fully-quantized path
    /// (replacement mask forced to all-ones) and mutates nothing.
    pub fn forward_quantized(
        &mut self,
        g: &mut Graph<T>,
        images: &[f32],
        batch: usize,
        ctx: &StepCtx,
    ) -> Result<StepRun> {
        let (c, h, w) = self.spec.input_shape;
        if images.len() != batch * c * h * w {
            return Err(Error::dim("forward", format!("{} values for batch {batch}", images.len())));
        }
        let data: Vec<T> = images.iter().map(|&v| T::from_f32(v)).collect();
        let x = g.leaf(data, &[batch, c, h, w], false)?;
        let mut run = StepRun {
            logits: x,
            param_leaf: vec![None; self.params.entries.len()],
            sites: Vec::new(),
        };
        let Model { layers, sites, params, bn_states, a_alpha_ready, bn_momentum, bn_eps, .. } = self;
        let mut st = LayerState {
            sites,
            params,
            bn_states,
            a_alpha_ready,
            bn_momentum: *bn_momentum,
            bn_eps: *bn_eps,
        };
        let out = run_layers(layers, g, x, ctx, &mut st, &mut run)?;
        run.logits = out;
        Ok(run)
    }
}

struct LayerState<'m, T: Scalar> {
    sites: &'m [SiteCfg],
    params: &'m mut Params<T>,
    bn_states: &'m mut [BnState<T>],
    a_alpha_ready: &'m mut [bool],
    bn_momentum: f64,
    bn_eps: f64,
}

impl<'m, T: Scalar> LayerState<'m, T> {
    fn leaf(&self, g: &mut Graph<T>, ctx: &StepCtx, run: &mut StepRun, pid: ParamId) -> Result<TensorId> {
        if let Some(id) = run.param_leaf[pid] {
            return Ok(id);
        }
        let e = &self.params.entries[pid];
        let id = g.leaf(e.data.clone(), &e.shape, ctx.mode == Mode::Train)?;
        run.param_leaf[pid] = Some(id);
        Ok(id)
    }
}

fn run_layers<T: Scalar>(
    layers: &[Layer],
    g: &mut Graph<T>,
    mut x: TensorId,
    ctx: &StepCtx,
    st: &mut LayerState<T>,
    run: &mut StepRun,
) -> Result<TensorId> {
    for layer in layers {
        x = run_layer(layer, g, x, ctx, st, run)?;
    }
    Ok(x)
}

fn run_layer<T: Scalar>(
    layer: &Layer,
    g: &mut Graph<T>,
    x: TensorId,
    ctx: &StepCtx,
    st: &mut LayerState<T>,
    run: &mut StepRun,
) -> Result<TensorId> {
    match layer {
        Layer::Conv { w, stride, pad, site, .. } => {
            let (a_used, w_used) = quantized_operands(g, x, *w, *site, ctx, st, run)?;
            g.conv2d(a_used, w_used, *stride, *pad)
        }
        Layer::Linear { w, b, site, .. } => {
            let (a_used, w_used) = quantized_operands(g, x, *w, *site, ctx, st, run)?;
            let bias = st.leaf(g, ctx, run, *b)?;
            g.linear(a_used, w_used, bias)
        }
        Layer::BatchNorm { gamma, beta, state } => {
            let gm = st.leaf(g, ctx, run, *gamma)?;
            let bt = st.leaf(g, ctx, run, *beta)?;
            match ctx.mode {
                Mode::Train => {
                    let (out, mean, var) = g.batch_norm_train(x, gm, bt, st.bn_eps)?;
                    let s = &mut st.bn_states[*state];
                    let mom = T::from_f64(st.bn_momentum);
                    let keep = T::one() - mom;
                    for (r, b) in s.mean.iter_mut().zip(&mean) {
                        *r = keep * *r + mom * *b;
                    }
                    for (r, b) in s.var.iter_mut().zip(&var) {
                        *r = keep * *r + mom * *b;
                    }
                    Ok(out)
                }
                Mode::Eval => {
                    let s = &st.bn_states[*state];
                    g.batch_norm_eval(x, gm, bt, &s.mean, &s.var, st.bn_eps)
                }
            }
        }
        Layer::Relu => g.relu(x),
        Layer::MaxPool2 => g.max_pool2(x),
        Layer::GlobalAvgPool => g.global_avg_pool(x),
        Layer::Flatten => {
            let n = g.shape(x)[0];
            let d = g.numel(x) / n;
            g.reshape(x, &[n, d])
        }
        Layer::Residual { body, pad_channels } => {
            let branch = run_layers(body, g, x, ctx, st, run)?;
            let shortcut = match pad_channels {
                Some(out_c) => g.downsample_pad(x, *out_c)?,
                None => x,
            };
            let sum = g.add(branch, shortcut)?;
            g.relu(sum)
        }
    }
}

/// Quantize the layer input and weights according to the layer's site
/// config, honoring the replacement mask in TRAIN mode.
fn quantized_operands<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: ParamId,
    site: Option<usize>,
    ctx: &StepCtx,
    st: &mut LayerState<T>,
    run: &mut StepRun,
) -> Result<(TensorId, TensorId)> {
    let w_leaf = st.leaf(g, ctx, run, w)?;
    let Some(site_idx) = site else {
        return Ok((x, w_leaf));
    };
    let cfg = &st.sites[site_idx];

    // activations first: calibrate interval bounds on the first train batch
    let a_used = if cfg.a_spec.bypass {
        x
    } else {
        if let Some(aid) = cfg.a_alpha {
            if !st.a_alpha_ready[site_idx] && ctx.mode == Mode::Train {
                if cfg.a_spec.clip == ClipFamily::Interval {
                    let alpha = quantizer::init_alpha(&cfg.a_spec, g.data(x), 0.0)?;
                    st.params.entries[aid].data = alpha;
                }
                st.a_alpha_ready[site_idx] = true;
            }
        }
        let mask = if ctx.mode == Mode::Train && ctx.replace_activations {
            ctx.mask.map(|m| m.layer_mask(site_idx))
        } else {
            None
        };
        let (a_cn, a_q) = quantize_node(g, x, &cfg.a_spec, cfg.a_alpha, ctx, st, run, mask.clone())?;
        run.sites.push(SiteRecord {
            site: site_idx,
            role: SiteRole::Activation,
            x_cn: a_cn,
            x_q: a_q,
            disc_err: disc_err(g, a_cn, cfg.a_spec.bits),
        });
        match mask {
            Some(m) => mix_node(g, x, a_q, m)?,
            None => a_q,
        }
    };

    let w_used = if cfg.w_spec.bypass {
        w_leaf
    } else {
        let mask = match (ctx.mode, ctx.mask) {
            (Mode::Train, Some(m)) => m.layer_mask(site_idx),
            _ => vec![true],
        };
        let active = if ctx.mode == Mode::Train { Some(mask.clone()) } else { None };
        let (w_cn, w_q) = quantize_node(g, w_leaf, &cfg.w_spec, cfg.w_alpha, ctx, st, run, active)?;
        run.sites.push(SiteRecord {
            site: site_idx,
            role: SiteRole::Weight,
            x_cn: w_cn,
            x_q: w_q,
            disc_err: disc_err(g, w_cn, cfg.w_spec.bits),
        });
        if ctx.mode == Mode::Train {
            mix_node(g, w_leaf, w_q, mask)?
        } else {
            w_q
        }
    };
    Ok((a_used, w_used))
}

fn disc_err<T: Scalar>(g: &Graph<T>, x_cn: TensorId, bits: u8) -> f64 {
    let cn = g.data(x_cn);
    let qn = quantizer::round_norm(cn, bits);
    let total: f64 = cn.iter().zip(&qn).map(|(&c, &q)| (c - q).as_f64().abs()).sum();
    total / cn.len().max(1) as f64
}

/// Two tape nodes per quantizer: a normalized clip node and a rounding node
/// whose backward applies the configured estimator and routes
/// straight-through gradients to the clip parameters.
#[allow(clippy::too_many_arguments)]
fn quantize_node<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    spec: &QuantizerSpec,
    alpha_pid: Option<ParamId>,
    ctx: &StepCtx,
    st: &mut LayerState<T>,
    run: &mut StepRun,
    active: Option<Vec<bool>>,
) -> Result<(TensorId, TensorId)> {
    debug_assert!(!spec.bypass);
    let alpha_leaf = match alpha_pid {
        Some(pid) => Some(st.leaf(g, ctx, run, pid)?),
        None => None,
    };
    let alpha: Vec<T> = match alpha_leaf {
        Some(id) => g.data(id).to_vec(),
        None => Vec::new(),
    };
    let xv = g.data(x).to_vec();
    let spec = *spec;

    // clip node: x -> x_cn in [0,1]
    let cn_data = quantizer::clip_norm(&xv, &spec, &alpha)?;
    let slope = quantizer::clip_input_slope(&xv, &spec, &alpha);
    let x_cn = g.custom_op(&[x], cn_data.clone(), g.shape(x).to_vec(), "clip_norm", move |up| {
        vec![up.iter().zip(&slope).map(|(&u, &s)| u * s).collect()]
    })?;

    // round node: x_cn -> x_q, estimator fires here on the way back
    let q_n = quantizer::round_norm(&cn_data, spec.bits);
    let (scale, offset) = quantizer::denorm_affine(&spec, &alpha);
    let xq_data: Vec<T> = q_n.iter().map(|&q| scale * q + offset).collect();
    let est = ctx.estimator;
    let parents: Vec<TensorId> = match alpha_leaf {
        Some(aid) => vec![x_cn, aid],
        None => vec![x_cn],
    };
    let has_alpha = alpha_leaf.is_some();
    let alpha_scale = match spec.clip {
        // straight-through map for the learnable bound already includes the
        // denormalization, so upstream passes through unscaled
        ClipFamily::Pact => T::one(),
        _ => scale,
    };
    let shape = g.shape(x_cn).to_vec();
    let x_q = g.custom_op(&parents, xq_data, shape, "round_quant", move |up| {
        let g_qn: Vec<T> = up.iter().map(|&u| u * scale).collect();
        let g_cn = estimators::apply(&est, &g_qn, &cn_data, &q_n, active.as_deref())
            .expect("estimator shapes fixed at construction");
        let mut out = vec![g_cn];
        if has_alpha {
            let scaled_up: Vec<T> = up.iter().map(|&u| u * alpha_scale).collect();
            let ga = quantizer::clip_param_grad(&xv, &spec, &alpha, &scaled_up)
                .expect("alpha shapes fixed at construction");
            out.push(ga);
        }
        out
    })?;
    Ok((x_cn, x_q))
}

/// Selection node between full-precision and quantized values.
fn mix_node<T: Scalar>(g: &mut Graph<T>, w_f: TensorId, w_q: TensorId, mask: Vec<bool>) -> Result<TensorId> {
    let data = mix_precision(g.data(w_f), g.data(w_q), &mask)?;
    let shape = g.shape(w_f).to_vec();
    let n = data.len();
    let is_on = move |mask: &[bool], i: usize| -> bool {
        if mask.len() == 1 {
            mask[0]
        } else {
            mask[i]
        }
    };
    g.custom_op(&[w_f, w_q], data, shape, "mix_precision", move |up| {
        let mut g_f = vec![T::zero(); n];
        let mut g_q = vec![T::zero(); n];
        for (i, &u) in up.iter().enumerate() {
            if is_on(&mask, i) {
                g_q[i] = u;
            } else {
                g_f[i] = u;
            }
        }
        vec![g_f, g_q]
    })
}

/// Fully-quantized deterministic evaluation: top-1 accuracy in percent.
/// Argmax ties break toward the lowest class index.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &crate::data::Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("evaluate on an empty dataset".into()));
    }
    let numel = data.image_numel();
    let mut correct = 0usize;
    let mut i = 0usize;
    while i < data.len() {
        let n = batch.min(data.len() - i);
        let images = &data.images[i * numel..(i + n) * numel];
        let mut g = Graph::<T>::new();
        let run = model.forward_quantized(&mut g, images, n, &StepCtx::eval())?;
        let logits = g.data(run.logits);
        let classes = g.shape(run.logits)[1];
        for r in 0..n {
            let row = &logits[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == data.labels[i + r] as usize {
                correct += 1;
            }
        }
        i += n;
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}
