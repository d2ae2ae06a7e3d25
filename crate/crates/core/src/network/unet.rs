//! Residual U-net with one side-output head per decoder stage and a learned fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, BatchNormCache, ConvSpec};
use super::params::{
    init_from_layout, Gradients, ParamKind, ParamSpec, ParamStore, RunningStatUpdate,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input_channels: usize,
    /// Feature channels of each encoder stage; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub classes: usize,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            channels: vec![16, 32, 64, 128],
            bottleneck_channels: 256,
            classes: 5,
            dropout: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetConfig {
    /// Two-stage, four-channel network used for gradient checks.
    pub fn micro() -> Self {
        Self {
            channels: vec![4, 8],
            bottleneck_channels: 16,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.channels.is_empty() || self.bottleneck_channels == 0 {
            return Err(Error::Config(
                "network needs input channels, at least one stage and a bottleneck".into(),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config(
                "stage channel counts must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config("network needs at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(
                "invalid batch-norm epsilon or momentum".into(),
            ));
        }
        Ok(())
    }
}

/// Forward-pass mode. Training uses batch statistics and draws dropout masks
/// from a generator seeded with `dropout_seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Side-output and fused class-probability maps, each `(batch, classes, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputSet<T = f32> {
    /// Ordered from the deepest decoder stage to the full-resolution one.
    pub sides: Vec<Tensor<T>>,
    pub fused: Tensor<T>,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn add(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> usize {
        self.specs.push(ParamSpec {
            name,
            kind,
            shape: shape.to_vec(),
        });
        self.specs.len() - 1
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, spec: ConvSpec) -> ConvBn {
        ConvBn {
            weight: self.add(
                format!("{prefix}.conv.weight"),
                ParamKind::ConvWeight,
                &[cout, cin, 3, 3],
            ),
            scale: self.add(format!("{prefix}.bn.scale"), ParamKind::BnScale, &[cout]),
            shift: self.add(format!("{prefix}.bn.shift"), ParamKind::BnShift, &[cout]),
            mean: self.add(
                format!("{prefix}.bn.running_mean"),
                ParamKind::BnRunningMean,
                &[cout],
            ),
            var: self.add(
                format!("{prefix}.bn.running_var"),
                ParamKind::BnRunningVar,
                &[cout],
            ),
            spec,
        }
    }

    fn res_unit(&mut self, prefix: &str, cin: usize, cout: usize) -> ResUnit {
        let a = self.conv_bn(&format!("{prefix}.unit_a"), cin, cout, ConvSpec::SAME3);
        let b = self.conv_bn(&format!("{prefix}.unit_b"), cout, cout, ConvSpec::SAME3);
        let proj = (cin != cout).then(|| Pointwise {
            weight: self.add(
                format!("{prefix}.proj.weight"),
                ParamKind::ConvWeight,
                &[cout, cin, 1, 1],
            ),
            bias: self.add(format!("{prefix}.proj.bias"), ParamKind::Bias, &[cout]),
        });
        ResUnit { a, b, proj }
    }
}

/// 3x3 convolution followed by batch normalization (ReLU applied by the caller).
#[derive(Clone, Debug)]
struct ConvBn {
    weight: usize,
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
    spec: ConvSpec,
}

#[derive(Clone, Debug)]
struct Pointwise {
    weight: usize,
    bias: usize,
}

/// Two conv-BN-ReLU units with an additive skip before the last ReLU.
#[derive(Clone, Debug)]
struct ResUnit {
    a: ConvBn,
    b: ConvBn,
    proj: Option<Pointwise>,
}

#[derive(Clone, Debug)]
struct DownStage {
    res: ResUnit,
    down: ConvBn,
}

#[derive(Clone, Debug)]
struct UpStage {
    deconv_weight: usize,
    deconv_bias: usize,
    res: ResUnit,
    side: Pointwise,
    factor: usize,
}

struct Ctx<'a, T> {
    store: &'a ParamStore<T>,
    cfg: &'a NetConfig,
    rng: Option<ChaCha8Rng>,
    stats: Vec<RunningStatUpdate>,
}

#[derive(Clone, Debug)]
struct ConvBnCache<T> {
    input: Tensor<T>,
    bn: Option<BatchNormCache<T>>,
}

#[derive(Clone, Debug)]
struct ResCache<T> {
    input: Tensor<T>,
    a: ConvBnCache<T>,
    a_out: Tensor<T>,
    b: ConvBnCache<T>,
    out: Tensor<T>,
    mask: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct DownCache<T> {
    res: ResCache<T>,
    down: ConvBnCache<T>,
    down_out: Tensor<T>,
}

#[derive(Clone, Debug)]
struct UpCache<T> {
    input: Tensor<T>,
    skip_channels: usize,
    res: ResCache<T>,
}

/// Everything a training-mode forward pass saves for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    down: Vec<DownCache<T>>,
    bottleneck: ResCache<T>,
    up: Vec<UpCache<T>>,
    fuse_input: Tensor<T>,
    side_logits: Vec<Tensor<T>>,
    fused_logits: Tensor<T>,
    train: bool,
    stats: Vec<RunningStatUpdate>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Upsampled pre-softmax side logits, one per decoder stage.
    pub fn side_logits(&self) -> &[Tensor<T>] {
        &self.side_logits
    }

    pub fn fused_logits(&self) -> &Tensor<T> {
        &self.fused_logits
    }

    /// Sign pattern of every ReLU output, in forward order.
    ///
    /// Two parameter settings with equal patterns lie in the same linear
    /// region of every rectifier, so the loss is smooth between them.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        let mut push = |t: &Tensor<T>| pattern.extend(t.data().iter().map(|&v| v > T::zero()));
        for d in &self.down {
            push(&d.res.a_out);
            push(&d.res.out);
            push(&d.down_out);
        }
        push(&self.bottleneck.a_out);
        push(&self.bottleneck.out);
        for u in &self.up {
            push(&u.res.a_out);
            push(&u.res.out);
        }
        pattern
    }

    /// Batch statistics to fold into the running buffers after a training step.
    pub fn running_stats(&self) -> &[RunningStatUpdate] {
        &self.stats
    }
}

/// The network graph: parameter ids wired into stages.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: NetConfig,
    layout: Vec<ParamSpec>,
    down: Vec<DownStage>,
    bottleneck: ResUnit,
    up: Vec<UpStage>,
    fuse: Pointwise,
}

impl UNet {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout { specs: Vec::new() };
        let stages = cfg.stages();
        let mut down = Vec::with_capacity(stages);
        let mut cin = cfg.input_channels;
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let next = cfg
                .channels
                .get(i + 1)
                .copied()
                .unwrap_or(cfg.bottleneck_channels);
            let res = layout.res_unit(&format!("enc{i}.res"), cin, ch);
            let down_conv = layout.conv_bn(&format!("enc{i}.down"), ch, next, ConvSpec::DOWN3);
            down.push(DownStage {
                res,
                down: down_conv,
            });
            cin = next;
        }
        let bottleneck = layout.res_unit("bottleneck.res", cin, cfg.bottleneck_channels);
        let mut up = Vec::with_capacity(stages);
        let mut below = cfg.bottleneck_channels;
        for i in (0..stages).rev() {
            let ch = cfg.channels[i];
            let deconv_weight = layout.add(
                format!("dec{i}.up.weight"),
                ParamKind::DeconvWeight,
                &[below, ch, 2, 2],
            );
            let deconv_bias = layout.add(format!("dec{i}.up.bias"), ParamKind::Bias, &[ch]);
            let res = layout.res_unit(&format!("dec{i}.res"), 2 * ch, ch);
            let side = Pointwise {
                weight: layout.add(
                    format!("side{i}.weight"),
                    ParamKind::ConvWeight,
                    &[cfg.classes, ch, 1, 1],
                ),
                bias: layout.add(format!("side{i}.bias"), ParamKind::Bias, &[cfg.classes]),
            };
            up.push(UpStage {
                deconv_weight,
                deconv_bias,
                res,
                side,
                factor: 1 << i,
            });
            below = ch;
        }
        let fuse = Pointwise {
            weight: layout.add(
                "fuse.weight".into(),
                ParamKind::ConvWeight,
                &[cfg.classes, stages * cfg.classes, 1, 1],
            ),
            bias: layout.add("fuse.bias".into(), ParamKind::Bias, &[cfg.classes]),
        };
        Ok(Self {
            cfg: cfg.clone(),
            layout: layout.specs,
            down,
            bottleneck,
            up,
            fuse,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>> {
        init_from_layout(&self.layout, seed)
    }

    /// Checks that `store` holds exactly this network's tensors, in order.
    pub fn check_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "parameter store has {} tensors, network expects {}",
                store.len(),
                self.layout.len()
            )));
        }
        for (spec, entry) in self.layout.iter().zip(store.entries()) {
            if spec.name != entry.name || spec.shape != entry.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Forward pass; returns probabilities and the cache for [`UNet::backward`].
    pub fn forward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        store: &ParamStore<T>,
        mode: Mode,
    ) -> Result<(SideOutputSet<T>, ForwardCache<T>)> {
        self.check_store(store)?;
        let (_, c, h, w) = x.dims4()?;
        let m = self.cfg.size_multiple();
        if c != self.cfg.input_channels || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "network input {:?} needs {} channel(s) and spatial sizes divisible by {m}",
                x.shape(),
                self.cfg.input_channels
            )));
        }
        let mut ctx = Ctx {
            store,
            cfg: &self.cfg,
            rng: match mode {
                Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
                Mode::Eval => None,
            },
            stats: Vec::new(),
        };

        let mut down_caches = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for stage in &self.down {
            let res = res_forward(&stage.res, h, &mut ctx)?;
            let (down_out, down) = conv_bn_forward(&stage.down, &res.out, &mut ctx, true)?;
            h = down_out.clone();
            down_caches.push(DownCache {
                res,
                down,
                down_out,
            });
        }
        let bottleneck = res_forward(&self.bottleneck, h, &mut ctx)?;
        let mut h = bottleneck.out.clone();

        let mut up_caches = Vec::with_capacity(self.up.len());
        let mut side_logits = Vec::with_capacity(self.up.len());
        for (stage, skip_cache) in self.up.iter().zip(down_caches.iter().rev()) {
            let input = h;
            let up = ops::deconv2d(
                &input,
                store.value(stage.deconv_weight),
                Some(store.value(stage.deconv_bias)),
                2,
            )?;
            let skip = &skip_cache.res.out;
            let cat = ops::concat_channels(&[&up, skip])?;
            let res = res_forward(&stage.res, cat, &mut ctx)?;
            h = res.out.clone();
            let logits = ops::conv2d(
                &h,
                store.value(stage.side.weight),
                Some(store.value(stage.side.bias)),
                ConvSpec::POINTWISE,
            )?;
            side_logits.push(ops::upsample_bilinear(&logits, stage.factor)?);
            up_caches.push(UpCache {
                input,
                skip_channels: skip.shape()[1],
                res,
            });
        }

        let side_refs: Vec<&Tensor<T>> = side_logits.iter().collect();
        let fuse_input = ops::concat_channels(&side_refs)?;
        let fused_logits = ops::conv2d(
            &fuse_input,
            store.value(self.fuse.weight),
            Some(store.value(self.fuse.bias)),
            ConvSpec::POINTWISE,
        )?;
        let outputs = SideOutputSet {
            sides: side_logits
                .iter()
                .map(ops::softmax_channels)
                .collect::<Result<_>>()?,
            fused: ops::softmax_channels(&fused_logits)?,
        };
        let cache = ForwardCache {
            down: down_caches,
            bottleneck,
            up: up_caches,
            fuse_input,
            side_logits,
            fused_logits,
            train: matches!(mode, Mode::Train { .. }),
            stats: ctx.stats,
        };
        Ok((outputs, cache))
    }

    /// Gradients of a loss given its derivatives with respect to the upsampled
    /// side logits and the fused logits.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &ForwardCache<T>,
        grad_side_logits: &[Tensor<T>],
        grad_fused_logits: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        if !cache.train {
            return Err(Error::Argument(
                "backward needs a training-mode forward pass".into(),
            ));
        }
        if grad_side_logits.len() != self.up.len() {
            return Err(Error::Shape(format!(
                "expected {} side gradients, got {}",
                self.up.len(),
                grad_side_logits.len()
            )));
        }
        let mut grads = Gradients::zeros_like(store);
        let fuse = ops::conv2d_backward(
            &cache.fuse_input,
            store.value(self.fuse.weight),
            grad_fused_logits,
            ConvSpec::POINTWISE,
        )?;
        grads.accumulate(self.fuse.weight, &fuse.kernel)?;
        grads.accumulate(self.fuse.bias, &fuse.bias)?;
        let sizes = vec![self.cfg.classes; self.up.len()];
        let mut d_sides = ops::split_channels(&fuse.input, &sizes)?;
        for (d, g) in d_sides.iter_mut().zip(grad_side_logits) {
            d.add_assign(g)?;
        }

        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; self.down.len()];
        let mut d_h: Option<Tensor<T>> = None;
        for (j, (stage, up_cache)) in self.up.iter().zip(&cache.up).enumerate().rev() {
            let d_logits = ops::upsample_bilinear_backward(&d_sides[j], stage.factor)?;
            let side = ops::conv2d_backward(
                &up_cache.res.out,
                store.value(stage.side.weight),
                &d_logits,
                ConvSpec::POINTWISE,
            )?;
            grads.accumulate(stage.side.weight, &side.kernel)?;
            grads.accumulate(stage.side.bias, &side.bias)?;
            let mut d_out = side.input;
            if let Some(d) = d_h.take() {
                d_out.add_assign(&d)?;
            }
            let d_cat = res_backward(&stage.res, &up_cache.res, &d_out, store, &mut grads)?;
            let skip_ch = up_cache.skip_channels;
            let up_ch = d_cat.shape()[1] - skip_ch;
            let mut parts = ops::split_channels(&d_cat, &[up_ch, skip_ch])?;
            let d_skip = parts.pop().expect("two parts");
            let d_up = parts.pop().expect("two parts");
            skip_grads[self.down.len() - 1 - j] = Some(d_skip);
            let dec = ops::deconv2d_backward(
                &up_cache.input,
                store.value(stage.deconv_weight),
                &d_up,
                2,
            )?;
            grads.accumulate(stage.deconv_weight, &dec.kernel)?;
            grads.accumulate(stage.deconv_bias, &dec.bias)?;
            d_h = Some(dec.input);
        }

        let d_bottleneck = d_h.expect("at least one decoder stage");
        let mut d_h = res_backward(
            &self.bottleneck,
            &cache.bottleneck,
            &d_bottleneck,
            store,
            &mut grads,
        )?;
        for (i, (stage, down_cache)) in self.down.iter().zip(&cache.down).enumerate().rev() {
            let d_pre = ops::relu_backward(&down_cache.down_out, &d_h);
            let mut d_feat =
                conv_bn_backward(&stage.down, &down_cache.down, &d_pre, store, &mut grads)?;
            if let Some(d_skip) = &skip_grads[i] {
                d_feat.add_assign(d_skip)?;
            }
            d_h = res_backward(&stage.res, &down_cache.res, &d_feat, store, &mut grads)?;
        }
        Ok(grads)
    }
}

fn conv_bn_forward<T: Scalar>(
    layer: &ConvBn,
    x: &Tensor<T>,
    ctx: &mut Ctx<'_, T>,
    apply_relu: bool,
) -> Result<(Tensor<T>, ConvBnCache<T>)> {
    let store = ctx.store;
    let conv = ops::conv2d(x, store.value(layer.weight), None, layer.spec)?;
    let (normed, bn) = if ctx.rng.is_some() {
        let (y, cache) = ops::batch_norm_train(
            &conv,
            store.value(layer.scale),
            store.value(layer.shift),
            ctx.cfg.bn_eps,
        )?;
        ctx.stats.push(RunningStatUpdate {
            mean_id: layer.mean,
            var_id: layer.var,
            mean: cache.batch_mean.clone(),
            var: cache.batch_var_unbiased.clone(),
        });
        (y, Some(cache))
    } else {
        let y = ops::batch_norm_eval(
            &conv,
            store.value(layer.scale),
            store.value(layer.shift),
            store.value(layer.mean),
            store.value(layer.var),
            ctx.cfg.bn_eps,
        )?;
        (y, None)
    };
    let out = if apply_relu {
        ops::relu(&normed)
    } else {
        normed
    };
    Ok((
        out,
        ConvBnCache {
            input: x.clone(),
            bn,
        },
    ))
}

/// Gradient w.r.t. the conv input, given the gradient w.r.t. the BN output.
fn conv_bn_backward<T: Scalar>(
    layer: &ConvBn,
    cache: &ConvBnCache<T>,
    grad_bn_out: &Tensor<T>,
    store: &ParamStore<T>,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    let bn = cache
        .bn
        .as_ref()
        .ok_or_else(|| Error::Argument("batch-norm cache missing".into()))?;
    let (d_conv, d_scale, d_shift) =
        ops::batch_norm_backward(grad_bn_out, store.value(layer.scale), bn)?;
    grads.accumulate(layer.scale, &d_scale)?;
    grads.accumulate(layer.shift, &d_shift)?;
    let g = ops::conv2d_backward(&cache.input, store.value(layer.weight), &d_conv, layer.spec)?;
    grads.accumulate(layer.weight, &g.kernel)?;
    Ok(g.input)
}

fn res_forward<T: Scalar>(
    unit: &ResUnit,
    x: Tensor<T>,
    ctx: &mut Ctx<'_, T>,
) -> Result<ResCache<T>> {
    let (a_out, a) = conv_bn_forward(&unit.a, &x, ctx, true)?;
    let (b_out, b) = conv_bn_forward(&unit.b, &a_out, ctx, false)?;
    let skip = match &unit.proj {
        Some(p) => ops::conv2d(
            &x,
            ctx.store.value(p.weight),
            Some(ctx.store.value(p.bias)),
            ConvSpec::POINTWISE,
        )?,
        None => x.clone(),
    };
    let pre = ops::add(&b_out, &skip)?;
    let mut out = ops::relu(&pre);
    let rate = ctx.cfg.dropout;
    let mask = match ctx.rng.as_mut() {
        Some(rng) if rate > 0.0 => {
            let mask = ops::dropout_mask(out.shape(), rate, rng);
            out = ops::mul_elementwise(&out, &mask)?;
            Some(mask)
        }
        _ => None,
    };
    Ok(ResCache {
        input: x,
        a,
        a_out,
        b,
        out,
        mask,
    })
}

fn res_backward<T: Scalar>(
    unit: &ResUnit,
    cache: &ResCache<T>,
    grad_out: &Tensor<T>,
    store: &ParamStore<T>,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    let d_relu = match &cache.mask {
        Some(mask) => ops::mul_elementwise(grad_out, mask)?,
        None => grad_out.clone(),
    };
    // The stored output is post-dropout; a dropped unit has zero gradient either way.
    let d_pre = ops::relu_backward(&cache.out, &d_relu);
    let d_a_out = conv_bn_backward(&unit.b, &cache.b, &d_pre, store, grads)?;
    let d_a_bn = ops::relu_backward(&cache.a_out, &d_a_out);
    let mut d_x = conv_bn_backward(&unit.a, &cache.a, &d_a_bn, store, grads)?;
    match &unit.proj {
        Some(p) => {
            let g = ops::conv2d_backward(
                &cache.input,
                store.value(p.weight),
                &d_pre,
                ConvSpec::POINTWISE,
            )?;
            grads.accumulate(p.weight, &g.kernel)?;
            grads.accumulate(p.bias, &g.bias)?;
            d_x.add_assign(&g.input)?;
        }
        None => d_x.add_assign(&d_pre)?,
    }
    Ok(d_x)
}

/// Builds the default parameter store for `cfg`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore<f32>> {
    UNet::new(cfg)?.init_params(seed)
}
