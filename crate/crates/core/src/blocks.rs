//! Interchangeable feature-transform blocks: plain convolution, parallel
//! large-kernel convolution, shifted-window attention and a bidirectional
//! selective state-space block.
//!
//! Attention and state-space blocks work on tokens: the `[C, nz, ny, nx]`
//! grid is flattened in raster order (x fastest) to `[L, C]`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{
    self as ag, add, concat0, conv3d, depthwise_causal_conv1d, exp, gather, gelu, instance_norm,
    layer_norm, leaky_relu, linear, mul, neg, scale, selective_scan, silu, slice_cols, softplus,
    transpose2d, window_attention, ScanInputs, Var, WindowAttentionLayout,
};
use crate::error::{Error, Result};
use crate::grid::FeatureMap;
use crate::nn::{Ctx, Init, ParamBuilder, ParamId, ParamStore};
use crate::tensor::Dims3;

pub const IN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv,
    LargeKernel,
    WindowedAttention,
    SelectiveSsm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    LeakyRelu,
    Gelu,
    Identity,
}

impl Act {
    pub fn apply(self, x: &Var) -> Var {
        match self {
            Act::LeakyRelu => leaky_relu(x, LEAKY_SLOPE),
            Act::Gelu => gelu(x),
            Act::Identity => x.clone(),
        }
    }
}

/// Declarative block description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Convolution kernel (conv kind).
    pub kernel_size: usize,
    /// Largest parallel branch (large-kernel kind).
    pub largest_kernel: usize,
    pub window_size: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// State size per channel (state-space kind).
    pub state_dim: usize,
    pub expand: usize,
    pub scan_conv: usize,
    pub bidirectional: bool,
    pub norm: Norm,
    pub act: Act,
}

impl BlockConfig {
    fn base(kind: BlockKind, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            kind,
            in_channels: cin,
            out_channels: cout,
            stride,
            kernel_size: 3,
            largest_kernel: 5,
            window_size: 4,
            heads: 1,
            mlp_ratio: 4,
            state_dim: 16,
            expand: 2,
            scan_conv: 4,
            bidirectional: true,
            norm: Norm::Instance,
            act: Act::LeakyRelu,
        }
    }

    pub fn conv(cin: usize, cout: usize, stride: usize) -> Self {
        Self::base(BlockKind::Conv, cin, cout, stride)
    }

    pub fn large_kernel(cin: usize, cout: usize, stride: usize) -> Self {
        Self::base(BlockKind::LargeKernel, cin, cout, stride)
    }

    pub fn attention(channels: usize, heads: usize) -> Self {
        Self {
            heads,
            act: Act::Gelu,
            norm: Norm::None,
            ..Self::base(BlockKind::WindowedAttention, channels, channels, 1)
        }
    }

    pub fn ssm(channels: usize) -> Self {
        Self {
            act: Act::Gelu,
            norm: Norm::None,
            ..Self::base(BlockKind::SelectiveSsm, channels, channels, 1)
        }
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_act(mut self, act: Act) -> Self {
        self.act = act;
        self
    }

    /// Rank of the step-size projection.
    pub fn dt_rank(&self) -> usize {
        self.in_channels.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("block channels must be at least 1"));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        match self.kind {
            BlockKind::Conv if self.kernel_size == 0 => {
                return Err(Error::config("kernel size must be positive"));
            }
            BlockKind::LargeKernel if self.largest_kernel < 3 || self.largest_kernel % 2 == 0 => {
                return Err(Error::config("largest kernel must be odd and at least 3"));
            }
            BlockKind::WindowedAttention | BlockKind::SelectiveSsm => {
                if self.stride != 1 {
                    return Err(Error::config("attention and state-space blocks are stride 1 only"));
                }
                if self.in_channels != self.out_channels {
                    return Err(Error::config("attention and state-space blocks keep the channel count"));
                }
                if self.kind == BlockKind::WindowedAttention
                    && (self.heads == 0 || self.in_channels % self.heads != 0 || self.window_size == 0)
                {
                    return Err(Error::config(format!(
                        "{} channels cannot be split into {} heads",
                        self.in_channels, self.heads
                    )));
                }
                if self.kind == BlockKind::SelectiveSsm && (self.state_dim == 0 || self.expand == 0) {
                    return Err(Error::config("state dimension and expansion must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Kaiming-uniform style bound used by default layer initializers.
fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Convolution weights and bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    pub fn build(pb: &mut ParamBuilder, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let bound = fan_in_bound(cin * k * k * k);
        let w = pb.param("weight", &[cout, cin, k, k, k], Init::Uniform(bound));
        let b = bias.then(|| pb.param("bias", &[cout], Init::Uniform(bound)));
        Self { w, b, stride }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        conv3d(x, ctx.p(self.w), self.b.map(|b| ctx.p(b)), self.stride)
    }
}

/// Dense layer on `[L, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn build(pb: &mut ParamBuilder, cin: usize, cout: usize, bias: bool, init: Init) -> Self {
        let w = pb.param("weight", &[cout, cin], init);
        let b = bias.then(|| pb.param("bias", &[cout], Init::Zeros));
        Self { w, b }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        linear(x, ctx.p(self.w), self.b.map(|b| ctx.p(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn build(pb: &mut ParamBuilder, c: usize) -> Self {
        Self {
            gamma: pb.param("weight", &[c], Init::Ones),
            beta: pb.param("bias", &[c], Init::Zeros),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), LN_EPS)
    }
}

fn normalize(norm: Norm, x: &Var) -> Var {
    match norm {
        Norm::Instance => instance_norm(x, IN_EPS),
        Norm::None => x.clone(),
    }
}

/// `[C, nz, ny, nx]` grid to `[L, C]` tokens.
pub fn to_tokens(x: &Var) -> Var {
    let c = x.shape()[0];
    transpose2d(&ag::reshape(x, &[c, x.value().len() / c]))
}

/// `[L, C]` tokens back to a grid.
pub fn from_tokens(t: &Var, d: Dims3) -> Var {
    let c = t.shape()[1];
    ag::reshape(&transpose2d(t), &d.shape_with_channels(c))
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub cfg: BlockConfig,
    pub conv: Conv,
}

#[derive(Clone, Debug)]
pub struct LargeKernelBlock {
    pub cfg: BlockConfig,
    pub branches: Vec<Conv>,
}

/// One attention sub-layer (pre-norm attention and MLP, both residual).
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub shift: bool,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub table: ParamId,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub cfg: BlockConfig,
    pub layers: [AttentionLayer; 2],
}

#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub cfg: BlockConfig,
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out_proj: Linear,
}

/// A built block of any kind.
#[derive(Clone, Debug)]
pub enum Block {
    Conv(ConvBlock),
    LargeKernel(LargeKernelBlock),
    Attention(AttentionBlock),
    Ssm(SsmBlock),
}

impl Block {
    pub fn build(pb: &mut ParamBuilder, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.clone();
        Ok(match cfg.kind {
            BlockKind::Conv => Block::Conv(ConvBlock {
                conv: Conv::build(pb, cfg.in_channels, cfg.out_channels, cfg.kernel_size, cfg.stride, true),
                cfg: c,
            }),
            BlockKind::LargeKernel => {
                let branches = (0..=cfg.largest_kernel / 2)
                    .rev()
                    .map(|h| {
                        let k = 2 * h + 1;
                        Conv::build(&mut pb.sub(format!("k{k}")), cfg.in_channels, cfg.out_channels, k, cfg.stride, true)
                    })
                    .collect();
                Block::LargeKernel(LargeKernelBlock { cfg: c, branches })
            }
            BlockKind::WindowedAttention => {
                let layer = |pb: &mut ParamBuilder, shift: bool| build_attention_layer(pb, cfg, shift);
                let l0 = layer(&mut pb.sub("w"), false);
                let l1 = layer(&mut pb.sub("sw"), true);
                Block::Attention(AttentionBlock { cfg: c, layers: [l0, l1] })
            }
            BlockKind::SelectiveSsm => Block::Ssm(build_ssm(pb, cfg)),
        })
    }

    pub fn config(&self) -> &BlockConfig {
        match self {
            Block::Conv(b) => &b.cfg,
            Block::LargeKernel(b) => &b.cfg,
            Block::Attention(b) => &b.cfg,
            Block::Ssm(b) => &b.cfg,
        }
    }

    /// Apply to a `[C, nz, ny, nx]` graph value.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        debug_assert_eq!(x.shape()[0], self.config().in_channels);
        match self {
            Block::Conv(b) => b.cfg.act.apply(&normalize(b.cfg.norm, &b.conv.forward(ctx, x))),
            Block::LargeKernel(b) => {
                let mut s = b.branches[0].forward(ctx, x);
                for br in &b.branches[1..] {
                    s = add(&s, &br.forward(ctx, x));
                }
                let mut s = normalize(b.cfg.norm, &s);
                if b.cfg.in_channels == b.cfg.out_channels && b.cfg.stride == 1 {
                    s = add(&s, x);
                }
                b.cfg.act.apply(&s)
            }
            Block::Attention(b) => {
                let d = x.value().dims3().expect("grid input");
                let mut t = to_tokens(x);
                for l in &b.layers {
                    t = attention_layer_forward(ctx, l, &b.cfg, d, &t);
                }
                from_tokens(&t, d)
            }
            Block::Ssm(b) => {
                let d = x.value().dims3().expect("grid input");
                let t = to_tokens(x);
                let h = b.norm.forward(ctx, &t);
                let y = ssm_mixer(ctx, b, &h, b.cfg.bidirectional);
                from_tokens(&add(&t, &y), d)
            }
        }
    }

    /// Checked application to a feature map using stored parameters.
    pub fn apply(&self, store: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        let cfg = self.config();
        if x.channels() != cfg.in_channels {
            return Err(Error::config(format!(
                "block expects {} input channels, got {}",
                cfg.in_channels,
                x.channels()
            )));
        }
        let ctx = Ctx::eval(store);
        let y = self.forward(&ctx, &Var::constant(x.tensor().clone()));
        let level = x.level() + usize::from(cfg.stride == 2);
        FeatureMap::new(y.value().clone(), level)
    }
}

fn build_attention_layer(pb: &mut ParamBuilder, cfg: &BlockConfig, shift: bool) -> AttentionLayer {
    let c = cfg.in_channels;
    let hidden = c * cfg.mlp_ratio;
    let tn = Init::Normal(0.02);
    let table_len = (2 * cfg.window_size - 1).pow(3);
    AttentionLayer {
        shift,
        norm1: LayerNorm::build(&mut pb.sub("norm1"), c),
        qkv: Linear::build(&mut pb.sub("qkv"), c, 3 * c, true, tn.clone()),
        table: pb.param("rel_bias", &[table_len, cfg.heads], tn.clone()),
        proj: Linear::build(&mut pb.sub("proj"), c, c, true, tn.clone()),
        norm2: LayerNorm::build(&mut pb.sub("norm2"), c),
        fc1: Linear::build(&mut pb.sub("fc1"), c, hidden, true, tn.clone()),
        fc2: Linear::build(&mut pb.sub("fc2"), hidden, c, true, tn),
    }
}

fn attention_layer_forward(ctx: &Ctx, l: &AttentionLayer, cfg: &BlockConfig, d: Dims3, t: &Var) -> Var {
    let layout = WindowAttentionLayout { dims: d, window: cfg.window_size, heads: cfg.heads, shift: l.shift };
    let h = l.norm1.forward(ctx, t);
    let qkv = l.qkv.forward(ctx, &h);
    let a = window_attention(&qkv, ctx.p(l.table), &layout);
    let t = add(t, &l.proj.forward(ctx, &a));
    let h = l.norm2.forward(ctx, &t);
    let m = l.fc2.forward(ctx, &gelu(&l.fc1.forward(ctx, &h)));
    add(&t, &m)
}

/// Softplus inverse, for step-size bias initialization.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn build_ssm(pb: &mut ParamBuilder, cfg: &BlockConfig) -> SsmBlock {
    let c = cfg.in_channels;
    let e = cfg.expand * c;
    let n = cfg.state_dim;
    let r = cfg.dt_rank();
    let norm = LayerNorm::build(&mut pb.sub("norm"), c);
    let in_proj = Linear::build(&mut pb.sub("in_proj"), c, 2 * e, false, Init::Uniform(fan_in_bound(c)));
    let conv_w = pb.param("conv.weight", &[e, cfg.scan_conv], Init::Uniform(fan_in_bound(cfg.scan_conv)));
    let conv_b = pb.param("conv.bias", &[e], Init::Uniform(fan_in_bound(cfg.scan_conv)));
    let x_proj = Linear::build(&mut pb.sub("x_proj"), e, r + 2 * n, false, Init::Uniform(fan_in_bound(e)));
    let dt_w = pb.param("dt_proj.weight", &[e, r], Init::Uniform(fan_in_bound(r)));
    // Step sizes spread log-uniformly over [1e-3, 1e-1].
    let dt_bias: Vec<f64> = (0..e)
        .map(|i| {
            let t = if e > 1 { i as f64 / (e - 1) as f64 } else { 0.5 };
            softplus_inv((1e-3f64.ln() + t * (1e-1f64.ln() - 1e-3f64.ln())).exp())
        })
        .collect();
    let dt_b = pb.param("dt_proj.bias", &[e], Init::Values(dt_bias));
    let a_log = pb.param(
        "a_log",
        &[e, n],
        Init::Values((0..e * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect()),
    );
    let d = pb.param("d", &[e], Init::Ones);
    let out_proj = Linear::build(&mut pb.sub("out_proj"), e, c, false, Init::Uniform(fan_in_bound(e)));
    SsmBlock {
        cfg: cfg.clone(),
        norm,
        in_proj,
        conv_w,
        conv_b,
        x_proj,
        dt_proj: Linear { w: dt_w, b: Some(dt_b) },
        a_log,
        d,
        out_proj,
    }
}

fn reverse_rows(x: &Var) -> Var {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let idx: Vec<usize> = (0..l).flat_map(|t| (0..c).map(move |j| (l - 1 - t) * c + j)).collect();
    gather(x, Rc::new(idx), &[l, c])
}

/// One scan direction over `xs [L, E]`.
fn ssm_direction(ctx: &Ctx, b: &SsmBlock, xs: &Var) -> Var {
    let n = b.cfg.state_dim;
    let r = b.cfg.dt_rank();
    let u = silu(&depthwise_causal_conv1d(xs, ctx.p(b.conv_w), ctx.p(b.conv_b)));
    let dbc = b.x_proj.forward(ctx, &u);
    let dt = slice_cols(&dbc, 0, r);
    let bm = slice_cols(&dbc, r, r + n);
    let cm = slice_cols(&dbc, r + n, r + 2 * n);
    let delta = softplus(&b.dt_proj.forward(ctx, &dt));
    let a = neg(&exp(ctx.p(b.a_log)));
    selective_scan(&ScanInputs { u: &u, delta: &delta, a: &a, b: &bm, c: &cm, d: ctx.p(b.d) })
}

/// Gated selective-scan mixer on normalized tokens `[L, C]`. With
/// `bidirectional`, the raster order and its reverse share parameters and
/// their outputs are averaged.
pub fn ssm_mixer(ctx: &Ctx, b: &SsmBlock, h: &Var, bidirectional: bool) -> Var {
    let e = b.cfg.expand * b.cfg.in_channels;
    let xz = b.in_proj.forward(ctx, h);
    let xs = slice_cols(&xz, 0, e);
    let z = slice_cols(&xz, e, 2 * e);
    let mut y = ssm_direction(ctx, b, &xs);
    if bidirectional {
        let yb = reverse_rows(&ssm_direction(ctx, b, &reverse_rows(&xs)));
        y = scale(&add(&y, &yb), 0.5);
    }
    b.out_proj.forward(ctx, &mul(&y, &silu(&z)))
}

/// Convenience used by tests and the models: stack a list of feature maps
/// along channels.
pub fn concat_channels(parts: &[&Var]) -> Var {
    concat0(parts)
}
