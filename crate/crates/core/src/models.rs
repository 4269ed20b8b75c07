//! Variant registry: every named architecture assembled from blocks and
//! designs, plus parameter accounting, padded prediction and checkpoints.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{concat0, conv_transpose3d_k2s2, gather, max_pool2, resample_trilinear, Var, GATHER_NONE};
use crate::blocks::{Act, Block, BlockConfig, BlockKind, Norm};
use crate::designs::{compose, upsample_field, DualEncoder, FlowHead, PyramidDecoder, PyramidOptions, Radius};
use crate::error::{Error, Result};
use crate::grid::{DisplacementField, Volume};
use crate::nn::{init_rng, Ctx, Init, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Dims3, Tensor};

/// Every input extent is padded to a multiple of this.
pub const PAD_MULTIPLE: usize = 16;

/// Named variants in the reference row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantName {
    #[serde(rename = "VXM")]
    Vxm,
    #[serde(rename = "Pool-Up")]
    PoolUp,
    #[serde(rename = "Mam-VXM")]
    MamVxm,
    #[serde(rename = "TM")]
    Tm,
    #[serde(rename = "Mam-TM")]
    MamTm,
    #[serde(rename = "LKU")]
    Lku,
    #[serde(rename = "Dual")]
    Dual,
    #[serde(rename = "VXM-P")]
    VxmP,
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "DWP")]
    Dwp,
    #[serde(rename = "DWPI")]
    Dwpi,
    #[serde(rename = "DWCP")]
    Dwcp,
    #[serde(rename = "DWCPI")]
    Dwcpi,
    #[serde(rename = "custom")]
    Custom,
}

impl VariantName {
    /// All named variants in table order.
    pub const ALL: [VariantName; 13] = [
        VariantName::PoolUp,
        VariantName::Vxm,
        VariantName::MamVxm,
        VariantName::Tm,
        VariantName::MamTm,
        VariantName::Lku,
        VariantName::Dual,
        VariantName::VxmP,
        VariantName::Dp,
        VariantName::Dwp,
        VariantName::Dwpi,
        VariantName::Dwcp,
        VariantName::Dwcpi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Vxm => "VXM",
            VariantName::PoolUp => "Pool-Up",
            VariantName::MamVxm => "Mam-VXM",
            VariantName::Tm => "TM",
            VariantName::MamTm => "Mam-TM",
            VariantName::Lku => "LKU",
            VariantName::Dual => "Dual",
            VariantName::VxmP => "VXM-P",
            VariantName::Dp => "DP",
            VariantName::Dwp => "DWP",
            VariantName::Dwpi => "DWPI",
            VariantName::Dwcp => "DWCP",
            VariantName::Dwcpi => "DWCPI",
            VariantName::Custom => "custom",
        }
    }

    /// Position in the table row order (custom sorts last).
    pub fn row_index(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).unwrap_or(Self::ALL.len())
    }

    /// Design flags implied by the name.
    pub fn flags(self) -> DesignFlags {
        let f = |dual, pyramid, warping, correlation, iteration| DesignFlags {
            dual,
            pyramid,
            warping,
            correlation,
            iteration,
        };
        match self {
            VariantName::Dual => f(true, false, false, false, false),
            VariantName::VxmP => f(false, true, false, false, false),
            VariantName::Dp => f(true, true, false, false, false),
            VariantName::Dwp => f(true, true, true, false, false),
            VariantName::Dwpi => f(true, true, true, false, true),
            VariantName::Dwcp => f(true, true, true, true, false),
            VariantName::Dwcpi => f(true, true, true, true, true),
            _ => DesignFlags::default(),
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| x.to_ascii_lowercase().replace(['-', '_', ' '], "");
        let key = norm(s);
        Self::ALL
            .iter()
            .chain(std::iter::once(&VariantName::Custom))
            .find(|v| norm(v.as_str()) == key)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignFlags {
    pub dual: bool,
    pub pyramid: bool,
    pub warping: bool,
    pub correlation: bool,
    pub iteration: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Convolutional U-Net style encoder with optional per-level blocks.
    Unet,
    /// Patch-embedding encoder with stages of token blocks.
    Staged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    /// Stride-2 convolutions down, kernel-2 transposed convolutions up.
    Strided,
    /// Max pooling down, trilinear upsampling of features up.
    PoolUp,
}

/// Channel layout of the staged (token) encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagedPlan {
    pub stem: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub decoder: [usize; 3],
}

impl Default for StagedPlan {
    fn default() -> Self {
        Self {
            stem: 16,
            embed_dim: 96,
            depths: [1, 1, 2, 1],
            heads: [3, 6, 12, 24],
            window: 4,
            decoder: [384, 192, 96],
        }
    }
}

impl StagedPlan {
    pub fn dims(&self) -> [usize; 4] {
        let e = self.embed_dim;
        [e, 2 * e, 4 * e, 8 * e]
    }
}

/// Declarative description of one architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: VariantName,
    pub backbone: Backbone,
    pub encoder_block: BlockKind,
    pub resampling: Resampling,
    pub flags: DesignFlags,
    /// Single-stream encoder widths at levels 0..=4 (dual encoders use half).
    pub encoder_channels: Vec<usize>,
    /// Decoder widths at levels 4..=1.
    pub decoder_channels: Vec<usize>,
    pub remaining_channels: usize,
    pub remaining_convs: usize,
    pub staged: StagedPlan,
    pub state_dim: usize,
    pub largest_kernel: usize,
    pub radii: [Radius; 4],
    pub iterations: usize,
    pub iteration_levels: Vec<usize>,
    /// Full-resolution (padded) input extents; fixes the global-correlation width.
    pub extents: Dims3,
    pub seed: u64,
}

/// Input extents assumed for full-scale parameter counts.
pub const PUBLISHED_EXTENTS: Dims3 = Dims3::new(160, 192, 224);

impl VariantConfig {
    /// Full-scale configuration of a named variant.
    pub fn published(name: VariantName) -> Self {
        let mut c = Self {
            name,
            backbone: Backbone::Unet,
            encoder_block: BlockKind::Conv,
            resampling: Resampling::Strided,
            flags: name.flags(),
            encoder_channels: vec![16, 32, 64, 96, 128],
            decoder_channels: vec![128, 96, 64, 32],
            remaining_channels: 32,
            remaining_convs: 2,
            staged: StagedPlan::default(),
            state_dim: 16,
            largest_kernel: 5,
            radii: [Radius::Global, Radius::Local(3), Radius::Local(2), Radius::Local(1)],
            iterations: 2,
            iteration_levels: vec![2, 1],
            extents: PUBLISHED_EXTENTS,
            seed: 2023,
        };
        match name {
            VariantName::PoolUp => c.resampling = Resampling::PoolUp,
            VariantName::MamVxm => c.encoder_block = BlockKind::SelectiveSsm,
            VariantName::Lku => c.encoder_block = BlockKind::LargeKernel,
            VariantName::Tm => {
                c.backbone = Backbone::Staged;
                c.encoder_block = BlockKind::WindowedAttention;
            }
            VariantName::MamTm => {
                c.backbone = Backbone::Staged;
                c.encoder_block = BlockKind::SelectiveSsm;
            }
            _ => {}
        }
        c
    }

    /// Reduced-width configuration for small grids: every channel plan is
    /// divided by `divisor` (head counts are kept).
    pub fn desk(name: VariantName, extents: Dims3, divisor: usize) -> Self {
        let mut c = Self::published(name);
        let d = divisor.max(1);
        let shrink = |v: usize| (v / d).max(4);
        c.encoder_channels = c.encoder_channels.iter().map(|&v| shrink(v)).collect();
        c.decoder_channels = c.decoder_channels.iter().map(|&v| shrink(v)).collect();
        c.remaining_channels = shrink(c.remaining_channels);
        c.staged.stem = shrink(c.staged.stem);
        c.staged.embed_dim = c.staged.embed_dim / d / c.staged.heads[0] * c.staged.heads[0];
        c.staged.embed_dim = c.staged.embed_dim.max(c.staged.heads[0]);
        c.staged.decoder = c.staged.decoder.map(shrink);
        c.extents = extents;
        c
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.flags;
        if self.name != VariantName::Custom && f != self.name.flags() {
            return Err(Error::config(format!("design flags {f:?} do not match variant {}", self.name)));
        }
        if (f.warping || f.correlation || f.iteration) && !(f.dual && f.pyramid) {
            return Err(Error::config("warping, correlation and iteration require the dual pyramid"));
        }
        if f.iteration && !f.warping {
            return Err(Error::config("iterative refinement requires warping"));
        }
        if f.dual && (self.backbone != Backbone::Unet || self.encoder_block != BlockKind::Conv) {
            return Err(Error::config("dual encoders use the convolutional U-Net backbone"));
        }
        if self.encoder_channels.len() != 5 || self.decoder_channels.len() != 4 {
            return Err(Error::config("channel plans need 5 encoder and 4 decoder widths"));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) || self.remaining_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if f.dual && self.encoder_channels.iter().any(|c| c % 2 != 0) {
            return Err(Error::config("dual encoders halve the encoder widths, which must be even"));
        }
        if self.backbone == Backbone::Staged {
            if !matches!(self.encoder_block, BlockKind::WindowedAttention | BlockKind::SelectiveSsm) {
                return Err(Error::config("staged backbones use attention or state-space blocks"));
            }
            let dims = self.staged.dims();
            if dims.iter().zip(self.staged.heads).any(|(d, h)| h == 0 || d % h != 0) {
                return Err(Error::config("stage widths must be divisible by their head counts"));
            }
        }
        if self.resampling == Resampling::PoolUp && (self.backbone != Backbone::Unet || f.dual) {
            return Err(Error::config("pooling resampling applies to the single-stream U-Net"));
        }
        if f.iteration && self.iterations == 0 {
            return Err(Error::config("iteration count must be at least 1"));
        }
        if self.extents.as_array().iter().any(|n| n % PAD_MULTIPLE != 0) {
            return Err(Error::config(format!("extents {} must be multiples of {PAD_MULTIPLE}", self.extents)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Up {
    Transposed(ParamId, ParamId),
    Trilinear,
}

impl Up {
    fn build(pb: &mut ParamBuilder, c: usize, resampling: Resampling) -> Self {
        match resampling {
            Resampling::Strided => {
                let bound = 1.0 / ((c * 8) as f64).sqrt();
                Up::Transposed(
                    pb.param("weight", &[c, c, 2, 2, 2], Init::Uniform(bound)),
                    pb.param("bias", &[c], Init::Uniform(bound)),
                )
            }
            Resampling::PoolUp => Up::Trilinear,
        }
    }

    fn forward(&self, ctx: &Ctx, x: &Var, to: Dims3) -> Var {
        match self {
            Up::Transposed(w, b) => conv_transpose3d_k2s2(x, ctx.p(*w), Some(ctx.p(*b))),
            Up::Trilinear => resample_trilinear(x, to),
        }
    }
}

/// Five-level encoder; each level is an optional max-pool followed by blocks.
#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<Vec<Block>>,
    pool: bool,
}

impl Encoder {
    fn forward(&self, ctx: &Ctx, x: &Var) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let mut h = if i == 0 { x.clone() } else { out[i - 1].clone() };
            if i > 0 && self.pool {
                h = max_pool2(&h);
            }
            for b in stage {
                h = b.forward(ctx, &h);
            }
            out.push(h);
        }
        out
    }
}

/// Plain strided convolution (patch embedding / merging).
fn merge_cfg(cin: usize, cout: usize) -> BlockConfig {
    BlockConfig::conv(cin, cout, 2)
        .with_kernel(2)
        .with_norm(Norm::None)
        .with_act(Act::Identity)
}

fn token_block(kind: BlockKind, c: usize, heads: usize, window: usize, state_dim: usize) -> BlockConfig {
    match kind {
        BlockKind::WindowedAttention => BlockConfig { window_size: window, ..BlockConfig::attention(c, heads) },
        _ => BlockConfig { state_dim, ..BlockConfig::ssm(c) },
    }
}

fn build_encoder(pb: &mut ParamBuilder, cfg: &VariantConfig) -> Result<(Encoder, Vec<usize>)> {
    let e = &cfg.encoder_channels;
    let mut stages = Vec::new();
    match cfg.backbone {
        Backbone::Unet => {
            for lvl in 0..5 {
                let mut sp = pb.sub(lvl.to_string());
                let cin = if lvl == 0 { 2 } else { e[lvl - 1] };
                let mut stage = Vec::new();
                let down = match (lvl, cfg.encoder_block, cfg.resampling) {
                    (0, _, _) => BlockConfig::conv(cin, e[0], 1),
                    (_, _, Resampling::PoolUp) => BlockConfig::conv(cin, e[lvl], 1),
                    (_, BlockKind::SelectiveSsm, _) => merge_cfg(cin, e[lvl]),
                    _ => BlockConfig::conv(cin, e[lvl], 2),
                };
                stage.push(Block::build(&mut sp.sub("down"), &down)?);
                match cfg.encoder_block {
                    BlockKind::LargeKernel => {
                        let lk = BlockConfig { largest_kernel: cfg.largest_kernel, ..BlockConfig::large_kernel(e[lvl], e[lvl], 1) };
                        stage.push(Block::build(&mut sp.sub("block"), &lk)?);
                    }
                    BlockKind::SelectiveSsm => {
                        let c = token_block(BlockKind::SelectiveSsm, e[lvl], 1, 1, cfg.state_dim);
                        stage.push(Block::build(&mut sp.sub("block"), &c)?);
                    }
                    _ => {}
                }
                stages.push(stage);
            }
            Ok((Encoder { stages, pool: cfg.resampling == Resampling::PoolUp }, e.clone()))
        }
        Backbone::Staged => {
            let s = &cfg.staged;
            let dims = s.dims();
            stages.push(vec![Block::build(&mut pb.sub("0").sub("down"), &BlockConfig::conv(2, s.stem, 1))?]);
            for i in 0..4 {
                let mut sp = pb.sub((i + 1).to_string());
                let cin = if i == 0 { s.stem } else { dims[i - 1] };
                let mut stage = vec![Block::build(&mut sp.sub("down"), &merge_cfg(cin, dims[i]))?];
                // Each depth unit is a pair of token layers.
                let per_depth = match cfg.encoder_block {
                    BlockKind::WindowedAttention => 1,
                    _ => 2,
                };
                for j in 0..s.depths[i] * per_depth {
                    let c = token_block(cfg.encoder_block, dims[i], s.heads[i], s.window, cfg.state_dim);
                    stage.push(Block::build(&mut sp.sub(format!("block{j}")), &c)?);
                }
                stages.push(stage);
            }
            let mut ch = vec![s.stem];
            ch.extend(dims);
            Ok((Encoder { stages, pool: false }, ch))
        }
    }
}

/// U-Net decoder: optional bottleneck, three up/concat/conv steps, remaining
/// convolutions and a flow head at level 1. With `pyramid`, heads at levels
/// 4, 3, 2 produce residuals composed coarse to fine.
#[derive(Clone, Debug)]
struct UnetDecoder {
    bottleneck: Option<Block>,
    ups: Vec<Up>,
    convs: Vec<Block>,
    remaining: Vec<Block>,
    level_heads: Vec<FlowHead>,
    head: FlowHead,
}

fn build_unet_decoder(
    pb: &mut ParamBuilder,
    cfg: &VariantConfig,
    enc: &[usize],
    widths: &[usize],
    bottleneck: bool,
    rem_kind: BlockKind,
    final_width: Option<usize>,
) -> Result<UnetDecoder> {
    let bottleneck_block = if bottleneck {
        Some(Block::build(&mut pb.sub("bottleneck"), &BlockConfig::conv(enc[4], widths[0], 1))?)
    } else {
        None
    };
    let mut prev = if bottleneck { widths[0] } else { enc[4] };
    let mut level_heads = Vec::new();
    if cfg.flags.pyramid {
        level_heads.push(FlowHead::build(&mut pb.sub("head4"), prev));
    }
    let (mut ups, mut convs) = (Vec::new(), Vec::new());
    let outs: Vec<usize> = if bottleneck { widths[1..4].to_vec() } else { widths[0..3].to_vec() };
    for i in 0..3 {
        let level = 3 - i;
        let mut sp = pb.sub(format!("up{level}"));
        ups.push(Up::build(&mut sp.sub("up"), prev, cfg.resampling));
        convs.push(Block::build(&mut sp.sub("conv"), &BlockConfig::conv(prev + enc[level], outs[i], 1))?);
        prev = outs[i];
        if cfg.flags.pyramid && level > 1 {
            level_heads.push(FlowHead::build(&mut pb.sub(format!("head{level}")), prev));
        }
    }
    let mut remaining = Vec::new();
    let mut rem_in = prev;
    if let Some(w) = final_width {
        remaining.push(Block::build(&mut pb.sub("rem0"), &BlockConfig::conv(prev, w, 1))?);
        rem_in = w;
    }
    let start = remaining.len();
    for j in start..cfg.remaining_convs.max(start) {
        let out = final_width.unwrap_or(cfg.remaining_channels);
        let c = match rem_kind {
            BlockKind::LargeKernel => BlockConfig {
                largest_kernel: cfg.largest_kernel,
                ..BlockConfig::large_kernel(rem_in, rem_in, 1)
            },
            _ => BlockConfig::conv(rem_in, out, 1),
        };
        rem_in = c.out_channels;
        remaining.push(Block::build(&mut pb.sub(format!("rem{j}")), &c)?);
    }
    let head = FlowHead::build(&mut pb.sub("head"), rem_in);
    Ok(UnetDecoder { bottleneck: bottleneck_block, ups, convs, remaining, level_heads, head })
}

impl UnetDecoder {
    /// `feats` are level-indexed (0..=4). Returns (level-1 field, per-level fields).
    fn forward(&self, ctx: &Ctx, feats: &[Var]) -> (Var, Vec<Var>) {
        let mut x = feats[4].clone();
        if let Some(b) = &self.bottleneck {
            x = b.forward(ctx, &x);
        }
        let pyramid = !self.level_heads.is_empty();
        let mut per_level = Vec::new();
        let mut field: Option<Var> = None;
        let push = |r: Var, field: &mut Option<Var>, per: &mut Vec<Var>| {
            let phi = match field.as_ref() {
                Some(prev) => compose(&upsample_field(prev), &r),
                None => r,
            };
            per.push(phi.clone());
            *field = Some(phi);
        };
        if pyramid {
            push(self.level_heads[0].forward(ctx, &x), &mut field, &mut per_level);
        }
        for i in 0..3 {
            let level = 3 - i;
            let skip = &feats[level];
            let up = self.ups[i].forward(ctx, &x, skip.value().dims3().expect("grid"));
            x = self.convs[i].forward(ctx, &concat0(&[&up, skip]));
            if pyramid && level > 1 {
                push(self.level_heads[i + 1].forward(ctx, &x), &mut field, &mut per_level);
            }
        }
        for b in &self.remaining {
            x = b.forward(ctx, &x);
        }
        let r = self.head.forward(ctx, &x);
        if pyramid {
            push(r, &mut field, &mut per_level);
            (field.expect("pyramid field"), per_level)
        } else {
            (r, per_level)
        }
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Single { enc: Encoder, dec: UnetDecoder },
    Dual { enc: DualEncoder, dec: UnetDecoder },
    DualPyramid { enc: DualEncoder, dec: PyramidDecoder },
}

/// Graph outputs of one forward pass.
pub struct ForwardOutput {
    /// Level-1 displacement `[3, D/2]`.
    pub field: Var,
    /// Fields at levels `[4, 3, 2, 1]` for pyramid variants, else empty.
    pub per_level: Vec<Var>,
}

/// Displacement prediction on (unpadded) volumes.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub field: DisplacementField,
    pub per_level: Vec<DisplacementField>,
}

/// A built network with its parameters.
#[derive(Clone, Debug)]
pub struct RegistrationModel {
    pub config: VariantConfig,
    pub params: ParamStore,
    arch: Arch,
}

impl RegistrationModel {
    /// Deterministic construction from `cfg.seed`.
    pub fn build(cfg: &VariantConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(cfg.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let f = cfg.flags;
        let arch = if f.dual {
            let half: Vec<usize> = cfg.encoder_channels.iter().map(|c| c / 2).collect();
            let enc = DualEncoder::build(&mut pb.sub("encoder"), &half)?;
            if f.pyramid {
                let feature_channels: Vec<usize> = (1..=4).rev().map(|l| half[l]).collect();
                let opts = PyramidOptions {
                    warping: f.warping,
                    correlation: f.correlation,
                    radii: cfg.radii,
                    iterations: if f.iteration { cfg.iterations } else { 1 },
                    iteration_levels: cfg.iteration_levels.clone(),
                };
                let dec = PyramidDecoder::build(
                    &mut pb.sub("decoder"),
                    &feature_channels,
                    &cfg.decoder_channels,
                    cfg.extents.at_level(4),
                    opts,
                )?;
                Arch::DualPyramid { enc, dec }
            } else {
                let dec = build_unet_decoder(
                    &mut pb.sub("decoder"),
                    cfg,
                    &cfg.encoder_channels,
                    &cfg.decoder_channels,
                    true,
                    BlockKind::Conv,
                    None,
                )?;
                Arch::Dual { enc, dec }
            }
        } else {
            let (enc, ch) = build_encoder(&mut pb.sub("encoder"), cfg)?;
            let dec = match cfg.backbone {
                Backbone::Unet => build_unet_decoder(
                    &mut pb.sub("decoder"),
                    cfg,
                    &ch,
                    &cfg.decoder_channels,
                    true,
                    cfg.encoder_block,
                    None,
                )?,
                Backbone::Staged => build_unet_decoder(
                    &mut pb.sub("decoder"),
                    cfg,
                    &ch,
                    &cfg.staged.decoder,
                    false,
                    BlockKind::Conv,
                    Some(cfg.remaining_channels),
                )?,
            };
            Arch::Single { enc, dec }
        };
        Ok(Self { config: cfg.clone(), params, arch })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn name(&self) -> VariantName {
        self.config.name
    }

    /// Graph forward pass on `[1, D]` target and source with `D` a multiple of 16.
    pub fn forward(&self, ctx: &Ctx, target: &Var, source: &Var) -> Result<ForwardOutput> {
        if target.shape() != source.shape() {
            return Err(Error::shape(format!(
                "target {:?} and source {:?} differ",
                target.shape(),
                source.shape()
            )));
        }
        let d = target.value().dims3()?;
        if target.value().channels() != 1 {
            return Err(Error::shape("inputs must be single-channel"));
        }
        if d.as_array().iter().any(|n| n % PAD_MULTIPLE != 0) {
            return Err(Error::shape(format!("extents {d} must be multiples of {PAD_MULTIPLE}; pad first")));
        }
        if self.config.flags.correlation && d != self.config.extents {
            return Err(Error::shape(format!(
                "global correlation was built for {}, got {d}",
                self.config.extents
            )));
        }
        let (field, per_level) = match &self.arch {
            Arch::Single { enc, dec } => {
                let feats = enc.forward(ctx, &concat0(&[target, source]));
                dec.forward(ctx, &feats)
            }
            Arch::Dual { enc, dec } => {
                let (ft, fs) = enc.encode_pair(ctx, target, source);
                let feats: Vec<Var> = ft.iter().zip(&fs).map(|(a, b)| concat0(&[a, b])).collect();
                dec.forward(ctx, &feats)
            }
            Arch::DualPyramid { enc, dec } => {
                let (ft, fs) = enc.encode_pair(ctx, target, source);
                dec.decode(ctx, &ft, &fs)
            }
        };
        Ok(ForwardOutput { field, per_level })
    }

    /// Predict on volumes of any extents: zero-pad to multiples of 16, run,
    /// and crop every field to the unpadded extents of its level.
    pub fn predict(&self, target: &Volume, source: &Volume) -> Result<Prediction> {
        if target.dims() != source.dims() {
            return Err(Error::shape(format!("target {} and source {} differ", target.dims(), source.dims())));
        }
        let d = target.dims();
        let padded = pad_extents(d);
        let t = Var::constant(pad_tensor(&target.to_tensor(), padded));
        let s = Var::constant(pad_tensor(&source.to_tensor(), padded));
        let out = self.forward(&Ctx::eval(&self.params), &t, &s)?;
        let crop = |v: &Var, level: usize| -> Result<DisplacementField> {
            DisplacementField::new(crop_tensor(v.value(), d.at_level(level)), level)
        };
        let per_level = out
            .per_level
            .iter()
            .enumerate()
            .map(|(i, v)| crop(v, 4 - i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction { field: crop(&out.field, 1)?, per_level })
    }

    /// Replace parameters (names and shapes must match).
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        self.params.load_from(other)
    }

    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        write_checkpoint(path, &self.config, &self.params, extra)
    }

    /// Rebuild the architecture from the stored config and load its parameters.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (cfg, params, extra) = read_checkpoint(path)?;
        let mut m = Self::build(&cfg)?;
        m.load_params(&params)
            .map_err(|e| Error::format(path, format!("checkpoint does not fit its config: {e}")))?;
        Ok((m, extra))
    }
}

/// Extents rounded up to multiples of 16.
pub fn pad_extents(d: Dims3) -> Dims3 {
    let r = |n: usize| n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    Dims3::new(r(d.nx), r(d.ny), r(d.nz))
}

/// Zero-pad a `[C, D]` tensor at the high end of each axis.
pub fn pad_tensor(t: &Tensor, to: Dims3) -> Tensor {
    let d = t.dims3().expect("grid tensor");
    if d == to {
        return t.clone();
    }
    let c = t.channels();
    let mut out = vec![0.0; c * to.len()];
    for ch in 0..c {
        for (x, y, z) in d.iter() {
            out[ch * to.len() + to.index(x, y, z)] = t.data()[ch * d.len() + d.index(x, y, z)];
        }
    }
    Tensor::from_parts(to.shape_with_channels(c), out)
}

/// Keep the low corner `to` of a `[C, D]` tensor.
pub fn crop_tensor(t: &Tensor, to: Dims3) -> Tensor {
    let d = t.dims3().expect("grid tensor");
    if d == to {
        return t.clone();
    }
    let c = t.channels();
    let mut out = Vec::with_capacity(c * to.len());
    for ch in 0..c {
        for (x, y, z) in to.iter() {
            out.push(t.data()[ch * d.len() + d.index(x, y, z)]);
        }
    }
    Tensor::from_parts(to.shape_with_channels(c), out)
}

/// Differentiable zero-padding, used when training on unpadded volumes.
pub fn pad_var(v: &Var, to: Dims3) -> Var {
    let d = v.value().dims3().expect("grid tensor");
    if d == to {
        return v.clone();
    }
    let c = v.value().channels();
    let mut idx = vec![GATHER_NONE; c * to.len()];
    for ch in 0..c {
        for (x, y, z) in d.iter() {
            idx[ch * to.len() + to.index(x, y, z)] = ch * d.len() + d.index(x, y, z);
        }
    }
    gather(v, Rc::new(idx), &to.shape_with_channels(c))
}

/// Differentiable low-corner crop.
pub fn crop_var(v: &Var, to: Dims3) -> Var {
    let d = v.value().dims3().expect("grid tensor");
    if d == to {
        return v.clone();
    }
    let c = v.value().channels();
    let mut idx = Vec::with_capacity(c * to.len());
    for ch in 0..c {
        for (x, y, z) in to.iter() {
            idx.push(ch * d.len() + d.index(x, y, z));
        }
    }
    gather(v, Rc::new(idx), &to.shape_with_channels(c))
}

const CKPT_MAGIC: &[u8; 8] = b"DFKCKPT\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: VariantConfig,
    params: Vec<CkptEntry>,
    extra: serde_json::Value,
}

/// Layout: magic, u32 version, u64 header length, JSON header, then the
/// parameters as little-endian f64 in header order.
pub fn write_checkpoint(path: &Path, cfg: &VariantConfig, params: &ParamStore, extra: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let entries = params
        .iter()
        .map(|(_, name, t)| {
            let e = CkptEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&CkptHeader { config: cfg.clone(), params: entries, extra })?;
    let mut buf = Vec::with_capacity(20 + header.len() + offset * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(VariantConfig, ParamStore, serde_json::Value)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if buf.len() < 20 || &buf[..8] != CKPT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CkptHeader =
        serde_json::from_slice(&buf[20..body]).map_err(|e| bad(&format!("corrupt header: {e}")))?;
    let data = &buf[body..];
    let mut pairs = Vec::with_capacity(header.params.len());
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (e.offset * 8, (e.offset + n) * 8);
        if hi > data.len() {
            return Err(bad(&format!("parameter {} runs past the end of the file", e.name)));
        }
        let vals = data[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pairs.push((e.name, Tensor::new(e.shape, vals)?));
    }
    Ok((header.config, ParamStore::from_pairs(pairs)?, header.extra))
}
