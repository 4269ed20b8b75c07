//! Registration-specific designs: weight-shared dual encoding, the
//! coarse-to-fine motion pyramid with feature warping, correlation volumes,
//! iterative refinement and the flow-prediction head.
//!
//! Pyramid fields are composed as `phi_new = compose(up(phi_prev), residual)`:
//! the residual is estimated against source features already warped by the
//! running field, so warping with the result applies the running field first.

use serde::{Deserialize, Serialize};

use crate::autograd::{
    add, concat0, conv_transpose3d_k2s2, correlation_global, correlation_local, resample_trilinear,
    scale, warp, Var,
};
use crate::blocks::{Block, BlockConfig, Conv};
use crate::error::{Error, Result};
use crate::grid::{DisplacementField, FeatureMap, Volume};
use crate::nn::{Ctx, Init, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Dims3, Tensor};

pub use crate::grid::warp_features;

/// Standard deviation of the flow head's initial weights.
pub const FLOW_HEAD_STD: f64 = 1e-5;

/// Neighbourhood of a correlation volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radius {
    Local(usize),
    Global,
}

impl Radius {
    /// Output channels for a grid of `d`.
    pub fn channels(self, d: Dims3) -> usize {
        match self {
            Radius::Local(r) => (2 * r + 1).pow(3),
            Radius::Global => d.len(),
        }
    }
}

/// Correlation volume on graph values.
pub fn correlate(ft: &Var, fs: &Var, radius: Radius) -> Var {
    match radius {
        Radius::Local(r) => correlation_local(ft, fs, r),
        Radius::Global => correlation_global(ft, fs),
    }
}

/// Match scores of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    pub data: Tensor,
    pub radius: Radius,
    pub level: usize,
}

/// `score(x, delta) = (1/N) <f_t(x), f_s(x + delta)>`, zero outside the grid.
pub fn correlation(ft: &FeatureMap, fs: &FeatureMap, radius: Radius) -> Result<CorrelationVolume> {
    if ft.level() != fs.level() || ft.tensor().shape() != fs.tensor().shape() {
        return Err(Error::shape(format!(
            "correlation needs matching maps, got level {} {:?} and level {} {:?}",
            ft.level(),
            ft.tensor().shape(),
            fs.level(),
            fs.tensor().shape()
        )));
    }
    let out = correlate(&Var::constant(ft.tensor().clone()), &Var::constant(fs.tensor().clone()), radius);
    Ok(CorrelationVolume { data: out.value().clone(), radius, level: ft.level() })
}

/// Upsample a field by one level: trilinear resize to doubled extents, vectors doubled.
pub fn upsample_field(phi: &Var) -> Var {
    let d = phi.value().dims3().expect("field grid");
    scale(&resample_trilinear(phi, d.doubled()), 2.0)
}

/// `inner(x) + outer(x + inner(x))` on graph values.
pub fn compose(outer: &Var, inner: &Var) -> Var {
    add(inner, &warp(outer, inner))
}

/// Near-zero initialized 3-channel convolution emitting displacements.
#[derive(Clone, Debug)]
pub struct FlowHead {
    pub conv: Conv,
    pub in_channels: usize,
}

impl FlowHead {
    pub fn build(pb: &mut ParamBuilder, cin: usize) -> Self {
        let w = pb.param("weight", &[3, cin, 3, 3, 3], Init::Normal(FLOW_HEAD_STD));
        let b = pb.param("bias", &[3], Init::Zeros);
        Self { conv: Conv { w, b: Some(b), stride: 1 }, in_channels: cin }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        self.conv.forward(ctx, x)
    }

    /// Checked application to a feature map.
    pub fn apply(&self, store: &ParamStore, x: &FeatureMap) -> Result<DisplacementField> {
        if x.channels() != self.in_channels {
            return Err(Error::config(format!(
                "flow head expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let y = self.forward(&Ctx::eval(store), &Var::constant(x.tensor().clone()));
        DisplacementField::new(y.value().clone(), x.level())
    }
}

/// Feature maps ordered coarse to fine at levels `[4, 3, 2, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.len() != 4 {
            return Err(Error::shape(format!("pyramid needs 4 levels, got {}", maps.len())));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.level() != 4 - i {
                return Err(Error::shape(format!("pyramid entry {i} has level {}, want {}", m.level(), 4 - i)));
            }
            if i > 0 && maps[i - 1].dims().doubled() != m.dims() {
                return Err(Error::shape(format!(
                    "pyramid levels {} and {} are not one factor-2 step apart ({} vs {})",
                    5 - i,
                    4 - i,
                    maps[i - 1].dims(),
                    m.dims()
                )));
            }
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn level(&self, level: usize) -> &FeatureMap {
        &self.maps[4 - level]
    }
}

/// Shared-weight convolutional encoder applied to each single-channel image.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    /// Level 0 stem, then four stride-2 stages.
    pub stages: Vec<Block>,
    pub channels: Vec<usize>,
}

impl DualEncoder {
    pub fn build(pb: &mut ParamBuilder, channels: &[usize]) -> Result<Self> {
        if channels.len() != 5 {
            return Err(Error::config("dual encoder needs 5 channel widths"));
        }
        let mut stages = vec![Block::build(&mut pb.sub("0"), &BlockConfig::conv(1, channels[0], 1))?];
        for i in 1..5 {
            stages.push(Block::build(
                &mut pb.sub(i.to_string()),
                &BlockConfig::conv(channels[i - 1], channels[i], 2),
            )?);
        }
        Ok(Self { stages, channels: channels.to_vec() })
    }

    /// Features at levels 0..=4.
    pub fn encode(&self, ctx: &Ctx, x: &Var) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::with_capacity(5);
        for (i, s) in self.stages.iter().enumerate() {
            let inp = if i == 0 { x.clone() } else { out[i - 1].clone() };
            out.push(s.forward(ctx, &inp));
        }
        out
    }

    pub fn encode_pair(&self, ctx: &Ctx, target: &Var, source: &Var) -> (Vec<Var>, Vec<Var>) {
        (self.encode(ctx, target), self.encode(ctx, source))
    }
}

fn pyramid_from(levels: &[Var]) -> Result<FeaturePyramid> {
    FeaturePyramid::new(
        (1..=4)
            .rev()
            .map(|l| FeatureMap::new(levels[l].value().clone(), l))
            .collect::<Result<_>>()?,
    )
}

/// Encode both volumes with the same parameters.
pub fn dual_encode(
    enc: &DualEncoder,
    store: &ParamStore,
    target: &Volume,
    source: &Volume,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    if target.dims() != source.dims() {
        return Err(Error::shape(format!("volumes differ: {} vs {}", target.dims(), source.dims())));
    }
    let ctx = Ctx::eval(store);
    let (t, s) = enc.encode_pair(&ctx, &Var::constant(target.to_tensor()), &Var::constant(source.to_tensor()));
    Ok((pyramid_from(&t)?, pyramid_from(&s)?))
}

/// Switches of the pyramid decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidOptions {
    pub warping: bool,
    pub correlation: bool,
    /// Radii for levels 4, 3, 2, 1.
    pub radii: [Radius; 4],
    /// Refinement steps per iterated level (1 = no iteration).
    pub iterations: usize,
    pub iteration_levels: Vec<usize>,
}

impl Default for PyramidOptions {
    fn default() -> Self {
        Self {
            warping: false,
            correlation: false,
            radii: [Radius::Global, Radius::Local(3), Radius::Local(2), Radius::Local(1)],
            iterations: 1,
            iteration_levels: vec![2, 1],
        }
    }
}

/// Per-level estimator: optional context upsampler, fusion conv block, head.
#[derive(Clone, Debug)]
pub struct LevelEstimator {
    pub level: usize,
    pub up: Option<(ParamId, ParamId)>,
    pub fuse: Block,
    pub head: FlowHead,
}

/// Coarse-to-fine decoder over levels 4..1.
#[derive(Clone, Debug)]
pub struct PyramidDecoder {
    pub opts: PyramidOptions,
    pub levels: Vec<LevelEstimator>,
    pub feature_channels: Vec<usize>,
    pub widths: Vec<usize>,
}

/// Running state of the refinement at one level.
#[derive(Clone, Debug)]
pub struct RefinementState {
    pub field: DisplacementField,
    pub iteration: usize,
    pub level: usize,
    /// Upsampled decoder features from the coarser level, if any.
    pub context: Option<Tensor>,
}

impl PyramidDecoder {
    /// `feature_channels`: per-stream channels at levels 4..1; `widths`:
    /// decoder widths at levels 4..1; `grid4`: extents at level 4 (for global
    /// correlation).
    pub fn build(
        pb: &mut ParamBuilder,
        feature_channels: &[usize],
        widths: &[usize],
        grid4: Dims3,
        opts: PyramidOptions,
    ) -> Result<Self> {
        if feature_channels.len() != 4 || widths.len() != 4 {
            return Err(Error::config("pyramid decoder needs 4 levels of channels"));
        }
        if opts.iterations == 0 {
            return Err(Error::config("iteration count must be at least 1"));
        }
        if let Some(l) = opts.iteration_levels.iter().find(|l| !(1..=2).contains(*l)) {
            return Err(Error::config(format!("iterative refinement is supported at levels 2 and 1, not {l}")));
        }
        let mut levels = Vec::new();
        for i in 0..4 {
            let level = 4 - i;
            let f = feature_channels[i];
            let grid = Dims3::new(grid4.nx << i, grid4.ny << i, grid4.nz << i);
            let mut cin = if opts.correlation { opts.radii[i].channels(grid) + f } else { 2 * f };
            let mut lp = pb.sub(format!("level{level}"));
            let up = (i > 0).then(|| {
                let c = widths[i - 1];
                cin += c;
                let bound = 1.0 / ((c * 8) as f64).sqrt();
                (
                    lp.param("up.weight", &[c, c, 2, 2, 2], Init::Uniform(bound)),
                    lp.param("up.bias", &[c], Init::Uniform(bound)),
                )
            });
            let fuse = Block::build(&mut lp.sub("fuse"), &BlockConfig::conv(cin, widths[i], 1))?;
            let head = FlowHead::build(&mut lp.sub("head"), widths[i]);
            levels.push(LevelEstimator { level, up, fuse, head });
        }
        Ok(Self { opts, levels, feature_channels: feature_channels.to_vec(), widths: widths.to_vec() })
    }

    fn estimator(&self, level: usize) -> &LevelEstimator {
        &self.levels[4 - level]
    }

    fn steps_at(&self, level: usize) -> usize {
        if self.opts.iteration_levels.contains(&level) {
            self.opts.iterations
        } else {
            1
        }
    }

    /// One warp, match, predict and compose step. Returns (field, features, residual).
    pub fn step(
        &self,
        ctx: &Ctx,
        level: usize,
        ft: &Var,
        fs: &Var,
        field: Option<&Var>,
        context: Option<&Var>,
    ) -> (Var, Var, Var) {
        let est = self.estimator(level);
        let fs_w = match (field, self.opts.warping) {
            (Some(phi), true) => warp(fs, phi),
            _ => fs.clone(),
        };
        let mut parts = if self.opts.correlation {
            vec![correlate(ft, &fs_w, self.opts.radii[4 - level]), ft.clone()]
        } else {
            vec![ft.clone(), fs_w]
        };
        if let Some(c) = context {
            parts.push(c.clone());
        }
        let refs: Vec<&Var> = parts.iter().collect();
        let x = est.fuse.forward(ctx, &concat0(&refs));
        let r = est.head.forward(ctx, &x);
        let phi = match field {
            Some(prev) => compose(prev, &r),
            None => r.clone(),
        };
        (phi, x, r)
    }

    /// Repeat [`Self::step`] `n` times at one level with shared weights.
    /// Returns the final field, the last features and every residual.
    pub fn refine(
        &self,
        ctx: &Ctx,
        level: usize,
        ft: &Var,
        fs: &Var,
        field: Option<&Var>,
        context: Option<&Var>,
        n: usize,
    ) -> (Var, Var, Vec<Var>) {
        let mut cur = field.cloned();
        let mut feats = None;
        let mut residuals = Vec::with_capacity(n);
        for _ in 0..n {
            let (phi, x, r) = self.step(ctx, level, ft, fs, cur.as_ref(), context);
            cur = Some(phi);
            feats = Some(x);
            residuals.push(r);
        }
        (cur.expect("n >= 1"), feats.expect("n >= 1"), residuals)
    }

    /// Decode pyramids given as level-indexed features (index = level, 0..=4).
    /// Returns the level-1 field and the fields at levels `[4, 3, 2, 1]`.
    pub fn decode(&self, ctx: &Ctx, ft: &[Var], fs: &[Var]) -> (Var, Vec<Var>) {
        let mut per_level = Vec::with_capacity(4);
        let mut field: Option<Var> = None;
        let mut feats: Option<Var> = None;
        for level in (1..=4).rev() {
            let est = self.estimator(level);
            let context = match (&est.up, &feats) {
                (Some((w, b)), Some(x)) => Some(conv_transpose3d_k2s2(x, ctx.p(*w), Some(ctx.p(*b)))),
                _ => None,
            };
            let init = field.as_ref().map(upsample_field);
            let (phi, x, _) = self.refine(
                ctx,
                level,
                &ft[level],
                &fs[level],
                init.as_ref(),
                context.as_ref(),
                self.steps_at(level),
            );
            per_level.push(phi.clone());
            field = Some(phi);
            feats = Some(x);
        }
        (field.expect("four levels"), per_level)
    }

    /// Checked decode of feature pyramids using stored parameters.
    pub fn apply(
        &self,
        store: &ParamStore,
        pt: &FeaturePyramid,
        ps: &FeaturePyramid,
    ) -> Result<(DisplacementField, Vec<DisplacementField>)> {
        for (a, b) in pt.maps().iter().zip(ps.maps()) {
            if a.tensor().shape() != b.tensor().shape() {
                return Err(Error::shape("target and source pyramids differ"));
            }
        }
        for (i, m) in pt.maps().iter().enumerate() {
            if m.channels() != self.feature_channels[i] {
                return Err(Error::shape(format!(
                    "level {} has {} channels, decoder expects {}",
                    m.level(),
                    m.channels(),
                    self.feature_channels[i]
                )));
            }
        }
        let ctx = Ctx::eval(store);
        let lift = |p: &FeaturePyramid| -> Vec<Var> {
            let mut v = vec![Var::constant(Tensor::scalar(0.0))];
            v.extend((1..=4).map(|l| Var::constant(p.level(l).tensor().clone())));
            v
        };
        let (fin, per) = self.decode(&ctx, &lift(pt), &lift(ps));
        let per = per
            .iter()
            .enumerate()
            .map(|(i, v)| DisplacementField::new(v.value().clone(), 4 - i))
            .collect::<Result<Vec<_>>>()?;
        Ok((DisplacementField::new(fin.value().clone(), 1)?, per))
    }
}

/// Run `n` refinement steps at `state.level` with the decoder's weights.
pub fn iterative_refine(
    dec: &PyramidDecoder,
    store: &ParamStore,
    state: &RefinementState,
    pt: &FeaturePyramid,
    ps: &FeaturePyramid,
    n: usize,
) -> Result<RefinementState> {
    if n == 0 {
        return Err(Error::config("iteration count must be at least 1"));
    }
    if !(1..=2).contains(&state.level) {
        return Err(Error::config(format!("refinement is supported at levels 2 and 1, not {}", state.level)));
    }
    let ctx = Ctx::eval(store);
    let ft = Var::constant(pt.level(state.level).tensor().clone());
    let fs = Var::constant(ps.level(state.level).tensor().clone());
    let phi = Var::constant(state.field.tensor().clone());
    let context = state.context.clone().map(Var::constant);
    let (out, _, _) = dec.refine(&ctx, state.level, &ft, &fs, Some(&phi), context.as_ref(), n);
    Ok(RefinementState {
        field: DisplacementField::new(out.value().clone(), state.level)?,
        iteration: state.iteration + n,
        level: state.level,
        context: state.context.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check, rand_tensor};
    use crate::autograd::{mul, sum};
    use crate::nn::init_rng;

    fn fixture<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> T) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let out = f(&mut ParamBuilder::new(&mut store, &mut rng));
        (store, out)
    }

    fn fmap(c: usize, d: Dims3, level: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(rand_tensor(&d.shape_with_channels(c), seed), level).unwrap()
    }

    #[test]
    fn correlation_center_is_mean_square() {
        let f = fmap(5, Dims3::cube(4), 2, 3);
        let cv = correlation(&f, &f, Radius::Local(1)).unwrap();
        let n = 64;
        for v in 0..n {
            let want: f64 = (0..5).map(|c| f.tensor().data()[c * n + v].powi(2)).sum::<f64>() / 5.0;
            assert!((cv.data.data()[13 * n + v] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_tracks_a_shift() {
        // fs(x) = ft(x - 1): the +x channel reproduces ft's own mean square.
        let d = Dims3::cube(6);
        let ft = fmap(8, d, 1, 5);
        let mut s = ft.tensor().clone();
        for c in 0..8 {
            for (x, y, z) in d.iter() {
                let src = x.saturating_sub(1);
                s.data_mut()[c * d.len() + d.index(x, y, z)] = ft.tensor().data()[c * d.len() + d.index(src, y, z)];
            }
        }
        let fs = FeatureMap::new(s, 1).unwrap();
        let cv = correlation(&ft, &fs, Radius::Local(1)).unwrap();
        let plus_x = 13 + 1;
        for (x, y, z) in d.iter().filter(|&(x, _, _)| x + 1 < 6) {
            let v = d.index(x, y, z);
            let want: f64 = (0..8).map(|c| ft.tensor().data()[c * d.len() + v].powi(2)).sum::<f64>() / 8.0;
            assert!((cv.data.data()[plus_x * d.len() + v] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_rejects_mismatch() {
        let a = fmap(2, Dims3::cube(4), 2, 1);
        let b = fmap(3, Dims3::cube(4), 2, 1);
        assert_eq!(correlation(&a, &b, Radius::Global).unwrap_err().kind(), "shape");
    }

    #[test]
    fn flow_head_starts_near_zero() {
        let (store, head) = fixture(2023, |pb| FlowHead::build(pb, 32));
        assert_eq!(store.num_scalars(), 2595);
        let x = fmap(32, Dims3::cube(4), 1, 9);
        let phi = head.apply(&store, &x).unwrap();
        assert!(phi.max_abs() <= 1e-2);
        let zero = FeatureMap::new(Tensor::zeros(vec![32, 4, 4, 4]), 1).unwrap();
        assert_eq!(head.apply(&store, &zero).unwrap().max_abs(), 0.0);
        assert!(head.apply(&store, &fmap(16, Dims3::cube(4), 1, 9)).is_err());
    }

    #[test]
    fn dual_encoder_is_swap_symmetric() {
        let (store, enc) = fixture(1, |pb| DualEncoder::build(pb, &[4, 4, 6, 6, 8]).unwrap());
        let d = Dims3::cube(16);
        let a = Volume::new(d, rand_tensor(&[d.len()], 1).data().iter().map(|v| v.abs()).collect()).unwrap();
        let b = Volume::new(d, rand_tensor(&[d.len()], 2).data().iter().map(|v| v.abs()).collect()).unwrap();
        let (pa, pb) = dual_encode(&enc, &store, &a, &b).unwrap();
        let (qb, qa) = dual_encode(&enc, &store, &b, &a).unwrap();
        assert_eq!(pa, qa);
        assert_eq!(pb, qb);
        let (same_t, same_s) = dual_encode(&enc, &store, &a, &a).unwrap();
        assert_eq!(same_t, same_s);
        let dims: Vec<Dims3> = pa.maps().iter().map(FeatureMap::dims).collect();
        assert_eq!(dims, vec![Dims3::cube(1), Dims3::cube(2), Dims3::cube(4), Dims3::cube(8)]);
    }

    #[test]
    fn pyramid_rejects_bad_levels() {
        let maps = vec![fmap(2, Dims3::cube(2), 4, 1), fmap(2, Dims3::cube(4), 3, 1), fmap(2, Dims3::cube(8), 2, 1)];
        assert!(FeaturePyramid::new(maps).is_err());
        let maps = vec![
            fmap(2, Dims3::cube(2), 4, 1),
            fmap(2, Dims3::cube(4), 3, 1),
            fmap(2, Dims3::cube(4), 2, 1),
            fmap(2, Dims3::cube(8), 1, 1),
        ];
        assert!(FeaturePyramid::new(maps).is_err());
    }

    fn decoder(opts: PyramidOptions) -> (ParamStore, PyramidDecoder) {
        fixture(4, |pb| PyramidDecoder::build(pb, &[4, 4, 3, 2], &[8, 6, 4, 4], Dims3::cube(2), opts).unwrap())
    }

    fn pyramid(seed: u64) -> FeaturePyramid {
        let ch = [4, 4, 3, 2];
        FeaturePyramid::new((0..4).map(|i| fmap(ch[i], Dims3::cube(2 << i), 4 - i, seed + i as u64)).collect()).unwrap()
    }

    #[test]
    fn decoder_ladder_shapes() {
        let opts = PyramidOptions { warping: true, correlation: true, iterations: 2, ..Default::default() };
        let (store, dec) = decoder(opts);
        let (fin, per) = dec.apply(&store, &pyramid(1), &pyramid(7)).unwrap();
        assert_eq!(fin.dims(), Dims3::cube(16));
        let levels: Vec<(usize, Dims3)> = per.iter().map(|f| (f.level(), f.dims())).collect();
        assert_eq!(levels, vec![(4, Dims3::cube(2)), (3, Dims3::cube(4)), (2, Dims3::cube(8)), (1, Dims3::cube(16))]);
        assert_eq!(per[3], fin);
    }

    #[test]
    fn iteration_splits_into_single_steps() {
        let opts = PyramidOptions { warping: true, correlation: true, iterations: 2, ..Default::default() };
        let (store, dec) = decoder(opts);
        let (pt, ps) = (pyramid(1), pyramid(7));
        let d = Dims3::cube(8);
        let field = DisplacementField::new(rand_tensor(&d.shape_with_channels(3), 3).map(|v| 0.3 * v), 2).unwrap();
        let context = Some(rand_tensor(&d.shape_with_channels(6), 4));
        let start = RefinementState { field, iteration: 0, level: 2, context };
        let two = iterative_refine(&dec, &store, &start, &pt, &ps, 2).unwrap();
        let one = iterative_refine(&dec, &store, &start, &pt, &ps, 1).unwrap();
        let again = iterative_refine(&dec, &store, &one, &pt, &ps, 1).unwrap();
        assert_eq!(two.iteration, 2);
        assert!(two.field.tensor().data().iter().zip(again.field.tensor().data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(iterative_refine(&dec, &store, &start, &pt, &ps, 0).is_err());

        // A single step matches the step primitive.
        let ctx = Ctx::eval(&store);
        let c = |t: &Tensor| Var::constant(t.clone());
        let (phi, _, _) = dec.step(
            &ctx,
            2,
            &c(pt.level(2).tensor()),
            &c(ps.level(2).tensor()),
            Some(&c(start.field.tensor())),
            start.context.as_ref().map(c).as_ref(),
        );
        assert_eq!(phi.value(), one.field.tensor());
    }

    #[test]
    fn two_level_step_gradients() {
        let opts = PyramidOptions { warping: true, correlation: true, ..Default::default() };
        let (mut store, dec) = fixture(5, |pb| {
            PyramidDecoder::build(pb, &[3, 3, 2, 2], &[4, 4, 4, 4], Dims3::cube(1), opts).unwrap()
        });
        // Lift the heads out of their near-zero start so feature gradients are
        // not swamped by rounding in the pass-through field.
        for l in &dec.levels {
            let w = store.get_mut(l.head.conv.w);
            *w = w.map(|v| v * 1e4);
        }
        let ctx = Ctx::eval(&store);
        let inputs = [
            rand_tensor(&[3, 4, 4, 4], 1),
            rand_tensor(&[3, 4, 4, 4], 2),
            rand_tensor(&[2, 8, 8, 8], 3),
            rand_tensor(&[2, 8, 8, 8], 4),
            rand_tensor(&[3, 4, 4, 4], 5).map(|v| 0.4 * v),
            rand_tensor(&[4, 4, 4, 4], 7),
        ];
        let w = rand_tensor(&[3, 8, 8, 8], 6);
        let err = check(
            &inputs,
            |v| {
                let (phi3, x3, _) = dec.step(&ctx, 3, &v[0], &v[1], Some(&v[4]), Some(&v[5]));
                let (w3, b3) = dec.levels[2].up.unwrap();
                let context = conv_transpose3d_k2s2(&x3, ctx.p(w3), Some(ctx.p(b3)));
                let (phi2, _, _) = dec.step(&ctx, 2, &v[2], &v[3], Some(&upsample_field(&phi3)), Some(&context));
                sum(&mul(&phi2, &Var::constant(w.clone())))
            },
            1e-5,
            40,
        );
        assert!(err < 1e-3, "relative error {err}");
    }
}
