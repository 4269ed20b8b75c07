//! Training objective: similarity + gamma * Dice + lambda * smoothness of the
//! half-resolution output upsampled to full size, plus 2^-level scaled
//! auxiliary terms on the coarse pyramid fields.

use serde::{Deserialize, Serialize};

use crate::autograd::{
    add, add_scalar, box_sum, div, forward_diff, mean, mul, resample_trilinear, scale, sqrt, square, sub, sum, warp,
    Var,
};
use crate::error::{Error, Result};
use crate::grid::{avg_pool_levels, DisplacementField, LabelMap, Volume};
use crate::tensor::{Dims3, Tensor};

/// Half-width of the local correlation window (9^3 voxels).
pub const LNCC_RADIUS: usize = 4;
pub const LNCC_EPS: f64 = 1e-5;
/// Levels that receive the auxiliary loss.
pub const AUX_LEVELS: [usize; 3] = [4, 3, 2];
/// Level of the model output; it is upsampled to full size for the main terms.
pub const OUTPUT_LEVEL: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    Lncc,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda: f64,
    pub similarity: SimilarityKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 0.5, lambda: 0.5, similarity: SimilarityKind::Lncc }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite() && self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative, got gamma={} lambda={}",
                self.gamma, self.lambda
            )));
        }
        Ok(())
    }
}

/// `1 - mean(ncc)` over `(2r+1)^3` windows truncated at the border.
/// Each window scores `(cov + eps) / sqrt((var_a + eps)(var_b + eps))`, so flat
/// identical patches score 1 and the value stays within `[-1, 1]`.
pub fn lncc(a: &Var, b: &Var, radius: usize) -> Var {
    let shape = a.shape().to_vec();
    let ones = Var::constant(Tensor::ones(shape));
    let count = box_sum(&ones, radius);
    let sa = box_sum(a, radius);
    let sb = box_sum(b, radius);
    let saa = box_sum(&mul(a, a), radius);
    let sbb = box_sum(&mul(b, b), radius);
    let sab = box_sum(&mul(a, b), radius);
    let cov = sub(&sab, &div(&mul(&sa, &sb), &count));
    let va = sub(&saa, &div(&mul(&sa, &sa), &count));
    let vb = sub(&sbb, &div(&mul(&sb, &sb), &count));
    let ncc = div(&add_scalar(&cov, LNCC_EPS), &sqrt(&mul(&add_scalar(&va, LNCC_EPS), &add_scalar(&vb, LNCC_EPS))));
    add_scalar(&scale(&mean(&ncc), -1.0), 1.0)
}

pub fn mse(a: &Var, b: &Var) -> Var {
    mean(&square(&sub(a, b)))
}

pub fn similarity(a: &Var, b: &Var, kind: SimilarityKind) -> Var {
    match kind {
        SimilarityKind::Lncc => lncc(a, b, LNCC_RADIUS),
        SimilarityKind::Mse => mse(a, b),
    }
}

/// `1 - mean_k 2<a_k, b_k> / (|a_k| + |b_k|)` over label channels `[K, D]`.
pub fn soft_dice(a: &Var, b: &Var) -> Var {
    let k = a.value().channels();
    let d = a.value().dims3().expect("label grid");
    let flat = |v: &Var| crate::autograd::reshape(v, &[k, d.len()]);
    let (fa, fb) = (flat(a), flat(b));
    let inter = row_sums(&mul(&fa, &fb));
    let denom = add(&row_sums(&fa), &row_sums(&fb));
    // Channels empty in both score 0 instead of 0 / 0.
    let guard = Var::constant(denom.value().map(|v| if v == 0.0 { 1.0 } else { 0.0 }));
    let dice = div(&scale(&inter, 2.0), &add(&denom, &guard));
    add_scalar(&scale(&mean(&dice), -1.0), 1.0)
}

fn row_sums(x: &Var) -> Var {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let ones = Var::constant(Tensor::ones(vec![c, 1]));
    crate::autograd::reshape(&crate::autograd::matmul(x, &ones), &[r])
}

/// Sum over axes of the per-voxel mean of squared forward differences,
/// summed over displacement channels.
pub fn smoothness(field: &Var) -> Var {
    let d = field.value().dims3().expect("field grid");
    let mut terms = Vec::new();
    for (axis, n) in d.as_array().into_iter().enumerate() {
        if n < 2 {
            continue;
        }
        let g = forward_diff(field, axis);
        let voxels = g.value().dims3().expect("grid").len();
        terms.push(scale(&sum(&square(&g)), 1.0 / voxels as f64));
    }
    terms
        .iter()
        .skip(1)
        .fold(terms.first().cloned().unwrap_or_else(|| Var::constant(Tensor::scalar(0.0))), |acc, t| add(&acc, t))
}

/// Checked similarity on volumes.
pub fn similarity_loss(target: &Volume, warped: &Volume, kind: SimilarityKind) -> Result<f64> {
    if target.dims() != warped.dims() {
        return Err(Error::shape(format!("similarity on {} vs {}", target.dims(), warped.dims())));
    }
    Ok(similarity(&Var::constant(target.to_tensor()), &Var::constant(warped.to_tensor()), kind).item())
}

/// One-hot `[K, D]` encoding for the labels in `label_set` (background omitted).
pub fn one_hot(labels: &LabelMap, label_set: &[u32]) -> Tensor {
    let d = labels.dims();
    let mut out = vec![0.0; label_set.len() * d.len()];
    for (i, &l) in labels.data().iter().enumerate() {
        if let Ok(k) = label_set.binary_search(&l) {
            out[k * d.len() + i] = 1.0;
        }
    }
    Tensor::from_parts(d.shape_with_channels(label_set.len()), out)
}

fn check_label_set(label_set: &[u32]) -> Result<()> {
    if label_set.is_empty() || label_set.contains(&0) || label_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("label set must be non-empty, sorted, unique and exclude background 0"));
    }
    Ok(())
}

/// Checked soft Dice loss of a hard target against warped soft one-hot channels.
pub fn dice_loss(target: &LabelMap, warped_soft: &Tensor, label_set: &[u32]) -> Result<f64> {
    check_label_set(label_set)?;
    if warped_soft.channels() != label_set.len() {
        return Err(Error::config(format!(
            "{} soft channels for {} labels",
            warped_soft.channels(),
            label_set.len()
        )));
    }
    if warped_soft.dims3()? != target.dims() {
        return Err(Error::shape(format!("soft labels {:?} vs map {}", warped_soft.shape(), target.dims())));
    }
    if let Some(l) = target.label_set().into_iter().find(|l| label_set.binary_search(l).is_err()) {
        return Err(Error::config(format!("label {l} is missing from the label set")));
    }
    let t = Var::constant(one_hot(target, label_set));
    Ok(soft_dice(&t, &Var::constant(warped_soft.clone())).item())
}

pub fn smoothness_loss(field: &DisplacementField) -> f64 {
    smoothness(&Var::constant(field.tensor().clone())).item()
}

/// Images and labels prepared at every level the objective touches.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub label_set: Vec<u32>,
    /// `(level, target [1, D_l], source [1, D_l])` at full size and the aux levels.
    pub images: Vec<(usize, Tensor, Tensor)>,
    /// One-hot labels at full size.
    pub target_labels: Option<Tensor>,
    pub source_labels: Option<Tensor>,
}

fn pooled(t: &Tensor, level: usize) -> Tensor {
    let d = t.dims3().expect("grid");
    let c = t.channels();
    let (data, o) = avg_pool_levels(t.data(), c, d, level);
    Tensor::from_parts(o.shape_with_channels(c), data)
}

impl LossInputs {
    /// Keep full-size images and one-hot labels and average-pool the images
    /// to the aux levels. Labels are optional; without them the Dice term is zero.
    pub fn new(
        target: &Volume,
        source: &Volume,
        labels: Option<(&LabelMap, &LabelMap)>,
        label_set: &[u32],
    ) -> Result<Self> {
        if target.dims() != source.dims() {
            return Err(Error::shape(format!("target {} vs source {}", target.dims(), source.dims())));
        }
        let (tt, st) = (target.to_tensor(), source.to_tensor());
        let images = std::iter::once(0)
            .chain(AUX_LEVELS)
            .map(|l| (l, pooled(&tt, l), pooled(&st, l)))
            .collect();
        let (target_labels, source_labels) = match labels {
            Some((lt, ls)) => {
                check_label_set(label_set)?;
                if lt.dims() != target.dims() || ls.dims() != target.dims() {
                    return Err(Error::shape("label maps must match the volume extents"));
                }
                (Some(one_hot(lt, label_set)), Some(one_hot(ls, label_set)))
            }
            None => (None, None),
        };
        Ok(Self { label_set: label_set.to_vec(), images, target_labels, source_labels })
    }

    fn at(&self, level: usize) -> Option<&(usize, Tensor, Tensor)> {
        self.images.iter().find(|(l, _, _)| *l == level)
    }

    pub fn extents(&self, level: usize) -> Option<Dims3> {
        self.at(level).map(|(_, t, _)| t.dims3().expect("grid"))
    }
}

/// Auxiliary term of one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTerm {
    pub level: usize,
    pub similarity: f64,
    pub smoothness: f64,
    /// `similarity + lambda * smoothness`.
    pub unscaled: f64,
    pub scale: f64,
    pub scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub similarity: f64,
    pub dice: f64,
    pub smoothness: f64,
    pub levels: Vec<LevelTerm>,
}

impl LossBreakdown {
    /// Re-add the weighted terms in the order the graph does.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let mut t = self.similarity + w.gamma * self.dice;
        t += w.lambda * self.smoothness;
        for l in &self.levels {
            t += l.scaled;
        }
        t
    }
}

fn level_scale(level: usize) -> f64 {
    0.5f64.powi(level as i32)
}

/// Graph objective. `per_level` holds the pyramid fields at levels
/// `[4, 3, 2, 1]` (or is empty); only levels 4, 3 and 2 contribute aux terms.
pub fn total_loss_var(
    inputs: &LossInputs,
    field: &Var,
    per_level: &[Var],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let (_, t0, s0) = inputs.at(0).expect("full size prepared");
    let d0 = t0.dims3()?;
    if field.value().dims3()? != d0.at_level(OUTPUT_LEVEL) {
        return Err(Error::shape(format!(
            "output field {:?} does not match {} (level {OUTPUT_LEVEL} of {d0})",
            field.shape(),
            d0.at_level(OUTPUT_LEVEL)
        )));
    }
    let c = |t: &Tensor| Var::constant(t.clone());
    let full = upsample_to_full(field, d0);
    let sim = similarity(&c(t0), &warp(&c(s0), &full), w.similarity);
    let dice = match (&inputs.target_labels, &inputs.source_labels) {
        (Some(lt), Some(ls)) => soft_dice(&c(lt), &warp(&c(ls), &full)),
        _ => Var::constant(Tensor::scalar(0.0)),
    };
    let reg = smoothness(&full);
    let mut total = add(&sim, &scale(&dice, w.gamma));
    total = add(&total, &scale(&reg, w.lambda));
    let mut levels = Vec::new();
    if !per_level.is_empty() && per_level.len() != 4 {
        return Err(Error::shape(format!("expected 4 pyramid fields, got {}", per_level.len())));
    }
    for (phi, &level) in per_level.iter().zip(&[4, 3, 2]) {
        let (_, tl, sl) = inputs.at(level).expect("aux level prepared");
        if phi.value().dims3()? != tl.dims3()? {
            return Err(Error::shape(format!("level-{level} field {:?} vs images {:?}", phi.shape(), tl.shape())));
        }
        let s = similarity(&c(tl), &warp(&c(sl), phi), w.similarity);
        let r = smoothness(phi);
        let unscaled = add(&s, &scale(&r, w.lambda));
        let k = level_scale(level);
        let scaled = scale(&unscaled, k);
        levels.push(LevelTerm {
            level,
            similarity: s.item(),
            smoothness: r.item(),
            unscaled: unscaled.item(),
            scale: k,
            scaled: scaled.item(),
        });
        total = add(&total, &scaled);
    }
    let breakdown = LossBreakdown {
        total: total.item(),
        similarity: sim.item(),
        dice: dice.item(),
        smoothness: reg.item(),
        levels,
    };
    Ok((total, breakdown))
}

/// Level-1 field resampled onto the full grid, in full-size voxel units.
/// Matches `grid::resize_field_to(field, 0, full)`.
pub fn upsample_to_full(field: &Var, full: Dims3) -> Var {
    scale(&resample_trilinear(field, full), 2f64.powi(OUTPUT_LEVEL as i32))
}

/// Value-level objective on checked grid types.
pub fn total_loss(
    inputs: &LossInputs,
    field: &DisplacementField,
    per_level: &[DisplacementField],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if field.level() != OUTPUT_LEVEL {
        return Err(Error::shape(format!("output field must be at level {OUTPUT_LEVEL}, got {}", field.level())));
    }
    for (f, want) in per_level.iter().zip([4, 3, 2, 1]) {
        if f.level() != want {
            return Err(Error::shape(format!("pyramid field at level {} where {want} was expected", f.level())));
        }
    }
    let c = |f: &DisplacementField| Var::constant(f.tensor().clone());
    let per: Vec<Var> = per_level.iter().map(c).collect();
    total_loss_var(inputs, &c(field), &per, w).map(|(_, b)| b)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check, rand_tensor};

    fn rand_vol(d: Dims3, seed: u64) -> Volume {
        let t = rand_tensor(&[d.len()], seed);
        Volume::new(d, t.data().iter().map(|v| 0.5 + 0.5 * v).collect()).unwrap()
    }

    /// Direct windowed loop with the same epsilon convention.
    fn lncc_oracle(a: &Volume, b: &Volume, r: i64) -> f64 {
        let d = a.dims();
        let mut acc = 0.0;
        for (x, y, z) in d.iter() {
            let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if px < 0 || py < 0 || pz < 0 || px >= d.nx as i64 || py >= d.ny as i64 || pz >= d.nz as i64 {
                            continue;
                        }
                        let (u, v) = (a.get(px as usize, py as usize, pz as usize), b.get(px as usize, py as usize, pz as usize));
                        n += 1.0;
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let cov = sab - n * ma * mb;
            let va = saa - n * ma * ma;
            let vb = sbb - n * mb * mb;
            acc += (cov + LNCC_EPS) / ((va + LNCC_EPS) * (vb + LNCC_EPS)).sqrt();
        }
        1.0 - acc / d.len() as f64
    }

    #[test]
    fn lncc_matches_window_loop() {
        let d = Dims3::cube(8);
        let (a, b) = (rand_vol(d, 1), rand_vol(d, 2));
        let got = similarity_loss(&a, &b, SimilarityKind::Lncc).unwrap();
        assert!((got - lncc_oracle(&a, &b, 4)).abs() < 1e-5);
        assert!((0.0..=2.0).contains(&got));
    }

    #[test]
    fn similarity_extremes() {
        let d = Dims3::cube(8);
        let a = rand_vol(d, 3);
        let neg = Volume::new(d, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(similarity_loss(&a, &a, SimilarityKind::Lncc).unwrap().abs() < 1e-6);
        // Anticorrelation reaches 2 up to the epsilon smoothing of each window.
        assert!((similarity_loss(&a, &neg, SimilarityKind::Lncc).unwrap() - 2.0).abs() < 1e-4);
        assert_eq!(similarity_loss(&a, &a, SimilarityKind::Mse).unwrap(), 0.0);
        let flat = Volume::constant(d, 0.3).unwrap();
        assert!(similarity_loss(&flat, &flat, SimilarityKind::Lncc).unwrap().abs() < 1e-12);
        let other = rand_vol(Dims3::cube(4), 1);
        assert_eq!(similarity_loss(&a, &other, SimilarityKind::Mse).unwrap_err().kind(), "shape");
    }

    fn cube_labels(d: Dims3, lo: [usize; 3], side: usize, label: u32) -> LabelMap {
        let data = d
            .iter()
            .map(|(x, y, z)| {
                let inside = [x, y, z].iter().zip(lo).all(|(&p, l)| p >= l && p < l + side);
                if inside { label } else { 0 }
            })
            .collect();
        LabelMap::new(d, data).unwrap()
    }

    #[test]
    fn dice_loss_cases() {
        let d = Dims3::cube(8);
        let a = cube_labels(d, [0, 0, 0], 4, 1);
        let set = [1];
        assert_eq!(dice_loss(&a, &one_hot(&a, &set), &set).unwrap(), 0.0);
        let far = cube_labels(d, [4, 4, 4], 4, 1);
        assert_eq!(dice_loss(&a, &one_hot(&far, &set), &set).unwrap(), 1.0);
        // Shifted by half a side along x: 32 shared voxels of 64 each.
        let half = cube_labels(d, [2, 0, 0], 4, 1);
        assert!((dice_loss(&a, &one_hot(&half, &set), &set).unwrap() - 0.5).abs() < 1e-12);
        let two = one_hot(&a, &[1, 2]);
        assert_eq!(dice_loss(&a, &two, &set).unwrap_err().kind(), "config");
    }

    #[test]
    fn smoothness_cases() {
        let d = Dims3::new(5, 6, 7);
        assert_eq!(smoothness_loss(&DisplacementField::constant(d, 0, [1.5, -2.0, 0.3])), 0.0);
        let a = 0.7;
        let mut t = Tensor::zeros(d.shape_with_channels(3));
        for (x, y, z) in d.iter() {
            t.data_mut()[d.index(x, y, z)] = a * x as f64;
        }
        let ramp = DisplacementField::new(t, 0).unwrap();
        assert!((smoothness_loss(&ramp) - a * a).abs() < 1e-12);

        let f = DisplacementField::new(rand_tensor(&d.shape_with_channels(3), 4), 0).unwrap();
        let mut oracle = 0.0;
        for (axis, step) in [(0usize, [1, 0, 0]), (1, [0, 1, 0]), (2, [0, 0, 1])] {
            let (mut acc, mut n) = (0.0, 0.0);
            for (x, y, z) in d.iter() {
                let (qx, qy, qz) = (x + step[0], y + step[1], z + step[2]);
                if qx >= d.nx || qy >= d.ny || qz >= d.nz {
                    continue;
                }
                n += 1.0;
                for c in 0..3 {
                    acc += (f.at(qx, qy, qz)[c] - f.at(x, y, z)[c]).powi(2);
                }
            }
            let _ = axis;
            oracle += acc / n;
        }
        assert!((smoothness_loss(&f) - oracle).abs() < 1e-6);
    }

    #[test]
    fn loss_gradients() {
        let s = [1, 6, 6, 6];
        let a = rand_tensor(&s, 1);
        let b = rand_tensor(&s, 2);
        let lncc_err = check(&[a.clone(), b.clone()], |v| lncc(&v[0], &v[1], 2), 1e-5, 60);
        assert!(lncc_err < 1e-3, "lncc {lncc_err}");
        let mse_err = check(&[a.clone(), b.clone()], |v| mse(&v[0], &v[1]), 1e-5, 60);
        assert!(mse_err < 1e-3, "mse {mse_err}");
        let p = rand_tensor(&[2, 6, 6, 6], 3).map(|v| 0.5 + 0.5 * v);
        let q = rand_tensor(&[2, 6, 6, 6], 4).map(|v| 0.5 + 0.5 * v);
        let dice_err = check(&[p, q], |v| soft_dice(&v[0], &v[1]), 1e-5, 60);
        assert!(dice_err < 1e-3, "dice {dice_err}");
        let f = rand_tensor(&[3, 6, 6, 6], 5);
        let reg_err = check(&[f], |v| smoothness(&v[0]), 1e-5, 60);
        assert!(reg_err < 1e-3, "smoothness {reg_err}");
    }

    fn inputs(d: Dims3) -> LossInputs {
        let lt = cube_labels(d, [4, 4, 4], 8, 1);
        let ls = cube_labels(d, [5, 4, 4], 8, 1);
        LossInputs::new(&rand_vol(d, 1), &rand_vol(d, 2), Some((&lt, &ls)), &[1]).unwrap()
    }

    fn rand_field(d: Dims3, level: usize, seed: u64) -> DisplacementField {
        DisplacementField::new(rand_tensor(&d.at_level(level).shape_with_channels(3), seed).map(|v| 0.3 * v), level)
            .unwrap()
    }

    #[test]
    fn total_loss_structure() {
        let d = Dims3::cube(32);
        let inp = inputs(d);
        let w = LossWeights::default();
        let phi = rand_field(d, 1, 1);
        let per: Vec<DisplacementField> = [4, 3, 2, 1].iter().map(|&l| rand_field(d, l, l as u64 + 10)).collect();

        let single = total_loss(&inp, &phi, &[], &w).unwrap();
        assert!(single.levels.is_empty());
        assert_eq!(single.total, single.similarity + w.gamma * single.dice + w.lambda * single.smoothness);

        let full = total_loss(&inp, &phi, &per, &w).unwrap();
        assert_eq!(full.levels.iter().map(|l| l.level).collect::<Vec<_>>(), vec![4, 3, 2]);
        let l4 = &full.levels[0];
        assert_eq!(l4.scaled, l4.unscaled / 16.0);
        assert_eq!(full.recombine(&w), full.total);

        let bare = LossWeights { gamma: 0.0, lambda: 0.0, ..w };
        let only = total_loss(&inp, &phi, &[], &bare).unwrap();
        assert_eq!(only.total, only.similarity);

        assert!(total_loss(&inp, &per[0], &[], &w).is_err());
        assert!(LossWeights { gamma: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn perfect_alignment_is_near_zero() {
        let d = Dims3::cube(16);
        let v = rand_vol(d, 5);
        let l = cube_labels(d, [2, 2, 2], 8, 1);
        let inp = LossInputs::new(&v, &v, Some((&l, &l)), &[1]).unwrap();
        let b = total_loss(&inp, &DisplacementField::zeros(d.at_level(1), 1), &[], &LossWeights::default()).unwrap();
        assert!(b.total.abs() < 1e-6, "{b:?}");
    }

    #[test]
    fn toy_pipeline_field_gradients() {
        // Two pyramid levels on an 8^3 input: level-2 field upsampled and
        // composed with a level-1 residual, scored by the full objective.
        let d = Dims3::cube(8);
        let lt = cube_labels(d, [2, 2, 2], 4, 1);
        let ls = cube_labels(d, [3, 2, 2], 4, 1);
        let inp = LossInputs::new(&rand_vol(d, 1), &rand_vol(d, 2), Some((&lt, &ls)), &[1]).unwrap();
        let w = LossWeights::default();
        let coarse = rand_field(d, 2, 3).into_tensor();
        let fine = rand_field(d, 1, 4).into_tensor();
        let err = check(
            &[coarse, fine],
            |v| {
                let phi = crate::designs::compose(&crate::designs::upsample_field(&v[0]), &v[1]);
                total_loss_var(&inp, &phi, &[], &w).unwrap().0
            },
            1e-6,
            200,
        );
        assert!(err < 1e-3, "relative error {err}");
    }
}
