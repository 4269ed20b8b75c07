//! Grid types and the resampling operations shared by every module.
//!
//! Conventions: voxel centers sit at integer coordinates, `x` (the named
//! axis H) varies fastest in memory, and out-of-range samples replicate the
//! border. Displacements are stored in voxels of their own pyramid level.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling;
use crate::tensor::{Dims3, Tensor};

/// Dense scalar image with normalized intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    dims: Dims3,
    data: Vec<f64>,
    spacing: [f64; 3],
}

impl Volume {
    /// Checks extents (each at least 2), length and finiteness.
    pub fn new(dims: Dims3, data: Vec<f64>) -> Result<Self> {
        if dims.as_array().iter().any(|&n| n < 2) {
            return Err(Error::shape(format!("volume extents must be at least 2, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "volume {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::value(format!("non-finite intensity at flat index {i}")));
        }
        Ok(Self { dims, data, spacing: [1.0; 3] })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::value(format!("invalid spacing {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn constant(dims: Dims3, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    /// True when every intensity lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// `[1, nz, ny, nx]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.dims.shape_with_channels(1), self.data.clone())
    }

    /// Build from a single-channel tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.dims3()?;
        if t.channels() != 1 {
            return Err(Error::shape(format!("volume tensor must have 1 channel, got {}", t.channels())));
        }
        Self::new(d, t.data().to_vec())
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Integer label grid. Label 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    dims: Dims3,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: Dims3, data: Vec<u32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::shape("label map extents must be positive"));
        }
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "label map {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Sorted anatomical labels present (background excluded).
    pub fn label_set(&self) -> Vec<u32> {
        self.data
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Shape error unless extents equal `other`'s.
    pub fn check_pairs_with(&self, v: &Volume) -> Result<()> {
        if self.dims != v.dims() {
            return Err(Error::shape(format!(
                "label map {} does not match volume {}",
                self.dims,
                v.dims()
            )));
        }
        Ok(())
    }
}

/// Dense 3-vector displacement `(dx, dy, dz)` in voxels of `level`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    data: Tensor,
    level: usize,
}

impl DisplacementField {
    /// `data` must be `[3, nz, ny, nx]` and finite.
    pub fn new(data: Tensor, level: usize) -> Result<Self> {
        data.dims3()?;
        if data.channels() != 3 {
            return Err(Error::shape(format!(
                "displacement field needs 3 channels, got {}",
                data.channels()
            )));
        }
        if !data.all_finite() {
            return Err(Error::value("displacement field contains non-finite values"));
        }
        Ok(Self { data, level })
    }

    pub fn zeros(dims: Dims3, level: usize) -> Self {
        Self { data: Tensor::zeros(dims.shape_with_channels(3)), level }
    }

    /// Same vector `v` at every voxel.
    pub fn constant(dims: Dims3, level: usize, v: [f64; 3]) -> Self {
        let mut data = Tensor::zeros(dims.shape_with_channels(3));
        for (a, &va) in v.iter().enumerate() {
            data.channel_mut(a).iter_mut().for_each(|x| *x = va);
        }
        Self { data, level }
    }

    pub fn dims(&self) -> Dims3 {
        self.data.dims3().expect("validated at construction")
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Displacement vector at a voxel.
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let d = self.dims();
        let i = d.index(x, y, z);
        let n = d.len();
        let v = self.data.data();
        [v[i], v[n + i], v[2 * n + i]]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.max_abs()
    }

    /// Mean Euclidean length of the displacement vectors.
    pub fn mean_norm(&self) -> f64 {
        let d = self.dims();
        let n = d.len();
        let v = self.data.data();
        (0..n)
            .map(|i| (v[i].powi(2) + v[n + i].powi(2) + v[2 * n + i].powi(2)).sqrt())
            .sum::<f64>()
            / n as f64
    }
}

/// C-channel feature grid at a pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    data: Tensor,
    level: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, level: usize) -> Result<Self> {
        data.dims3()?;
        if data.channels() == 0 {
            return Err(Error::shape("feature map needs at least one channel"));
        }
        Ok(Self { data, level })
    }

    /// Also checks the extents against the full-resolution grid.
    pub fn new_checked(data: Tensor, level: usize, full: Dims3) -> Result<Self> {
        let fm = Self::new(data, level)?;
        let want = full.at_level(level);
        if fm.dims() != want {
            return Err(Error::shape(format!(
                "feature map at level {level} should be {want}, got {}",
                fm.dims()
            )));
        }
        Ok(fm)
    }

    pub fn dims(&self) -> Dims3 {
        self.data.dims3().expect("validated at construction")
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

fn check_extents(what: &str, a: Dims3, b: Dims3) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: extents {a} and {b} differ")));
    }
    Ok(())
}

/// Zero displacement at full resolution.
pub fn identity_grid(dims: Dims3) -> Result<DisplacementField> {
    if dims.is_empty() {
        return Err(Error::shape(format!("extents must be positive, got {dims}")));
    }
    Ok(DisplacementField::zeros(dims, 0))
}

/// Trilinear warp: output voxel `x` samples the source at `x + field(x)`.
pub fn warp_trilinear(source: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_extents("warp_trilinear", source.dims(), field.dims())?;
    let out = sampling::warp_channels(source.data(), 1, field.tensor().data(), source.dims());
    Ok(Volume { dims: source.dims(), data: out, spacing: source.spacing })
}

/// Nearest-neighbour warp of labels.
pub fn warp_nearest(labels: &LabelMap, field: &DisplacementField) -> Result<LabelMap> {
    check_extents("warp_nearest", labels.dims(), field.dims())?;
    let out = sampling::warp_nearest_labels(labels.data(), field.tensor().data(), labels.dims());
    Ok(LabelMap { dims: labels.dims(), data: out })
}

/// Channel-wise trilinear warp of a feature map.
pub fn warp_features(f: &FeatureMap, field: &DisplacementField) -> Result<FeatureMap> {
    check_extents("warp_features", f.dims(), field.dims())?;
    if f.level() != field.level() {
        return Err(Error::shape(format!(
            "warp_features: feature level {} vs field level {}",
            f.level(),
            field.level()
        )));
    }
    let out = sampling::warp_channels(f.tensor().data(), f.channels(), field.tensor().data(), f.dims());
    FeatureMap::new(Tensor::from_parts(f.tensor().shape().to_vec(), out), f.level())
}

/// Resample a field to `new_level`, doubling or halving extents per level
/// step, and rescale vectors by `2^(level - new_level)`.
pub fn resize_field(field: &DisplacementField, new_level: usize) -> DisplacementField {
    let mut d = field.dims();
    if new_level < field.level() {
        for _ in new_level..field.level() {
            d = d.doubled();
        }
    } else {
        d = d.at_level(new_level - field.level());
    }
    resize_field_to(field, new_level, d)
}

/// Like [`resize_field`] with explicit target extents.
pub fn resize_field_to(field: &DisplacementField, new_level: usize, dims: Dims3) -> DisplacementField {
    if new_level == field.level() && dims == field.dims() {
        return field.clone();
    }
    let factor = 2f64.powi(field.level() as i32 - new_level as i32);
    let data = sampling::resample_channels(field.tensor().data(), 3, field.dims(), dims);
    DisplacementField {
        data: Tensor::from_parts(dims.shape_with_channels(3), data.into_iter().map(|v| v * factor).collect()),
        level: new_level,
    }
}

/// `result(x) = inner(x) + outer(x + inner(x))`. Warping once with the result
/// equals warping with `outer` first and then with `inner`, i.e.
/// `warp(V, compose(outer, inner)) ~ warp(warp(V, outer), inner)`.
pub fn compose_fields(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    check_extents("compose_fields", outer.dims(), inner.dims())?;
    if outer.level() != inner.level() {
        return Err(Error::shape(format!(
            "compose_fields: levels {} and {} differ",
            outer.level(),
            inner.level()
        )));
    }
    let d = inner.dims();
    let mut out = sampling::warp_channels(outer.tensor().data(), 3, inner.tensor().data(), d);
    for (o, i) in out.iter_mut().zip(inner.tensor().data()) {
        *o += i;
    }
    DisplacementField::new(Tensor::from_parts(d.shape_with_channels(3), out), inner.level())
}

/// Mean over 2x2x2 blocks (partial blocks at odd edges average what exists).
pub(crate) fn avg_pool2(data: &[f64], channels: usize, d: Dims3) -> (Vec<f64>, Dims3) {
    let o = d.halved();
    let (n, no) = (d.len(), o.len());
    let mut out = vec![0.0; channels * no];
    for ch in 0..channels {
        let s = &data[ch * n..(ch + 1) * n];
        for (ox, oy, oz) in o.iter() {
            let (mut acc, mut cnt) = (0.0, 0usize);
            for z in 2 * oz..(2 * oz + 2).min(d.nz) {
                for y in 2 * oy..(2 * oy + 2).min(d.ny) {
                    for x in 2 * ox..(2 * ox + 2).min(d.nx) {
                        acc += s[d.index(x, y, z)];
                        cnt += 1;
                    }
                }
            }
            out[ch * no + o.index(ox, oy, oz)] = acc / cnt as f64;
        }
    }
    (out, o)
}

/// Repeated 2x average pooling down to `level`.
pub(crate) fn avg_pool_levels(data: &[f64], channels: usize, d: Dims3, level: usize) -> (Vec<f64>, Dims3) {
    let mut cur = (data.to_vec(), d);
    for _ in 0..level {
        cur = avg_pool2(&cur.0, channels, cur.1);
    }
    cur
}

/// Average-pool a volume by `2^level`. Fails when the result would have an
/// extent below 2.
pub fn downsample_volume(v: &Volume, level: usize) -> Result<Volume> {
    if level == 0 {
        return Ok(v.clone());
    }
    let (data, d) = avg_pool_levels(v.data(), 1, v.dims(), level);
    if d.as_array().iter().any(|&n| n < 2) {
        return Err(Error::shape(format!(
            "downsampling {} to level {level} gives {d}, below the minimum extent of 2",
            v.dims()
        )));
    }
    // Averages of values in [0, 1] can round a hair outside; clamp back.
    let (lo, hi) = v.min_max();
    let data = data.into_iter().map(|x| x.clamp(lo, hi)).collect();
    Ok(Volume { dims: d, data, spacing: v.spacing.map(|s| s * 2f64.powi(level as i32)) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_validate() {
        assert!(Volume::new(Dims3::new(1, 4, 4), vec![0.0; 16]).is_err());
        assert!(Volume::new(Dims3::cube(2), vec![0.0; 7]).is_err());
        assert!(Volume::new(Dims3::cube(2), vec![f64::NAN; 8]).is_err());
        assert!(DisplacementField::new(Tensor::zeros(vec![2, 2, 2, 2]), 0).is_err());
        assert!(identity_grid(Dims3::new(0, 2, 2)).is_err());
        let l = LabelMap::new(Dims3::cube(2), vec![0, 3, 1, 3, 0, 0, 2, 1]).unwrap();
        assert_eq!(l.label_set(), vec![1, 2, 3]);
    }

    #[test]
    fn same_level_resize_is_identity() {
        let f = DisplacementField::constant(Dims3::cube(3), 1, [0.3, -1.0, 2.0]);
        assert_eq!(resize_field(&f, 1), f);
    }
}
