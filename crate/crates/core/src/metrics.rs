//! Evaluation metrics: Dice, HD90, Jacobian statistics, folding percentage
//! and mean displacement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{warp_nearest, DisplacementField, LabelMap};
use crate::tensor::Dims3;

/// Floor applied to determinants before taking logs.
pub const LOG_JAC_EPS: f64 = 1e-9;
/// Percentile used by HD90.
pub const HD_PERCENTILE: f64 = 90.0;

/// Per-label Dice `2|A∩B| / (|A|+|B|)`; labels absent from both maps are skipped.
pub fn dice_per_label(a: &LabelMap, b: &LabelMap) -> Result<Vec<(u32, f64)>> {
    same_dims(a.dims(), b.dims())?;
    let mut labels = a.label_set();
    labels.extend(b.label_set());
    labels.sort_unstable();
    labels.dedup();
    Ok(labels
        .into_iter()
        .map(|l| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&u, &v) in a.data().iter().zip(b.data()) {
                na += (u == l) as usize;
                nb += (v == l) as usize;
                both += (u == l && v == l) as usize;
            }
            (l, 2.0 * both as f64 / (na + nb) as f64)
        })
        .collect())
}

/// Mean Dice over anatomical labels. Two maps without any label score 1.
pub fn dice_score(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    let per = dice_per_label(a, b)?;
    if per.is_empty() {
        return Ok(1.0);
    }
    Ok(per.iter().map(|(_, d)| d).sum::<f64>() / per.len() as f64)
}

fn same_dims(a: Dims3, b: Dims3) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("label maps differ: {a} vs {b}")));
    }
    Ok(())
}

/// Linear-interpolation percentile of `values` (`p` in [0, 100]); rank
/// `p/100 * (n-1)` in the sorted list.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hd90 {
    pub value: f64,
    pub per_label: Vec<(u32, f64)>,
    /// Labels present in only one map, scored as the grid diagonal.
    pub flagged: Vec<u32>,
}

/// Voxels of `mask` with a 6-neighbour outside it (the grid edge counts as outside).
fn boundary(mask: &[bool], d: Dims3) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for (x, y, z) in d.iter() {
        let i = d.index(x, y, z);
        if !mask[i] {
            continue;
        }
        let edge = x == 0 || y == 0 || z == 0 || x + 1 == d.nx || y + 1 == d.ny || z + 1 == d.nz;
        out[i] = edge
            || !mask[i - 1]
            || !mask[i + 1]
            || !mask[i - d.nx]
            || !mask[i + d.nx]
            || !mask[i - d.nx * d.ny]
            || !mask[i + d.nx * d.ny];
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let w2 = w * w;
    let inter = |q: usize, p: usize| {
        ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q as f64 - p as f64))
    };
    let mut k = 0usize;
    let first = match (0..n).find(|&q| f[q].is_finite()) {
        Some(q) => q,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = w2 * dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` voxel.
fn squared_edt(features: &[bool], d: Dims3, spacing: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = features.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let dims = d.as_array();
    let strides = [1, d.nx, d.nx * d.ny];
    let longest = *dims.iter().max().expect("3 axes");
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        let st = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for j in 0..dims[others[1]] {
            for i in 0..dims[others[0]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for q in 0..n {
                    line[q] = g[base + q * st];
                }
                edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
                for q in 0..n {
                    g[base + q * st] = out[q];
                }
            }
        }
    }
    g
}

/// Bounding box (inclusive lo, exclusive hi) of the set voxels.
fn bbox(masks: &[&[bool]], d: Dims3) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (x, y, z) in d.iter() {
        let i = d.index(x, y, z);
        if masks.iter().any(|m| m[i]) {
            any = true;
            for (a, p) in [x, y, z].into_iter().enumerate() {
                lo[a] = lo[a].min(p);
                hi[a] = hi[a].max(p + 1);
            }
        }
    }
    any.then_some((lo, hi))
}

fn crop(mask: &[bool], d: Dims3, lo: [usize; 3], hi: [usize; 3]) -> (Vec<bool>, Dims3) {
    let c = Dims3::new(hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]);
    let out = c
        .iter()
        .map(|(x, y, z)| mask[d.index(x + lo[0], y + lo[1], z + lo[2])])
        .collect();
    (out, c)
}

/// Directed nearest boundary distances pooled in both directions, for one label.
fn boundary_distances(a: &[bool], b: &[bool], d: Dims3, spacing: [f64; 3]) -> Vec<f64> {
    let (ba, bb) = (boundary(a, d), boundary(b, d));
    let (lo, hi) = bbox(&[&ba, &bb], d).expect("both boundaries nonempty");
    let (ca, c) = crop(&ba, d, lo, hi);
    let (cb, _) = crop(&bb, d, lo, hi);
    let (da, db) = (squared_edt(&ca, c, spacing), squared_edt(&cb, c, spacing));
    let mut out = Vec::new();
    for i in 0..c.len() {
        if ca[i] {
            out.push(db[i].sqrt());
        }
        if cb[i] {
            out.push(da[i].sqrt());
        }
    }
    out
}

/// HD90 in physical units given `spacing` (use `[1.0; 3]` for voxels).
pub fn hd90_with_spacing(a: &LabelMap, b: &LabelMap, spacing: [f64; 3]) -> Result<Hd90> {
    same_dims(a.dims(), b.dims())?;
    let d = a.dims();
    let diagonal = d
        .as_array()
        .iter()
        .zip(spacing)
        .map(|(&n, s)| ((n - 1) as f64 * s).powi(2))
        .sum::<f64>()
        .sqrt();
    let (sa, sb) = (a.label_set(), b.label_set());
    let mut labels = sa.clone();
    labels.extend(&sb);
    labels.sort_unstable();
    labels.dedup();
    let mut per_label = Vec::new();
    let mut flagged = Vec::new();
    for l in labels {
        let (ina, inb) = (sa.binary_search(&l).is_ok(), sb.binary_search(&l).is_ok());
        if ina != inb {
            flagged.push(l);
            per_label.push((l, diagonal));
            continue;
        }
        let ma: Vec<bool> = a.data().iter().map(|&v| v == l).collect();
        let mb: Vec<bool> = b.data().iter().map(|&v| v == l).collect();
        let mut dist = boundary_distances(&ma, &mb, d, spacing);
        per_label.push((l, percentile(&mut dist, HD_PERCENTILE)));
    }
    let value = if per_label.is_empty() {
        0.0
    } else {
        per_label.iter().map(|(_, v)| v).sum::<f64>() / per_label.len() as f64
    };
    Ok(Hd90 { value, per_label, flagged })
}

/// HD90 in voxels.
pub fn hd90(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    hd90_with_spacing(a, b, [1.0; 3]).map(|h| h.value)
}

/// Per-voxel Jacobian determinant of `x + phi(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    pub dims: Dims3,
    pub data: Vec<f64>,
}

/// Derivative of channel `c` along `axis` at voxel `(x,y,z)`: central in the
/// interior, one-sided at the borders.
fn deriv(f: &DisplacementField, p: [usize; 3], axis: usize, c: usize) -> f64 {
    let d = f.dims();
    let n = d.as_array()[axis];
    let at = |q: [usize; 3]| f.tensor().data()[c * d.len() + d.index(q[0], q[1], q[2])];
    let mut lo = p;
    let mut hi = p;
    if p[axis] > 0 {
        lo[axis] -= 1;
    }
    if p[axis] + 1 < n {
        hi[axis] += 1;
    }
    let span = (hi[axis] - lo[axis]) as f64;
    if span == 0.0 {
        return 0.0;
    }
    (at(hi) - at(lo)) / span
}

pub fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn jacobian_map(field: &DisplacementField) -> JacobianMap {
    let d = field.dims();
    let data = d
        .iter()
        .map(|(x, y, z)| {
            let mut m = [[0.0; 3]; 3];
            for (c, row) in m.iter_mut().enumerate() {
                for (a, e) in row.iter_mut().enumerate() {
                    *e = deriv(field, [x, y, z], a, c) + if a == c { 1.0 } else { 0.0 };
                }
            }
            det3(m)
        })
        .collect();
    JacobianMap { dims: d, data }
}

fn check_mask(mask: &[bool], n: usize) -> Result<usize> {
    if mask.len() != n {
        return Err(Error::shape(format!("mask has {} voxels, grid has {n}", mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::value("mask is empty"));
    }
    Ok(count)
}

/// Population standard deviation of `ln(max(det, eps))` over the mask.
pub fn sdlogj(jac: &JacobianMap, mask: &[bool]) -> Result<f64> {
    let n = check_mask(mask, jac.data.len())? as f64;
    let logs = || jac.data.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v.max(LOG_JAC_EPS).ln());
    let mean = logs().sum::<f64>() / n;
    Ok((logs().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdvMode {
    /// Any forward/backward difference combination with det <= 0.
    #[default]
    Simplex,
    /// Central-difference det <= 0.
    Central,
}

/// Percentage of masked voxels that fold.
pub fn ndv_pct(field: &DisplacementField, mask: &[bool], mode: NdvMode) -> Result<f64> {
    let d = field.dims();
    let n = check_mask(mask, d.len())? as f64;
    let folded = match mode {
        NdvMode::Central => {
            let jac = jacobian_map(field);
            jac.data.iter().zip(mask).filter(|(&v, &m)| m && v <= 0.0).count()
        }
        NdvMode::Simplex => d
            .iter()
            .filter(|&(x, y, z)| mask[d.index(x, y, z)] && simplex_folds(field, [x, y, z]))
            .count(),
    };
    Ok(100.0 * folded as f64 / n)
}

/// True when any available one-sided difference combination has det <= 0.
fn simplex_folds(f: &DisplacementField, p: [usize; 3]) -> bool {
    let d = f.dims();
    let dims = d.as_array();
    let val = |q: [usize; 3], c: usize| f.tensor().data()[c * d.len() + d.index(q[0], q[1], q[2])];
    // Column `a` for direction `s` (+1 forward, -1 backward), if it exists.
    let column = |a: usize, s: i64| -> Option<[f64; 3]> {
        let mut q = p;
        if s > 0 {
            if p[a] + 1 >= dims[a] {
                return None;
            }
            q[a] += 1;
        } else {
            if p[a] == 0 {
                return None;
            }
            q[a] -= 1;
        }
        let sign = s as f64;
        Some([0, 1, 2].map(|c| sign * (val(q, c) - val(p, c)) + if a == c { 1.0 } else { 0.0 }))
    };
    let cols: Vec<Vec<[f64; 3]>> = (0..3)
        .map(|a| [1, -1].iter().filter_map(|&s| column(a, s)).collect())
        .collect();
    if cols.iter().any(Vec::is_empty) {
        return false;
    }
    for cx in &cols[0] {
        for cy in &cols[1] {
            for cz in &cols[2] {
                let m = [[cx[0], cy[0], cz[0]], [cx[1], cy[1], cz[1]], [cx[2], cy[2], cz[2]]];
                if det3(m) <= 0.0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Mean displacement magnitude over the mask (voxels).
pub fn mean_disp(field: &DisplacementField, mask: &[bool]) -> Result<f64> {
    let d = field.dims();
    let n = check_mask(mask, d.len())? as f64;
    let t = field.tensor().data();
    let total: f64 = (0..d.len())
        .filter(|&i| mask[i])
        .map(|i| (0..3).map(|c| t[c * d.len() + i].powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / n)
}

/// Union of all anatomical labels.
pub fn brain_mask(labels: &LabelMap) -> Vec<bool> {
    labels.data().iter().map(|&l| l != 0).collect()
}

/// Metrics of one registered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub variant: String,
    #[serde(deserialize_with = "nan_from_null")]
    pub dsc: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub hd90: f64,
    /// Raw value; tables report it scaled by 100.
    #[serde(deserialize_with = "nan_from_null")]
    pub sdlogj: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub ndv_pct: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub ndv_central_pct: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub mean_disp: f64,
    pub hd90_flagged: Vec<u32>,
    /// Mean distance to a known ground-truth field, when one exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_error: Option<f64>,
}

/// Score a full-resolution field: warp the source labels with nearest
/// neighbour and compare against the target; Jacobian terms use the target's
/// brain mask.
pub fn evaluate_pair(
    pair_id: &str,
    variant: &str,
    target: &LabelMap,
    source: &LabelMap,
    field: &DisplacementField,
    spacing: [f64; 3],
) -> Result<PairMetrics> {
    if field.level() != 0 || field.dims() != target.dims() {
        return Err(Error::shape(format!(
            "metrics need a full-resolution field on {}, got level {} on {}",
            target.dims(),
            field.level(),
            field.dims()
        )));
    }
    let warped = warp_nearest(source, field)?;
    let hd = hd90_with_spacing(target, &warped, spacing)?;
    let mask = brain_mask(target);
    let jac = jacobian_map(field);
    Ok(PairMetrics {
        pair_id: pair_id.to_string(),
        variant: variant.to_string(),
        dsc: dice_score(target, &warped)?,
        hd90: hd.value,
        sdlogj: sdlogj(&jac, &mask)?,
        ndv_pct: ndv_pct(field, &mask, NdvMode::Simplex)?,
        ndv_central_pct: ndv_pct(field, &mask, NdvMode::Central)?,
        mean_disp: mean_disp(field, &mask)?,
        hd90_flagged: hd.flagged,
        endpoint_error: None,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(deserialize_with = "nan_from_null")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub sd: f64,
}

/// JSON writes NaN as `null`; read it back as NaN.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, sd }
    }
}

/// Aggregate over pairs; `sdlogj` is reported scaled by 100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub pairs: usize,
    pub dsc: Stat,
    pub hd90: Stat,
    pub sdlogj: Stat,
    pub ndv_pct: Stat,
    pub ndv_central_pct: Stat,
    pub mean_disp: Stat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_error: Option<Stat>,
}

impl MetricsReport {
    pub fn from_pairs(variant: &str, pairs: &[PairMetrics]) -> Self {
        let col = |f: fn(&PairMetrics) -> f64| Stat::of(&pairs.iter().map(f).collect::<Vec<_>>());
        Self {
            variant: variant.to_string(),
            pairs: pairs.len(),
            dsc: col(|p| p.dsc),
            hd90: col(|p| p.hd90),
            sdlogj: col(|p| p.sdlogj * 100.0),
            ndv_pct: col(|p| p.ndv_pct),
            ndv_central_pct: col(|p| p.ndv_central_pct),
            mean_disp: col(|p| p.mean_disp),
            endpoint_error: pairs
                .iter()
                .map(|p| p.endpoint_error)
                .collect::<Option<Vec<f64>>>()
                .filter(|v| !v.is_empty())
                .map(|v| Stat::of(&v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::rand_tensor;
    use crate::tensor::Tensor;

    fn labels(d: Dims3, f: impl Fn(usize, usize, usize) -> u32) -> LabelMap {
        LabelMap::new(d, d.iter().map(|(x, y, z)| f(x, y, z)).collect()).unwrap()
    }

    fn cube(d: Dims3, lo: [usize; 3], side: usize, l: u32) -> LabelMap {
        labels(d, |x, y, z| {
            let inside = [x, y, z].iter().zip(lo).all(|(&p, a)| p >= a && p < a + side);
            if inside { l } else { 0 }
        })
    }

    #[test]
    fn dice_cases() {
        let d = Dims3::cube(8);
        let a = cube(d, [0, 0, 0], 4, 1);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &cube(d, [4, 4, 4], 4, 1)).unwrap(), 0.0);
        // Overlap is a 4x4x2 slab.
        let b = cube(d, [0, 0, 2], 4, 1);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&b, &a).unwrap(), dice_score(&a, &b).unwrap());
        // A label present in neither map does not count.
        let c = cube(d, [0, 0, 0], 4, 3);
        assert_eq!(dice_per_label(&c, &c).unwrap(), vec![(3, 1.0)]);
    }

    #[test]
    fn percentile_rule_is_linear() {
        let mut v: Vec<f64> = (0..10).map(f64::from).collect();
        assert!((percentile(&mut v, 90.0) - 8.1).abs() < 1e-12);
        assert_eq!(percentile(&mut [5.0], 90.0), 5.0);
    }

    #[test]
    fn edt_matches_brute_force() {
        let d = Dims3::new(7, 5, 6);
        let t = rand_tensor(&[d.len()], 3);
        let feat: Vec<bool> = t.data().iter().map(|v| *v > 0.8).collect();
        let sp = [1.0, 1.5, 0.7];
        let got = squared_edt(&feat, d, sp);
        for (x, y, z) in d.iter() {
            let mut best = f64::INFINITY;
            for (u, v, w) in d.iter() {
                if feat[d.index(u, v, w)] {
                    let dd = ((x as f64 - u as f64) * sp[0]).powi(2)
                        + ((y as f64 - v as f64) * sp[1]).powi(2)
                        + ((z as f64 - w as f64) * sp[2]).powi(2);
                    best = best.min(dd);
                }
            }
            assert!((got[d.index(x, y, z)] - best).abs() < 1e-9);
        }
    }

    #[test]
    fn hd90_cases() {
        let d = Dims3::cube(8);
        let a = cube(d, [1, 1, 1], 1, 2);
        let b = cube(d, [3, 1, 1], 1, 2);
        assert_eq!(hd90(&a, &b).unwrap(), 2.0);
        let big = cube(d, [1, 2, 1], 5, 1);
        assert_eq!(hd90(&big, &big).unwrap(), 0.0);
        let h = hd90_with_spacing(&a, &big, [1.0; 3]).unwrap();
        assert_eq!(h.flagged, vec![1, 2]);
        assert!((h.value - (3.0f64 * 49.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hd90_matches_pairwise_oracle() {
        let d = Dims3::cube(9);
        let a = labels(d, |x, y, z| ((x as f64 - 4.0).powi(2) + (y as f64 - 4.0).powi(2) + (z as f64 - 4.0).powi(2) <= 9.0) as u32);
        let b = cube(d, [2, 3, 2], 5, 1);
        let ma: Vec<bool> = a.data().iter().map(|&v| v == 1).collect();
        let mb: Vec<bool> = b.data().iter().map(|&v| v == 1).collect();
        let (ba, bb) = (boundary(&ma, d), boundary(&mb, d));
        let pts = |m: &[bool]| -> Vec<[f64; 3]> {
            d.iter().filter(|&(x, y, z)| m[d.index(x, y, z)]).map(|(x, y, z)| [x as f64, y as f64, z as f64]).collect()
        };
        let (pa, pb) = (pts(&ba), pts(&bb));
        let near = |p: &[f64; 3], set: &[[f64; 3]]| {
            set.iter().map(|q| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>().sqrt()).fold(f64::INFINITY, f64::min)
        };
        let mut all: Vec<f64> = pa.iter().map(|p| near(p, &pb)).chain(pb.iter().map(|p| near(p, &pa))).collect();
        all.sort_by(f64::total_cmp);
        let rank = 0.9 * (all.len() - 1) as f64;
        let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
        let want = all[lo] + (rank - lo as f64) * (all[hi] - all[lo]);
        assert!((hd90(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    fn affine(d: Dims3, m: [[f64; 3]; 3]) -> DisplacementField {
        let mut t = Tensor::zeros(d.shape_with_channels(3));
        for (x, y, z) in d.iter() {
            for c in 0..3 {
                t.data_mut()[c * d.len() + d.index(x, y, z)] = m[c][0] * x as f64 + m[c][1] * y as f64 + m[c][2] * z as f64;
            }
        }
        DisplacementField::new(t, 0).unwrap()
    }

    #[test]
    fn jacobian_suite() {
        let d = Dims3::cube(6);
        let mask = vec![true; d.len()];
        let zero = DisplacementField::zeros(d, 0);
        let jac = jacobian_map(&zero);
        assert!(jac.data.iter().all(|&v| v == 1.0));
        assert_eq!(sdlogj(&jac, &mask).unwrap(), 0.0);
        assert_eq!(ndv_pct(&zero, &mask, NdvMode::Simplex).unwrap(), 0.0);

        let (a, b, c) = (0.2, -0.3, 0.5);
        let lin = affine(d, [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]);
        let want = (1.0 + a) * (1.0 + b) * (1.0 + c);
        assert!(jacobian_map(&lin).data.iter().all(|v| (v - want).abs() < 1e-6));
        assert!(sdlogj(&jacobian_map(&lin), &mask).unwrap() < 1e-12);

        let fold = affine(d, [[-2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(ndv_pct(&fold, &mask, NdvMode::Simplex).unwrap(), 100.0);
        assert_eq!(ndv_pct(&fold, &mask, NdvMode::Central).unwrap(), 100.0);
        assert!(sdlogj(&jac, &vec![false; d.len()]).is_err());
    }

    #[test]
    fn sdlogj_two_regions() {
        let e = std::f64::consts::E;
        let jac = JacobianMap { dims: Dims3::new(2, 2, 2), data: vec![e, e, e, e, 1.0 / e, 1.0 / e, 1.0 / e, 1.0 / e] };
        assert!((sdlogj(&jac, &[true; 8]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_loop_oracle() {
        let d = Dims3::new(6, 7, 5);
        let f = DisplacementField::new(rand_tensor(&d.shape_with_channels(3), 8).map(|v| 0.4 * v), 0).unwrap();
        let jac = jacobian_map(&f);
        let dims = [d.nx, d.ny, d.nz];
        for (x, y, z) in d.iter() {
            let p = [x as i64, y as i64, z as i64];
            let mut m = [[0.0f64; 3]; 3];
            for a in 0..3 {
                let (mut lo, mut hi) = (p, p);
                lo[a] = (p[a] - 1).max(0);
                hi[a] = (p[a] + 1).min(dims[a] as i64 - 1);
                for c in 0..3 {
                    let g = |q: [i64; 3]| f.at(q[0] as usize, q[1] as usize, q[2] as usize)[c];
                    m[c][a] = (g(hi) - g(lo)) / (hi[a] - lo[a]) as f64 + (a == c) as u8 as f64;
                }
            }
            // Rule of Sarrus.
            let det = m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1]
                - m[0][2] * m[1][1] * m[2][0]
                - m[0][0] * m[1][2] * m[2][1]
                - m[0][1] * m[1][0] * m[2][2];
            assert!((jac.data[d.index(x, y, z)] - det).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_disp_and_report() {
        let d = Dims3::cube(4);
        let f = DisplacementField::constant(d, 0, [3.0, 4.0, 0.0]);
        assert_eq!(mean_disp(&f, &vec![true; d.len()]).unwrap(), 5.0);
        let p = |v| PairMetrics {
            pair_id: "a".into(),
            variant: "VXM".into(),
            dsc: v,
            hd90: 1.0,
            sdlogj: 0.01,
            ndv_pct: 0.0,
            ndv_central_pct: 0.0,
            mean_disp: 0.0,
            hd90_flagged: vec![],
            endpoint_error: None,
        };
        let r = MetricsReport::from_pairs("VXM", &[p(0.6), p(0.8)]);
        assert!((r.dsc.mean - 0.7).abs() < 1e-12 && (r.dsc.sd - 0.1).abs() < 1e-12);
        assert!((r.sdlogj.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_identity_pair() {
        let d = Dims3::cube(8);
        let l = cube(d, [2, 2, 2], 4, 5);
        let m = evaluate_pair("p", "affine", &l, &l, &DisplacementField::zeros(d, 0), [1.0; 3]).unwrap();
        assert_eq!((m.dsc, m.hd90, m.sdlogj, m.ndv_pct, m.mean_disp), (1.0, 0.0, 0.0, 0.0, 0.0));
        assert!(evaluate_pair("p", "x", &l, &l, &DisplacementField::zeros(d.halved(), 1), [1.0; 3]).is_err());
    }
}
