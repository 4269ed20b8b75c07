//! Feature correlation volumes: scaled inner products between a target
//! feature vector and source feature vectors at displaced positions.

use super::linalg::{gemm, Mat};
use super::Var;
use crate::tensor::{Dims3, Tensor};

fn check_pair(ft: &Var, fs: &Var) -> (Dims3, usize) {
    assert_eq!(ft.shape(), fs.shape(), "correlation: feature maps differ in shape");
    let d = ft.value().dims3().expect("correlation: expected [C, nz, ny, nx]");
    (d, ft.value().channels())
}

/// Neighbourhood offsets `(dx, dy, dz)` in channel order (dx fastest).
pub(crate) fn offsets(radius: usize) -> Vec<(isize, isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                out.push((dx, dy, dz));
            }
        }
    }
    out
}

/// For each offset, the pairs (target voxel, source voxel) that stay in range.
fn offset_pairs(d: Dims3, radius: usize) -> Vec<Vec<(usize, usize)>> {
    offsets(radius)
        .into_iter()
        .map(|(dx, dy, dz)| {
            let mut pairs = Vec::new();
            for (x, y, z) in d.iter() {
                let (sx, sy, sz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if sx >= 0
                    && sy >= 0
                    && sz >= 0
                    && (sx as usize) < d.nx
                    && (sy as usize) < d.ny
                    && (sz as usize) < d.nz
                {
                    pairs.push((d.index(x, y, z), d.index(sx as usize, sy as usize, sz as usize)));
                }
            }
            pairs
        })
        .collect()
}

/// Local correlation: `out[k, x] = (1/N) <f_t(x), f_s(x + delta_k)>` over the
/// `(2r+1)^3` offsets, with zeros where `x + delta_k` leaves the grid.
pub fn correlation_local(ft: &Var, fs: &Var, radius: usize) -> Var {
    let (d, c) = check_pair(ft, fs);
    let n = d.len();
    let pairs = offset_pairs(d, radius);
    let k = pairs.len();
    let inv = 1.0 / c as f64;
    let (t, s) = (ft.value().data(), fs.value().data());
    let mut out = vec![0.0; k * n];
    for (ki, pk) in pairs.iter().enumerate() {
        let o = &mut out[ki * n..(ki + 1) * n];
        for ch in 0..c {
            let (tc, sc) = (&t[ch * n..(ch + 1) * n], &s[ch * n..(ch + 1) * n]);
            for &(i, j) in pk {
                o[i] += tc[i] * sc[j];
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    let (tv, sv) = (ft.clone(), fs.clone());
    let shape = ft.shape().to_vec();
    Var::from_op(Tensor::from_parts(d.shape_with_channels(k), out), &[ft, fs], move |g| {
        let (t, s) = (tv.value().data(), sv.value().data());
        let mut gt = tv.requires_grad().then(|| vec![0.0; c * n]);
        let mut gs = sv.requires_grad().then(|| vec![0.0; c * n]);
        for (ki, pk) in pairs.iter().enumerate() {
            let gk = &g.data()[ki * n..(ki + 1) * n];
            for ch in 0..c {
                let off = ch * n;
                for &(i, j) in pk {
                    let gv = gk[i] * inv;
                    if let Some(gt) = gt.as_mut() {
                        gt[off + i] += gv * s[off + j];
                    }
                    if let Some(gs) = gs.as_mut() {
                        gs[off + j] += gv * t[off + i];
                    }
                }
            }
        }
        vec![
            gt.map(|v| Tensor::from_parts(shape.clone(), v)),
            gs.map(|v| Tensor::from_parts(shape.clone(), v)),
        ]
    })
}

/// Global correlation: channel `u` (a source voxel in memory order) at target
/// voxel `x` holds `(1/N) <f_t(x), f_s(u)>`. Output is `[|D|, D]`.
pub fn correlation_global(ft: &Var, fs: &Var) -> Var {
    let (d, c) = check_pair(ft, fs);
    let n = d.len();
    let inv = 1.0 / c as f64;
    let mut out = vec![0.0; n * n];
    // out[u, x] = sum_c fs[c, u] ft[c, x]
    gemm(n, c, n, inv, Mat::rm_t(fs.value().data(), n), Mat::rm(ft.value().data(), n), 0.0, &mut out);
    let (tv, sv) = (ft.clone(), fs.clone());
    let shape = ft.shape().to_vec();
    Var::from_op(Tensor::from_parts(d.shape_with_channels(n), out), &[ft, fs], move |g| {
        // g is [u, x]; d ft[c, x] = sum_u fs[c, u] g[u, x]; d fs[c, u] = sum_x ft[c, x] g[u, x]
        let gt = tv.requires_grad().then(|| {
            let mut v = vec![0.0; c * n];
            gemm(c, n, n, inv, Mat::rm(sv.value().data(), n), Mat::rm(g.data(), n), 0.0, &mut v);
            Tensor::from_parts(shape.clone(), v)
        });
        let gs = sv.requires_grad().then(|| {
            let mut v = vec![0.0; c * n];
            gemm(c, n, n, inv, Mat::rm(tv.value().data(), n), Mat::rm_t(g.data(), n), 0.0, &mut v);
            Tensor::from_parts(shape.clone(), v)
        });
        vec![gt, gs]
    })
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check, rand_tensor};
    use super::super::{mul, sum};
    use super::*;

    #[test]
    fn center_channel_is_self_product() {
        let f = rand_tensor(&[4, 3, 3, 3], 1);
        let v = Var::constant(f.clone());
        let out = correlation_local(&v, &v, 1);
        assert_eq!(out.shape(), &[27, 3, 3, 3]);
        let center = out.value().channel(13);
        for i in 0..27 {
            let want: f64 = (0..4).map(|c| f.data()[c * 27 + i].powi(2)).sum::<f64>() / 4.0;
            assert!((center[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_gradients() {
        let a = rand_tensor(&[3, 3, 4, 3], 2);
        let b = rand_tensor(&[3, 3, 4, 3], 3);
        let w = Var::constant(rand_tensor(&[27, 3, 4, 3], 4));
        let err = check(&[a.clone(), b.clone()], |v| sum(&mul(&correlation_local(&v[0], &v[1], 1), &w)), 1e-4, 80);
        assert!(err < 1e-6, "{err}");
        let w = Var::constant(rand_tensor(&[36, 3, 4, 3], 5));
        let err = check(&[a, b], |v| sum(&mul(&correlation_global(&v[0], &v[1]), &w)), 1e-4, 80);
        assert!(err < 1e-6, "{err}");
    }
}
