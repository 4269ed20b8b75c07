//! Differentiable spatial ops on `[C, nz, ny, nx]` tensors.

use super::Var;
use crate::sampling::{displaced, resample_channels, resample_coord, warp_channels, Corners};
use crate::tensor::{Dims3, Tensor};

fn dims_of(v: &Var, op: &str) -> Dims3 {
    v.value()
        .dims3()
        .unwrap_or_else(|e| panic!("{op}: {e}"))
}

/// Trilinear warp of `src [C, D]` by a voxel displacement `flow [3, D]`,
/// border-clamped. Differentiable in both arguments.
pub fn warp(src: &Var, flow: &Var) -> Var {
    let d = dims_of(src, "warp");
    assert_eq!(
        flow.shape(),
        d.shape_with_channels(3).as_slice(),
        "warp: flow must be [3, D] matching the source"
    );
    let c = src.value().channels();
    let out = warp_channels(src.value().data(), c, flow.value().data(), d);
    let shape = src.shape().to_vec();
    let (sc, fc) = (src.clone(), flow.clone());
    Var::from_op(Tensor::from_parts(shape.clone(), out), &[src, flow], move |g| {
        let n = d.len();
        let sdat = sc.value().data();
        let fdat = fc.value().data();
        let gd = g.data();
        let mut gs = sc.requires_grad().then(|| vec![0.0; c * n]);
        let mut gf = fc.requires_grad().then(|| vec![0.0; 3 * n]);
        for (x, y, z) in d.iter() {
            let i = d.index(x, y, z);
            let (px, py, pz) = displaced(d, fdat, x, y, z);
            let cr = Corners::new(d, px, py, pz);
            if let Some(gs) = gs.as_mut() {
                let w = cr.weights(d);
                for ch in 0..c {
                    let gv = gd[ch * n + i];
                    if gv != 0.0 {
                        for &(j, wj) in &w {
                            gs[ch * n + j] += gv * wj;
                        }
                    }
                }
            }
            if let Some(gf) = gf.as_mut() {
                for ch in 0..c {
                    let gv = gd[ch * n + i];
                    if gv != 0.0 {
                        let pg = cr.position_grad(d, &sdat[ch * n..(ch + 1) * n]);
                        for a in 0..3 {
                            gf[a * n + i] += gv * pg[a];
                        }
                    }
                }
            }
        }
        vec![
            gs.map(|v| Tensor::from_parts(shape.clone(), v)),
            gf.map(|v| Tensor::from_parts(d.shape_with_channels(3), v)),
        ]
    })
}

/// Trilinear resampling of `x [C, D]` onto the grid `out`, aligning voxel centers.
pub fn resample_trilinear(x: &Var, out: Dims3) -> Var {
    let din = dims_of(x, "resample_trilinear");
    let c = x.value().channels();
    let data = resample_channels(x.value().data(), c, din, out);
    let in_shape = x.shape().to_vec();
    Var::from_op(Tensor::from_parts(out.shape_with_channels(c), data), &[x], move |g| {
        let (ni, no) = (din.len(), out.len());
        let mut gi = vec![0.0; c * ni];
        for (ox, oy, oz) in out.iter() {
            let cr = Corners::new(
                din,
                resample_coord(ox, din.nx, out.nx),
                resample_coord(oy, din.ny, out.ny),
                resample_coord(oz, din.nz, out.nz),
            );
            let o = out.index(ox, oy, oz);
            let w = cr.weights(din);
            for ch in 0..c {
                let gv = g.data()[ch * no + o];
                for &(j, wj) in &w {
                    gi[ch * ni + j] += gv * wj;
                }
            }
        }
        vec![Some(Tensor::from_parts(in_shape.clone(), gi))]
    })
}

/// 2x2x2 max pooling with stride 2; odd extents keep a partial last window.
pub fn max_pool2(x: &Var) -> Var {
    let d = dims_of(x, "max_pool2");
    let o = d.halved();
    let c = x.value().channels();
    let (n, no) = (d.len(), o.len());
    let src = x.value().data();
    let mut out = vec![0.0; c * no];
    let mut arg = vec![0usize; c * no];
    for ch in 0..c {
        let s = &src[ch * n..(ch + 1) * n];
        for (ox, oy, oz) in o.iter() {
            let mut best: Option<(f64, usize)> = None;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (x, y, z) = (2 * ox + dx, 2 * oy + dy, 2 * oz + dz);
                        if x < d.nx && y < d.ny && z < d.nz {
                            let j = d.index(x, y, z);
                            if best.is_none_or(|(b, _)| s[j] > b) {
                                best = Some((s[j], j));
                            }
                        }
                    }
                }
            }
            let (best, bi) = best.expect("pool window is never empty");
            let k = ch * no + o.index(ox, oy, oz);
            out[k] = best;
            arg[k] = ch * n + bi;
        }
    }
    let in_shape = x.shape().to_vec();
    Var::from_op(Tensor::from_parts(o.shape_with_channels(c), out), &[x], move |g| {
        let mut gi = vec![0.0; c * n];
        for (&a, &gv) in arg.iter().zip(g.data()) {
            gi[a] += gv;
        }
        vec![Some(Tensor::from_parts(in_shape.clone(), gi))]
    })
}

/// Sum over each channel along one axis within `radius`, truncated at the
/// grid edge. `stride` is the memory stride of the axis, `len` its extent.
fn box_axis(data: &mut [f64], d: Dims3, axis: usize, radius: usize) {
    let (len, stride) = match axis {
        0 => (d.nx, 1),
        1 => (d.ny, d.nx),
        _ => (d.nz, d.nx * d.ny),
    };
    let n = d.len();
    let mut prefix = vec![0.0; len + 1];
    for chan in data.chunks_mut(n) {
        for base in 0..n {
            // Only visit line starts.
            let pos = (base / stride) % len;
            if pos != 0 {
                continue;
            }
            for i in 0..len {
                prefix[i + 1] = prefix[i] + chan[base + i * stride];
            }
            for i in 0..len {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius + 1).min(len);
                chan[base + i * stride] = prefix[hi] - prefix[lo];
            }
        }
    }
}

fn box_sum_data(src: &[f64], d: Dims3, radius: usize) -> Vec<f64> {
    let mut out = src.to_vec();
    for axis in 0..3 {
        box_axis(&mut out, d, axis, radius);
    }
    out
}

/// Sum over the `(2r+1)^3` cube around every voxel, restricted to the grid.
/// The operator is symmetric, so its adjoint is itself.
pub fn box_sum(x: &Var, radius: usize) -> Var {
    let d = dims_of(x, "box_sum");
    let shape = x.shape().to_vec();
    let out = box_sum_data(x.value().data(), d, radius);
    Var::from_op(Tensor::from_parts(shape.clone(), out), &[x], move |g| {
        vec![Some(Tensor::from_parts(
            shape.clone(),
            box_sum_data(g.data(), d, radius),
        ))]
    })
}

/// Forward difference `x[i+1] - x[i]` along `axis` (0 = x, 1 = y, 2 = z).
/// The output is one voxel shorter along that axis.
pub fn forward_diff(x: &Var, axis: usize) -> Var {
    assert!(axis < 3, "forward_diff: axis must be 0, 1 or 2");
    let d = dims_of(x, "forward_diff");
    let c = x.value().channels();
    let mut od = d.as_array();
    assert!(od[axis] >= 2, "forward_diff: axis extent must be at least 2");
    od[axis] -= 1;
    let o = Dims3::from_array(od);
    let step = [1, d.nx, d.nx * d.ny][axis];
    let (n, no) = (d.len(), o.len());
    let mut src_idx = Vec::with_capacity(no);
    for (x, y, z) in o.iter() {
        src_idx.push(d.index(x, y, z));
    }
    let s = x.value().data();
    let mut out = vec![0.0; c * no];
    for ch in 0..c {
        for (k, &i) in src_idx.iter().enumerate() {
            out[ch * no + k] = s[ch * n + i + step] - s[ch * n + i];
        }
    }
    let in_shape = x.shape().to_vec();
    Var::from_op(Tensor::from_parts(o.shape_with_channels(c), out), &[x], move |g| {
        let mut gi = vec![0.0; c * n];
        for ch in 0..c {
            for (k, &i) in src_idx.iter().enumerate() {
                let gv = g.data()[ch * no + k];
                gi[ch * n + i + step] += gv;
                gi[ch * n + i] -= gv;
            }
        }
        vec![Some(Tensor::from_parts(in_shape.clone(), gi))]
    })
}
