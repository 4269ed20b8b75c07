//! Interpolation kernels shared by the grid types and the differentiable ops.
//!
//! Voxel centers sit at integer coordinates. Positions outside the grid are
//! clamped to the border (edge replication). Trilinear interpolation is
//! evaluated as nested lerps so that equal corner values reproduce that value
//! bit-exactly and results never leave the corner range.

use crate::tensor::Dims3;

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    let r = a + f * (b - a);
    if r.is_nan() {
        return r;
    }
    if a <= b {
        r.clamp(a, b)
    } else {
        r.clamp(b, a)
    }
}

/// Lower corner, upper corner, fraction and whether the clamp was active.
#[inline]
pub(crate) fn axis_coord(p: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    if p <= 0.0 || p.is_nan() {
        return (0, 0, 0.0, p < 0.0 || p.is_nan());
    }
    if p >= hi {
        return (n - 1, n - 1, 0.0, p > hi);
    }
    let i0 = p.floor();
    let f = p - i0;
    let i0 = i0 as usize;
    (i0, (i0 + 1).min(n - 1), f, false)
}

/// Trilinear corner set for one sample position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corners {
    pub x: (usize, usize),
    pub y: (usize, usize),
    pub z: (usize, usize),
    pub f: [f64; 3],
    /// Axis positions that were clamped (zero derivative w.r.t. position).
    pub clamped: [bool; 3],
}

impl Corners {
    #[inline]
    pub fn new(d: Dims3, px: f64, py: f64, pz: f64) -> Self {
        let (x0, x1, fx, cx) = axis_coord(px, d.nx);
        let (y0, y1, fy, cy) = axis_coord(py, d.ny);
        let (z0, z1, fz, cz) = axis_coord(pz, d.nz);
        Self {
            x: (x0, x1),
            y: (y0, y1),
            z: (z0, z1),
            f: [fx, fy, fz],
            clamped: [cx, cy, cz],
        }
    }

    #[inline]
    fn idx(&self, d: Dims3, i: usize, j: usize, k: usize) -> usize {
        let x = if i == 0 { self.x.0 } else { self.x.1 };
        let y = if j == 0 { self.y.0 } else { self.y.1 };
        let z = if k == 0 { self.z.0 } else { self.z.1 };
        d.index(x, y, z)
    }

    /// Flat indices and weights of the eight corners.
    #[inline]
    pub fn weights(&self, d: Dims3) -> [(usize, f64); 8] {
        let [fx, fy, fz] = self.f;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let mut out = [(0, 0.0); 8];
        let mut n = 0;
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    out[n] = (self.idx(d, i, j, k), wx[i] * wy[j] * wz[k]);
                    n += 1;
                }
            }
        }
        out
    }

    /// Interpolated value of `v`.
    #[inline]
    pub fn sample(&self, d: Dims3, v: &[f64]) -> f64 {
        let [fx, fy, fz] = self.f;
        let c = |i, j, k| v[self.idx(d, i, j, k)];
        let c00 = lerp(c(0, 0, 0), c(1, 0, 0), fx);
        let c10 = lerp(c(0, 1, 0), c(1, 1, 0), fx);
        let c01 = lerp(c(0, 0, 1), c(1, 0, 1), fx);
        let c11 = lerp(c(0, 1, 1), c(1, 1, 1), fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        lerp(c0, c1, fz)
    }

    /// Derivative of the interpolated value w.r.t. the sample position.
    #[inline]
    pub fn position_grad(&self, d: Dims3, v: &[f64]) -> [f64; 3] {
        let [fx, fy, fz] = self.f;
        let c = |i, j, k| v[self.idx(d, i, j, k)];
        let mut g = [0.0; 3];
        if !self.clamped[0] {
            let dy0 = (1.0 - fy) * (c(1, 0, 0) - c(0, 0, 0)) + fy * (c(1, 1, 0) - c(0, 1, 0));
            let dy1 = (1.0 - fy) * (c(1, 0, 1) - c(0, 0, 1)) + fy * (c(1, 1, 1) - c(0, 1, 1));
            g[0] = (1.0 - fz) * dy0 + fz * dy1;
        }
        if !self.clamped[1] {
            let dx0 = (1.0 - fx) * (c(0, 1, 0) - c(0, 0, 0)) + fx * (c(1, 1, 0) - c(1, 0, 0));
            let dx1 = (1.0 - fx) * (c(0, 1, 1) - c(0, 0, 1)) + fx * (c(1, 1, 1) - c(1, 0, 1));
            g[1] = (1.0 - fz) * dx0 + fz * dx1;
        }
        if !self.clamped[2] {
            let dx0 = (1.0 - fx) * (c(0, 0, 1) - c(0, 0, 0)) + fx * (c(1, 0, 1) - c(1, 0, 0));
            let dx1 = (1.0 - fx) * (c(0, 1, 1) - c(0, 1, 0)) + fx * (c(1, 1, 1) - c(1, 1, 0));
            g[2] = (1.0 - fy) * dx0 + fy * dx1;
        }
        g
    }
}

/// Sample positions `v + flow(v)` for every voxel of `d`.
#[inline]
pub(crate) fn displaced(d: Dims3, flow: &[f64], x: usize, y: usize, z: usize) -> (f64, f64, f64) {
    let i = d.index(x, y, z);
    let n = d.len();
    (
        x as f64 + flow[i],
        y as f64 + flow[n + i],
        z as f64 + flow[2 * n + i],
    )
}

/// Warp every channel of `src` (`channels` stacked grids of `d`) through `flow`.
pub(crate) fn warp_channels(src: &[f64], channels: usize, flow: &[f64], d: Dims3) -> Vec<f64> {
    let n = d.len();
    let mut out = vec![0.0; channels * n];
    for (x, y, z) in d.iter() {
        let (px, py, pz) = displaced(d, flow, x, y, z);
        let c = Corners::new(d, px, py, pz);
        let i = d.index(x, y, z);
        for ch in 0..channels {
            out[ch * n + i] = c.sample(d, &src[ch * n..(ch + 1) * n]);
        }
    }
    out
}

/// Nearest-neighbour gather of integer labels through `flow`, border-clamped.
/// Ties round half away from zero (`f64::round`).
pub(crate) fn warp_nearest_labels(src: &[u32], flow: &[f64], d: Dims3) -> Vec<u32> {
    let clampi = |p: f64, n: usize| -> usize {
        let r = p.round();
        if r <= 0.0 || r.is_nan() {
            0
        } else {
            (r as usize).min(n - 1)
        }
    };
    let mut out = vec![0; d.len()];
    for (x, y, z) in d.iter() {
        let (px, py, pz) = displaced(d, flow, x, y, z);
        out[d.index(x, y, z)] = src[d.index(clampi(px, d.nx), clampi(py, d.ny), clampi(pz, d.nz))];
    }
    out
}

/// Source coordinate for output index `o` when resampling `n_in -> n_out`
/// with voxel-center alignment.
#[inline]
pub(crate) fn resample_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5
}

/// Trilinear resampling of stacked grids from `din` to `dout`.
pub(crate) fn resample_channels(src: &[f64], channels: usize, din: Dims3, dout: Dims3) -> Vec<f64> {
    let (ni, no) = (din.len(), dout.len());
    let mut out = vec![0.0; channels * no];
    for (x, y, z) in dout.iter() {
        let c = Corners::new(
            din,
            resample_coord(x, din.nx, dout.nx),
            resample_coord(y, din.ny, dout.ny),
            resample_coord(z, din.nz, dout.nz),
        );
        let o = dout.index(x, y, z);
        for ch in 0..channels {
            out[ch * no + o] = c.sample(din, &src[ch * ni..(ch + 1) * ni]);
        }
    }
    out
}
