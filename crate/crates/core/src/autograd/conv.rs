//! Convolutions: 3D (im2col + gemm), stride-2 transposed 3D with kernel 2,
//! and the depthwise causal 1D convolution used inside the selective-scan mixer.
//!
//! 3D convolutions use `pad_lo = (k - 1) / 2` and produce `ceil(n / stride)`
//! outputs per axis; taps falling outside the input read zero.

use super::linalg::{gemm, Mat};
use super::Var;
use crate::tensor::{Dims3, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    k: usize,
    stride: usize,
    pad: isize,
    input: Dims3,
    output: Dims3,
}

impl ConvGeom {
    fn new(cin: usize, k: usize, stride: usize, input: Dims3) -> Self {
        let out = |n: usize| n.div_ceil(stride);
        Self {
            cin,
            k,
            stride,
            pad: ((k - 1) / 2) as isize,
            input,
            output: Dims3::new(out(input.nx), out(input.ny), out(input.nz)),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Input coordinate for output coordinate `o` and tap `t`, if inside.
    #[inline]
    fn tap(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }

    /// Output z-planes per im2col tile, bounding the column buffer to ~2M values.
    fn planes_per_tile(&self) -> usize {
        let per_plane = self.rows() * self.output.nx * self.output.ny;
        (2_000_000 / per_plane.max(1)).clamp(1, self.output.nz)
    }

    /// Fill `col` (rows x tile_len) for output planes `[z0, z1)`.
    fn im2col(&self, x: &[f64], z0: usize, z1: usize, col: &mut [f64]) {
        let (o, i, k) = (self.output, self.input, self.k);
        let tile = (z1 - z0) * o.nx * o.ny;
        let plane = i.nx * i.ny;
        for ci in 0..self.cin {
            let xc = &x[ci * i.len()..(ci + 1) * i.len()];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let r = ((ci * k + kz) * k + ky) * k + kx;
                        let row = &mut col[r * tile..(r + 1) * tile];
                        let mut p = 0;
                        for oz in z0..z1 {
                            let iz = self.tap(oz, kz, i.nz);
                            for oy in 0..o.ny {
                                let iy = self.tap(oy, ky, i.ny);
                                match (iz, iy) {
                                    (Some(iz), Some(iy)) => {
                                        let base = iz * plane + iy * i.nx;
                                        for ox in 0..o.nx {
                                            row[p] = match self.tap(ox, kx, i.nx) {
                                                Some(ix) => xc[base + ix],
                                                None => 0.0,
                                            };
                                            p += 1;
                                        }
                                    }
                                    _ => {
                                        row[p..p + o.nx].fill(0.0);
                                        p += o.nx;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a column buffer back into an input-shaped gradient.
    fn col2im(&self, col: &[f64], z0: usize, z1: usize, gx: &mut [f64]) {
        let (o, i, k) = (self.output, self.input, self.k);
        let tile = (z1 - z0) * o.nx * o.ny;
        let plane = i.nx * i.ny;
        for ci in 0..self.cin {
            let gc = &mut gx[ci * i.len()..(ci + 1) * i.len()];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let r = ((ci * k + kz) * k + ky) * k + kx;
                        let row = &col[r * tile..(r + 1) * tile];
                        let mut p = 0;
                        for oz in z0..z1 {
                            let iz = self.tap(oz, kz, i.nz);
                            for oy in 0..o.ny {
                                if let (Some(iz), Some(iy)) = (iz, self.tap(oy, ky, i.ny)) {
                                    let base = iz * plane + iy * i.nx;
                                    for ox in 0..o.nx {
                                        if let Some(ix) = self.tap(ox, kx, i.nx) {
                                            gc[base + ix] += row[p];
                                        }
                                        p += 1;
                                    }
                                } else {
                                    p += o.nx;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3D convolution. `x: [Cin, nz, ny, nx]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
pub fn conv3d(x: &Var, w: &Var, b: Option<&Var>, stride: usize) -> Var {
    let dims = x.value().dims3().expect("conv3d input");
    let ws = w.shape();
    assert_eq!(ws.len(), 5, "conv3d weight must be 5D");
    let (cout, cin, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(x.shape()[0], cin, "conv3d: input has {} channels, weight expects {cin}", x.shape()[0]);
    assert!(stride == 1 || stride == 2, "conv3d stride must be 1 or 2");
    let g = ConvGeom::new(cin, k, stride, dims);
    let olen = g.output.len();
    let rows = g.rows();
    let mut out = vec![0.0; cout * olen];
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(olen).enumerate() {
            chunk.fill(b.value().data()[co]);
        }
    }
    let wd = w.value().data();
    let xd = x.value().data();
    if g.is_pointwise() {
        gemm(cout, cin, olen, 1.0, Mat::rm(wd, cin), Mat::rm(xd, olen), 1.0, &mut out);
    } else {
        let step = g.planes_per_tile();
        let mut col = Vec::new();
        let mut tmp = Vec::new();
        for z0 in (0..g.output.nz).step_by(step) {
            let z1 = (z0 + step).min(g.output.nz);
            let tile = (z1 - z0) * g.output.nx * g.output.ny;
            col.resize(rows * tile, 0.0);
            g.im2col(xd, z0, z1, &mut col);
            tmp.resize(cout * tile, 0.0);
            gemm(cout, rows, tile, 1.0, Mat::rm(wd, rows), Mat::rm(&col, tile), 0.0, &mut tmp);
            let off = z0 * g.output.nx * g.output.ny;
            for co in 0..cout {
                let dst = &mut out[co * olen + off..co * olen + off + tile];
                for (d, s) in dst.iter_mut().zip(&tmp[co * tile..(co + 1) * tile]) {
                    *d += s;
                }
            }
        }
    }
    let out = Tensor::from_parts(g.output.shape_with_channels(cout), out);

    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = b.is_some();
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    Var::from_op(out, &parents, move |gout| {
        let gd = gout.data();
        let wd = wc.value().data();
        let xd = xc.value().data();
        let mut gx = xc.requires_grad().then(|| vec![0.0; xd.len()]);
        let mut gw = wc.requires_grad().then(|| vec![0.0; wd.len()]);
        if g.is_pointwise() {
            if let Some(gx) = gx.as_mut() {
                gemm(cin, cout, olen, 1.0, Mat::rm_t(wd, cin), Mat::rm(gd, olen), 0.0, gx);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(cout, olen, cin, 1.0, Mat::rm(gd, olen), Mat::rm_t(xd, olen), 0.0, gw);
            }
        } else {
            let step = g.planes_per_tile();
            let mut col = Vec::new();
            let mut gtile = Vec::new();
            for z0 in (0..g.output.nz).step_by(step) {
                let z1 = (z0 + step).min(g.output.nz);
                let tile = (z1 - z0) * g.output.nx * g.output.ny;
                let off = z0 * g.output.nx * g.output.ny;
                gtile.resize(cout * tile, 0.0);
                for co in 0..cout {
                    gtile[co * tile..(co + 1) * tile]
                        .copy_from_slice(&gd[co * olen + off..co * olen + off + tile]);
                }
                col.resize(rows * tile, 0.0);
                if let Some(gw) = gw.as_mut() {
                    g.im2col(xd, z0, z1, &mut col);
                    gemm(cout, tile, rows, 1.0, Mat::rm(&gtile, tile), Mat::rm_t(&col, tile), 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(rows, cout, tile, 1.0, Mat::rm_t(wd, rows), Mat::rm(&gtile, tile), 0.0, &mut col);
                    g.col2im(&col, z0, z1, gx);
                }
            }
        }
        let mut res = vec![
            gx.map(|d| Tensor::from_parts(xc.shape().to_vec(), d)),
            gw.map(|d| Tensor::from_parts(wc.shape().to_vec(), d)),
        ];
        if has_bias {
            let gb: Vec<f64> = (0..cout).map(|co| gd[co * olen..(co + 1) * olen].iter().sum()).collect();
            res.push(Some(Tensor::from_parts(vec![cout], gb)));
        }
        res
    })
}

/// Transposed 3D convolution with kernel 2 and stride 2 (exact 2x upsampling).
/// `x: [Cin, nz, ny, nx]`, `w: [Cin, Cout, 2, 2, 2]`, `b: [Cout]`.
pub fn conv_transpose3d_k2s2(x: &Var, w: &Var, b: Option<&Var>) -> Var {
    let dims = x.value().dims3().expect("conv_transpose3d input");
    let ws = w.shape();
    assert!(ws.len() == 5 && ws[2..] == [2, 2, 2], "conv_transpose3d weight must be [Cin, Cout, 2, 2, 2]");
    let (cin, cout) = (ws[0], ws[1]);
    assert_eq!(x.shape()[0], cin, "conv_transpose3d channel mismatch");
    let v = dims.len();
    let r = cout * 8;
    let od = dims.doubled();
    // y[(co, a, b, c), v] = sum_ci w[ci, (co, a, b, c)] x[ci, v]
    let mut y = vec![0.0; r * v];
    gemm(r, cin, v, 1.0, Mat::rm_t(w.value().data(), r), Mat::rm(x.value().data(), v), 0.0, &mut y);
    let mut out = vec![0.0; cout * od.len()];
    shuffle(&y, &mut out, cout, dims, false);
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(od.len()).enumerate() {
            let bv = b.value().data()[co];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
    }
    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = b.is_some();
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    Var::from_op(Tensor::from_parts(od.shape_with_channels(cout), out), &parents, move |g| {
        let mut gy = vec![0.0; r * v];
        shuffle(g.data(), &mut gy, cout, dims, true);
        let gx = xc.requires_grad().then(|| {
            let mut d = vec![0.0; cin * v];
            gemm(cin, r, v, 1.0, Mat::rm(wc.value().data(), r), Mat::rm(&gy, v), 0.0, &mut d);
            Tensor::from_parts(xc.shape().to_vec(), d)
        });
        let gw = wc.requires_grad().then(|| {
            let mut d = vec![0.0; cin * r];
            gemm(cin, v, r, 1.0, Mat::rm(xc.value().data(), v), Mat::rm_t(&gy, v), 0.0, &mut d);
            Tensor::from_parts(wc.shape().to_vec(), d)
        });
        let mut res = vec![gx, gw];
        if has_bias {
            let n = od.len();
            let gb = (0..cout).map(|co| g.data()[co * n..(co + 1) * n].iter().sum()).collect();
            res.push(Some(Tensor::from_parts(vec![cout], gb)));
        }
        res
    })
}

/// Move between the `[(co, a, b, c), v]` gemm layout and the upsampled grid.
/// `inverse = false` scatters `src` (gemm layout) into `dst` (grid).
fn shuffle(src: &[f64], dst: &mut [f64], cout: usize, dims: Dims3, inverse: bool) {
    let od = dims.doubled();
    let v = dims.len();
    for co in 0..cout {
        for a in 0..2 {
            for bb in 0..2 {
                for c in 0..2 {
                    let row = ((co * 2 + a) * 2 + bb) * 2 + c;
                    for (x, y, z) in dims.iter() {
                        let gi = co * od.len() + od.index(2 * x + c, 2 * y + bb, 2 * z + a);
                        let li = row * v + dims.index(x, y, z);
                        if inverse {
                            dst[li] = src[gi];
                        } else {
                            dst[gi] = src[li];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise causal convolution along the sequence axis.
/// `x: [L, E]`, `w: [E, K]`, `b: [E]`; `y[t, e] = b[e] + sum_j w[e, j] x[t + j - (K - 1), e]`.
pub fn depthwise_causal_conv1d(x: &Var, w: &Var, b: &Var) -> Var {
    let (l, e) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    assert_eq!(w.shape()[0], e, "depthwise conv channel mismatch");
    let xd = x.value().data();
    let wd = w.value().data();
    let mut out = vec![0.0; l * e];
    for t in 0..l {
        for c in 0..e {
            let mut acc = b.value().data()[c];
            for j in 0..k {
                let s = t as isize + j as isize - (k as isize - 1);
                if s >= 0 {
                    acc += wd[c * k + j] * xd[s as usize * e + c];
                }
            }
            out[t * e + c] = acc;
        }
    }
    let (xc, wc) = (x.clone(), w.clone());
    Var::from_op(Tensor::from_parts(vec![l, e], out), &[x, w, b], move |g| {
        let gd = g.data();
        let xd = xc.value().data();
        let wd = wc.value().data();
        let mut gx = vec![0.0; l * e];
        let mut gw = vec![0.0; e * k];
        let mut gb = vec![0.0; e];
        for t in 0..l {
            for c in 0..e {
                let gv = gd[t * e + c];
                gb[c] += gv;
                for j in 0..k {
                    let s = t as isize + j as isize - (k as isize - 1);
                    if s >= 0 {
                        gw[c * k + j] += gv * xd[s as usize * e + c];
                        gx[s as usize * e + c] += gv * wd[c * k + j];
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(vec![l, e], gx)),
            Some(Tensor::from_parts(vec![e, k], gw)),
            Some(Tensor::from_parts(vec![e], gb)),
        ]
    })
}
