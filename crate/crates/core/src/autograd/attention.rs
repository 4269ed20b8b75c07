//! Fused 3D window self-attention with an optional cyclic shift and a learned
//! relative-position bias.
//!
//! Tokens are the voxels of a grid in memory order. The grid is conceptually
//! padded to whole windows; padded slots never act as keys and their outputs
//! are discarded. With a shift, the grid is rolled by half a window and keys
//! from a different pre-roll region are masked, as in shifted-window vision
//! transformers.

use super::Var;
use crate::autograd::basic::GATHER_NONE;
use crate::tensor::{Dims3, Tensor};

/// Geometry of one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowAttentionLayout {
    pub dims: Dims3,
    /// Configured window edge; axes shorter than this use their full extent.
    pub window: usize,
    pub heads: usize,
    pub shift: bool,
}

impl WindowAttentionLayout {
    /// Rows of the relative-position bias table: `(2w-1)^3`.
    pub fn table_len(&self) -> usize {
        (2 * self.window - 1).pow(3)
    }

    fn axis(&self, n: usize) -> (usize, usize, usize) {
        let w = self.window.min(n);
        let padded = n.div_ceil(w) * w;
        let shift = if self.shift && n > self.window { self.window / 2 } else { 0 };
        (w, padded, shift)
    }
}

struct Plan {
    /// Window slots; `GATHER_NONE` marks padding.
    slots: Vec<Vec<usize>>,
    /// Region label per slot, per window (shift mask).
    regions: Vec<Vec<u8>>,
    /// Bias-table row for each (query slot, key slot) pair.
    rel: Vec<usize>,
    t: usize,
}

fn plan(l: &WindowAttentionLayout) -> Plan {
    let d = l.dims;
    let ax = [l.axis(d.nx), l.axis(d.ny), l.axis(d.nz)];
    let wn = [ax[0].1 / ax[0].0, ax[1].1 / ax[1].0, ax[2].1 / ax[2].0];
    let win = [ax[0].0, ax[1].0, ax[2].0];
    let t = win[0] * win[1] * win[2];
    let region = |p: usize, a: usize| -> u8 {
        let (w, padded, s) = ax[a];
        if s == 0 || p < padded - w {
            0
        } else if p < padded - s {
            1
        } else {
            2
        }
    };
    let mut slots = Vec::new();
    let mut regions = Vec::new();
    for wz in 0..wn[2] {
        for wy in 0..wn[1] {
            for wx in 0..wn[0] {
                let mut s = Vec::with_capacity(t);
                let mut r = Vec::with_capacity(t);
                for lz in 0..win[2] {
                    for ly in 0..win[1] {
                        for lx in 0..win[0] {
                            let p = [wx * win[0] + lx, wy * win[1] + ly, wz * win[2] + lz];
                            let mut orig = [0; 3];
                            let mut pad = false;
                            for a in 0..3 {
                                let (_, padded, sh) = ax[a];
                                orig[a] = (p[a] + sh) % padded;
                                pad |= orig[a] >= d.as_array()[a];
                            }
                            s.push(if pad { GATHER_NONE } else { d.index(orig[0], orig[1], orig[2]) });
                            r.push(region(p[0], 0) * 9 + region(p[1], 1) * 3 + region(p[2], 2));
                        }
                    }
                }
                slots.push(s);
                regions.push(r);
            }
        }
    }
    let m = 2 * l.window - 1;
    let c = l.window as isize - 1;
    let local = |i: usize| -> [isize; 3] {
        [
            (i % win[0]) as isize,
            ((i / win[0]) % win[1]) as isize,
            (i / (win[0] * win[1])) as isize,
        ]
    };
    let mut rel = vec![0; t * t];
    for i in 0..t {
        let a = local(i);
        for j in 0..t {
            let b = local(j);
            let r = [a[0] - b[0] + c, a[1] - b[1] + c, a[2] - b[2] + c];
            rel[i * t + j] = (r[2] as usize * m + r[1] as usize) * m + r[0] as usize;
        }
    }
    Plan { slots, regions, rel, t }
}

struct Forward {
    out: Vec<f64>,
    /// Softmax rows per (window, head), `t x t`, zero where masked.
    probs: Vec<Vec<f64>>,
}

fn forward(qkv: &[f64], table: &[f64], l: &WindowAttentionLayout, p: &Plan, c: usize) -> Forward {
    let (h, t) = (l.heads, p.t);
    let hd = c / h;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = l.dims.len();
    let mut out = vec![0.0; n * c];
    let mut probs = Vec::with_capacity(p.slots.len() * h);
    let mut row = vec![0.0; t];
    for (slots, regions) in p.slots.iter().zip(&p.regions) {
        for head in 0..h {
            let mut pm = vec![0.0; t * t];
            for i in 0..t {
                let qi = slots[i];
                if qi == GATHER_NONE {
                    continue;
                }
                let q = &qkv[qi * 3 * c + head * hd..][..hd];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..t {
                    let kj = slots[j];
                    if kj == GATHER_NONE || regions[j] != regions[i] {
                        row[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let k = &qkv[kj * 3 * c + c + head * hd..][..hd];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    row[j] = dot * scale + table[p.rel[i * t + j] * h + head];
                    mx = mx.max(row[j]);
                }
                let mut z = 0.0;
                for j in 0..t {
                    let e = if row[j] == f64::NEG_INFINITY { 0.0 } else { (row[j] - mx).exp() };
                    pm[i * t + j] = e;
                    z += e;
                }
                let o = &mut out[qi * c + head * hd..][..hd];
                for j in 0..t {
                    let pij = pm[i * t + j] / z;
                    pm[i * t + j] = pij;
                    if pij != 0.0 {
                        let v = &qkv[slots[j] * 3 * c + 2 * c + head * hd..][..hd];
                        for (a, b) in o.iter_mut().zip(v) {
                            *a += pij * b;
                        }
                    }
                }
            }
            probs.push(pm);
        }
    }
    Forward { out, probs }
}

fn check_inputs(qkv: &Var, table: &Var, l: &WindowAttentionLayout) -> usize {
    let s = qkv.shape();
    assert!(s.len() == 2 && s[0] == l.dims.len() && s[1] % 3 == 0, "window_attention: qkv must be [L, 3C]");
    let c = s[1] / 3;
    assert!(l.heads > 0 && c % l.heads == 0, "window_attention: channels not divisible by heads");
    assert_eq!(table.shape(), &[l.table_len(), l.heads], "window_attention: bias table shape");
    c
}

/// Attention over windows. `qkv` is `[L, 3C]` (queries, keys, values side by
/// side, heads contiguous within each), `table` is `[(2w-1)^3, heads]`.
/// Returns the merged head outputs `[L, C]`.
pub fn window_attention(qkv: &Var, table: &Var, layout: &WindowAttentionLayout) -> Var {
    let c = check_inputs(qkv, table, layout);
    let p = plan(layout);
    let f = forward(qkv.value().data(), table.value().data(), layout, &p, c);
    let l = *layout;
    let n = l.dims.len();
    let (qv, tv) = (qkv.clone(), table.clone());
    let probs = f.probs;
    Var::from_op(Tensor::from_parts(vec![n, c], f.out), &[qkv, table], move |g| {
        let (h, t) = (l.heads, p.t);
        let hd = c / h;
        let scale = 1.0 / (hd as f64).sqrt();
        let x = qv.value().data();
        let gd = g.data();
        let mut gq = vec![0.0; n * 3 * c];
        let mut gt = vec![0.0; tv.value().len()];
        let mut gp = vec![0.0; t];
        for (w, slots) in p.slots.iter().enumerate() {
            for head in 0..h {
                let pm = &probs[w * h + head];
                for i in 0..t {
                    let qi = slots[i];
                    if qi == GATHER_NONE {
                        continue;
                    }
                    let go = &gd[qi * c + head * hd..][..hd];
                    let mut dot = 0.0;
                    for j in 0..t {
                        let pij = pm[i * t + j];
                        if pij == 0.0 {
                            gp[j] = 0.0;
                            continue;
                        }
                        let vo = slots[j] * 3 * c + 2 * c + head * hd;
                        let v = &x[vo..vo + hd];
                        gp[j] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                        dot += pij * gp[j];
                        for (k, &gv) in go.iter().enumerate() {
                            gq[vo + k] += pij * gv;
                        }
                    }
                    let qo = qi * 3 * c + head * hd;
                    for j in 0..t {
                        let pij = pm[i * t + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let gs = pij * (gp[j] - dot);
                        gt[p.rel[i * t + j] * h + head] += gs;
                        let ko = slots[j] * 3 * c + c + head * hd;
                        for k in 0..hd {
                            gq[qo + k] += gs * scale * x[ko + k];
                            gq[ko + k] += gs * scale * x[qo + k];
                        }
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(vec![n, 3 * c], gq)),
            Some(Tensor::from_parts(tv.shape().to_vec(), gt)),
        ]
    })
}

/// Attention probabilities `[windows, heads, T, T]`; masked pairs and padded
/// query rows are zero.
pub fn window_attention_probs(qkv: &Tensor, table: &Tensor, layout: &WindowAttentionLayout) -> Tensor {
    let c = check_inputs(&Var::constant(qkv.clone()), &Var::constant(table.clone()), layout);
    let p = plan(layout);
    let f = forward(qkv.data(), table.data(), layout, &p, c);
    let shape = vec![p.slots.len(), layout.heads, p.t, p.t];
    Tensor::from_parts(shape, f.probs.concat())
}
