//! Instance normalization (per channel over space) and layer normalization
//! (per row over features).

use super::Var;
use crate::tensor::Tensor;

/// Normalize rows of length `n` in place, returning per-row `1 / sigma`.
fn normalize_rows(data: &mut [f64], n: usize, eps: f64) -> Vec<f64> {
    data.chunks_mut(n)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv
        })
        .collect()
}

/// Backward of row normalization given normalized values and output grads.
fn normalize_rows_backward(xhat: &[f64], g: &[f64], inv: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; xhat.len()];
    for (r, &s) in inv.iter().enumerate() {
        let xr = &xhat[r * n..(r + 1) * n];
        let gr = &g[r * n..(r + 1) * n];
        let mg = gr.iter().sum::<f64>() / n as f64;
        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for i in 0..n {
            out[r * n + i] = s * (gr[i] - mg - xr[i] * mgx);
        }
    }
    out
}

/// Non-affine instance normalization of a `[C, ...]` tensor.
pub fn instance_norm(x: &Var, eps: f64) -> Var {
    let shape = x.shape().to_vec();
    let n = x.value().len() / shape[0];
    let mut y = x.value().data().to_vec();
    let inv = normalize_rows(&mut y, n, eps);
    let xhat = Tensor::from_parts(shape.clone(), y);
    let saved = xhat.clone();
    Var::from_op(xhat, &[x], move |g| {
        vec![Some(Tensor::from_parts(
            shape.clone(),
            normalize_rows_backward(saved.data(), g.data(), &inv, n),
        ))]
    })
}

/// Layer normalization over the last axis of `[L, C]` with affine `gamma`, `beta`.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 2, "layer_norm expects [L, C]");
    let c = shape[1];
    assert!(gamma.shape() == [c] && beta.shape() == [c], "layer_norm affine shape");
    let mut xhat = x.value().data().to_vec();
    let inv = normalize_rows(&mut xhat, c, eps);
    let gd = gamma.value().data();
    let bd = beta.value().data();
    let out: Vec<f64> = xhat
        .iter()
        .enumerate()
        .map(|(i, v)| v * gd[i % c] + bd[i % c])
        .collect();
    let gc = gamma.clone();
    Var::from_op(Tensor::from_parts(shape.clone(), out), &[x, gamma, beta], move |g| {
        let gdat = g.data();
        let gamma = gc.value().data();
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        let mut gxhat = vec![0.0; gdat.len()];
        for (i, (&gv, &xv)) in gdat.iter().zip(&xhat).enumerate() {
            ggamma[i % c] += gv * xv;
            gbeta[i % c] += gv;
            gxhat[i] = gv * gamma[i % c];
        }
        vec![
            Some(Tensor::from_parts(
                shape.clone(),
                normalize_rows_backward(&xhat, &gxhat, &inv, c),
            )),
            Some(Tensor::from_parts(vec![c], ggamma)),
            Some(Tensor::from_parts(vec![c], gbeta)),
        ]
    })
}
