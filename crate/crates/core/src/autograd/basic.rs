//! Elementwise arithmetic, activations, reductions and layout ops.

use std::rc::Rc;

use super::Var;
use crate::tensor::Tensor;

fn check_same(a: &Var, b: &Var, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

pub fn add(a: &Var, b: &Var) -> Var {
    check_same(a, b, "add");
    let out = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())])
}

pub fn sub(a: &Var, b: &Var) -> Var {
    check_same(a, b, "sub");
    let out = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(out, &[a, b], |g| vec![Some(g.clone()), Some(g.scale(-1.0))])
}

pub fn mul(a: &Var, b: &Var) -> Var {
    check_same(a, b, "mul");
    let out = a.value().zip_map(b.value(), |x, y| x * y);
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(out, &[a, b], move |g| {
        vec![
            ac.requires_grad().then(|| g.zip_map(bc.value(), |g, y| g * y)),
            bc.requires_grad().then(|| g.zip_map(ac.value(), |g, x| g * x)),
        ]
    })
}

pub fn div(a: &Var, b: &Var) -> Var {
    check_same(a, b, "div");
    let out = a.value().zip_map(b.value(), |x, y| x / y);
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(out, &[a, b], move |g| {
        let ga = ac
            .requires_grad()
            .then(|| g.zip_map(bc.value(), |g, y| g / y));
        let gb = bc.requires_grad().then(|| {
            let t = ac.value().zip_map(bc.value(), |x, y| -x / (y * y));
            g.zip_map(&t, |g, t| g * t)
        });
        vec![ga, gb]
    })
}

pub fn scale(a: &Var, s: f64) -> Var {
    Var::from_op(a.value().scale(s), &[a], move |g| vec![Some(g.scale(s))])
}

pub fn add_scalar(a: &Var, s: f64) -> Var {
    Var::from_op(a.value().map(|v| v + s), &[a], |g| vec![Some(g.clone())])
}

pub fn neg(a: &Var) -> Var {
    scale(a, -1.0)
}

/// Generic unary op from a value map and its derivative (as a function of the input).
fn unary(a: &Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var {
    let out = a.value().map(f);
    let ac = a.clone();
    Var::from_op(out, &[a], move |g| {
        vec![Some(g.zip_map(ac.value(), |g, x| g * df(x)))]
    })
}

pub fn square(a: &Var) -> Var {
    unary(a, |x| x * x, |x| 2.0 * x)
}

pub fn sqrt(a: &Var) -> Var {
    unary(a, f64::sqrt, |x| 0.5 / x.sqrt())
}

pub fn exp(a: &Var) -> Var {
    unary(a, f64::exp, f64::exp)
}

pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    unary(
        a,
        move |x| if x >= 0.0 { x } else { slope * x },
        move |x| if x >= 0.0 { 1.0 } else { slope },
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(a: &Var) -> Var {
    unary(
        a,
        |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        |x| {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        },
    )
}

#[inline]
pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_f(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(a: &Var) -> Var {
    unary(a, sigmoid_f, |x| {
        let s = sigmoid_f(x);
        s * (1.0 - s)
    })
}

pub fn silu(a: &Var) -> Var {
    unary(
        a,
        |x| x * sigmoid_f(x),
        |x| {
            let s = sigmoid_f(x);
            s * (1.0 + x * (1.0 - s))
        },
    )
}

pub fn softplus(a: &Var) -> Var {
    unary(a, softplus_f, sigmoid_f)
}

/// Sum of all elements, as a scalar.
pub fn sum(a: &Var) -> Var {
    let shape = a.shape().to_vec();
    Var::from_op(Tensor::scalar(a.value().sum()), &[a], move |g| {
        vec![Some(Tensor::full(shape.clone(), g.item()))]
    })
}

pub fn mean(a: &Var) -> Var {
    let n = a.value().len() as f64;
    scale(&sum(a), 1.0 / n)
}

/// Per-channel sum of a channel-first tensor: `[C, ...] -> [C]`.
pub fn sum_channels(a: &Var) -> Var {
    let t = a.value();
    let c = t.shape()[0];
    let out: Vec<f64> = (0..c).map(|k| t.channel(k).iter().sum()).collect();
    let shape = t.shape().to_vec();
    Var::from_op(Tensor::from_parts(vec![c], out), &[a], move |g| {
        let mut gi = Tensor::zeros(shape.clone());
        for k in 0..c {
            let v = g.data()[k];
            gi.channel_mut(k).iter_mut().for_each(|x| *x = v);
        }
        vec![Some(gi)]
    })
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let orig = a.shape().to_vec();
    let out = a
        .value()
        .clone()
        .reshape(shape.to_vec())
        .expect("reshape: element count mismatch");
    Var::from_op(out, &[a], move |g| {
        vec![Some(g.clone().reshape(orig.clone()).unwrap())]
    })
}

/// Concatenate along axis 0.
pub fn concat0(parts: &[&Var]) -> Var {
    let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
    let out = Tensor::concat0(&values).expect("concat0: trailing shapes differ");
    let sizes: Vec<(usize, Vec<usize>)> = parts
        .iter()
        .map(|p| (p.value().len(), p.shape().to_vec()))
        .collect();
    Var::from_op(out, parts, move |g| {
        let mut off = 0;
        sizes
            .iter()
            .map(|(n, shape)| {
                let t = Tensor::from_parts(shape.clone(), g.data()[off..off + n].to_vec());
                off += n;
                Some(t)
            })
            .collect()
    })
}

/// Slice `[start, end)` along axis 0.
pub fn slice0(a: &Var, start: usize, end: usize) -> Var {
    let t = a.value();
    assert!(start < end && end <= t.shape()[0], "slice0 out of range");
    let inner: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    let out = Tensor::from_parts(shape, t.data()[start * inner..end * inner].to_vec());
    let full = t.shape().to_vec();
    Var::from_op(out, &[a], move |g| {
        let mut gi = Tensor::zeros(full.clone());
        gi.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
        vec![Some(gi)]
    })
}

/// Column slice `[start, end)` of a 2D `[rows, cols]` tensor.
pub fn slice_cols(a: &Var, start: usize, end: usize) -> Var {
    let t = a.value();
    assert_eq!(t.ndim(), 2, "slice_cols needs a 2D tensor");
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    assert!(start < end && end <= cols, "slice_cols out of range");
    let w = end - start;
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        out.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
    }
    Var::from_op(Tensor::from_parts(vec![rows, w], out), &[a], move |g| {
        let mut gi = vec![0.0; rows * cols];
        for r in 0..rows {
            gi[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
        }
        vec![Some(Tensor::from_parts(vec![rows, cols], gi))]
    })
}

pub fn transpose2d(a: &Var) -> Var {
    let t = a.value();
    assert_eq!(t.ndim(), 2, "transpose2d needs a 2D tensor");
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let out = transpose_data(t.data(), r, c);
    Var::from_op(Tensor::from_parts(vec![c, r], out), &[a], move |g| {
        vec![Some(Tensor::from_parts(
            vec![r, c],
            transpose_data(g.data(), c, r),
        ))]
    })
}

pub(crate) fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = d[i * cols + j];
        }
    }
    out
}

/// Index map for [`gather`]: `NONE` yields zero.
pub const GATHER_NONE: usize = usize::MAX;

/// `out[i] = a[index[i]]` (flat indices; [`GATHER_NONE`] produces 0). Covers
/// permutations, padding, cropping, rolls and window partitions.
pub fn gather(a: &Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
    assert_eq!(shape.iter().product::<usize>(), index.len(), "gather shape");
    let src = a.value().data();
    let out: Vec<f64> = index
        .iter()
        .map(|&j| if j == GATHER_NONE { 0.0 } else { src[j] })
        .collect();
    let in_shape = a.shape().to_vec();
    Var::from_op(Tensor::from_parts(shape.to_vec(), out), &[a], move |g| {
        let mut gi = Tensor::zeros(in_shape.clone());
        let d = gi.data_mut();
        for (&j, &gv) in index.iter().zip(g.data()) {
            if j != GATHER_NONE {
                d[j] += gv;
            }
        }
        vec![Some(gi)]
    })
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check, rand_tensor};
    use super::*;

    #[test]
    fn elementwise_gradients() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[3, 4], 2).map(|v| v + 2.5);
        let err = check(
            &[a, b],
            |v| {
                let x = div(&mul(&v[0], &v[1]), &v[1]);
                let y = add(&gelu(&x), &silu(&v[1]));
                let z = sub(&softplus(&y), &sigmoid(&exp(&scale(&v[0], 0.3))));
                sum(&add(&square(&z), &sqrt(&add_scalar(&v[1], 0.1))))
            },
            1e-5,
            100,
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn layout_gradients() {
        let a = rand_tensor(&[4, 6], 3);
        let idx = Rc::new(vec![5, GATHER_NONE, 0, 0, 23, 7]);
        let err = check(
            &[a],
            |v| {
                let t = transpose2d(&slice_cols(&v[0], 1, 5));
                let c = concat0(&[&t, &reshape(&slice0(&v[0], 1, 3), &[3, 4])]);
                let g = gather(&v[0], idx.clone(), &[2, 3]);
                let s = sum_channels(&reshape(&c, &[2, 14]));
                add(&sum(&square(&s)), &sum(&square(&g)))
            },
            1e-5,
            100,
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn leaky_relu_values() {
        let x = Var::constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(leaky_relu(&x, 0.2).value().data(), &[-0.2, 2.0]);
    }
}
