//! Dense matrix products on top of `matrixmultiply::dgemm`.

use std::sync::atomic::{AtomicU64, Ordering};

use super::Var;
use crate::tensor::Tensor;

static GEMM_FLOPS: AtomicU64 = AtomicU64::new(0);

/// Floating-point operations issued through [`gemm`] since the last reset.
pub fn gemm_flops() -> u64 {
    GEMM_FLOPS.load(Ordering::Relaxed)
}

pub fn reset_gemm_flops() {
    GEMM_FLOPS.store(0, Ordering::Relaxed);
}

/// Strided matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows x cols`.
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn rm_t(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, `c` row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k > 0 {
        assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs, "gemm: lhs too small");
        assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs, "gemm: rhs too small");
    }
    GEMM_FLOPS.fetch_add(2 * (m * k * n) as u64, Ordering::Relaxed);
    // SAFETY: the asserts above bound every index dgemm touches given the
    // strides; `c` is an exclusive slice of at least m * n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m x k) @ b (k x n)`.
pub fn matmul(a: &Var, b: &Var) -> Var {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} @ {sb:?}");
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, Mat::rm(a.value().data(), k), Mat::rm(b.value().data(), n), 0.0, &mut out);
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(Tensor::from_parts(vec![m, n], out), &[a, b], move |g| {
        let ga = ac.requires_grad().then(|| {
            let mut d = vec![0.0; m * k];
            gemm(m, n, k, 1.0, Mat::rm(g.data(), n), Mat::rm_t(bc.value().data(), n), 0.0, &mut d);
            Tensor::from_parts(vec![m, k], d)
        });
        let gb = bc.requires_grad().then(|| {
            let mut d = vec![0.0; k * n];
            gemm(k, m, n, 1.0, Mat::rm_t(ac.value().data(), k), Mat::rm(g.data(), n), 0.0, &mut d);
            Tensor::from_parts(vec![k, n], d)
        });
        vec![ga, gb]
    })
}

/// `x (L x in) @ w^T (w: out x in) + b`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Var {
    let (sx, sw) = (x.shape(), w.shape());
    assert!(sx.len() == 2 && sw.len() == 2 && sx[1] == sw[1], "linear {sx:?} x {sw:?}");
    let (l, cin, cout) = (sx[0], sx[1], sw[0]);
    let mut out = vec![0.0; l * cout];
    if let Some(b) = b {
        assert_eq!(b.shape(), &[cout], "linear bias shape");
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.value().data());
        }
    }
    gemm(
        l,
        cin,
        cout,
        1.0,
        Mat::rm(x.value().data(), cin),
        Mat::rm_t(w.value().data(), cin),
        1.0,
        &mut out,
    );
    let (xc, wc) = (x.clone(), w.clone());
    let has_bias = b.is_some();
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    Var::from_op(Tensor::from_parts(vec![l, cout], out), &parents, move |g| {
        let gx = xc.requires_grad().then(|| {
            let mut d = vec![0.0; l * cin];
            gemm(l, cout, cin, 1.0, Mat::rm(g.data(), cout), Mat::rm(wc.value().data(), cin), 0.0, &mut d);
            Tensor::from_parts(vec![l, cin], d)
        });
        let gw = wc.requires_grad().then(|| {
            let mut d = vec![0.0; cout * cin];
            gemm(cout, l, cin, 1.0, Mat::rm_t(g.data(), cout), Mat::rm(xc.value().data(), cin), 0.0, &mut d);
            Tensor::from_parts(vec![cout, cin], d)
        });
        let mut res = vec![gx, gw];
        if has_bias {
            let mut gb = vec![0.0; cout];
            for row in g.data().chunks(cout) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            res.push(Some(Tensor::from_parts(vec![cout], gb)));
        }
        res
    })
}
