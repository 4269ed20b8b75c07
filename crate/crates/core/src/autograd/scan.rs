//! Selective state-space scan with zero-order-hold discretization.
//!
//! For each channel `e` and state `n`:
//!
//! ```text
//! a_t = exp(delta_t * A)            b_t = (a_t - 1) / A * B_t
//! h_t = a_t * h_{t-1} + b_t * u_t   y_t = sum_n C_t h_t + D * u_t
//! ```

use super::Var;
use crate::tensor::Tensor;

/// Operands of [`selective_scan`]. `u`, `delta`: `[L, E]`; `a`: `[E, N]`;
/// `b`, `c`: `[L, N]`; `d`: `[E]`.
pub struct ScanInputs<'a> {
    pub u: &'a Var,
    pub delta: &'a Var,
    pub a: &'a Var,
    pub b: &'a Var,
    pub c: &'a Var,
    pub d: &'a Var,
}

/// `(exp(dt * a) - 1) / a`, continuous at `a = 0`.
#[inline]
fn zoh(dt: f64, a: f64, ea: f64) -> f64 {
    if a.abs() < 1e-12 {
        dt
    } else {
        (ea - 1.0) / a
    }
}

fn dims(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> (usize, usize, usize) {
    let (l, e) = (u.shape()[0], u.shape()[1]);
    let n = a.shape()[1];
    assert_eq!(u.ndim(), 2, "scan: u must be [L, E]");
    assert_eq!(delta.shape(), u.shape(), "scan: delta must match u");
    assert_eq!(a.shape(), &[e, n], "scan: A must be [E, N]");
    assert_eq!(b.shape(), &[l, n], "scan: B must be [L, N]");
    assert_eq!(c.shape(), &[l, n], "scan: C must be [L, N]");
    assert_eq!(d.shape(), &[e], "scan: D must be [E]");
    (l, e, n)
}

/// Plain sequential recurrence on tensors.
pub fn selective_scan_reference(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Tensor {
    let (l, e, n) = dims(u, delta, a, b, c, d);
    let mut h = vec![0.0; e * n];
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        for ei in 0..e {
            let dt = delta.data()[t * e + ei];
            let ut = u.data()[t * e + ei];
            let mut acc = d.data()[ei] * ut;
            for ni in 0..n {
                let av = a.data()[ei * n + ni];
                let ea = (dt * av).exp();
                let hv = &mut h[ei * n + ni];
                *hv = ea * *hv + zoh(dt, av, ea) * b.data()[t * n + ni] * ut;
                acc += c.data()[t * n + ni] * *hv;
            }
            y[t * e + ei] = acc;
        }
    }
    Tensor::from_parts(vec![l, e], y)
}

/// Differentiable selective scan returning `y [L, E]`.
pub fn selective_scan(inp: &ScanInputs) -> Var {
    let (uv, dv, av, bv, cv, ddv) = (
        inp.u.value(),
        inp.delta.value(),
        inp.a.value(),
        inp.b.value(),
        inp.c.value(),
        inp.d.value(),
    );
    let (l, e, n) = dims(uv, dv, av, bv, cv, ddv);
    // States after every step, [L, E, N].
    let mut hs = vec![0.0; l * e * n];
    let mut y = vec![0.0; l * e];
    {
        let (u, dl, a, b, c, d) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data(), ddv.data());
        for t in 0..l {
            let (prev, cur) = if t == 0 {
                (None, &mut hs[..e * n])
            } else {
                let (p, c) = hs[(t - 1) * e * n..(t + 1) * e * n].split_at_mut(e * n);
                (Some(&*p), c)
            };
            for ei in 0..e {
                let dt = dl[t * e + ei];
                let ut = u[t * e + ei];
                let mut acc = d[ei] * ut;
                for ni in 0..n {
                    let k = ei * n + ni;
                    let ea = (dt * a[k]).exp();
                    let hp = prev.map_or(0.0, |p| p[k]);
                    let hv = ea * hp + zoh(dt, a[k], ea) * b[t * n + ni] * ut;
                    cur[k] = hv;
                    acc += c[t * n + ni] * hv;
                }
                y[t * e + ei] = acc;
            }
        }
    }
    let saved: Vec<Var> = [inp.u, inp.delta, inp.a, inp.b, inp.c, inp.d]
        .iter()
        .map(|v| (*v).clone())
        .collect();
    let parents = [inp.u, inp.delta, inp.a, inp.b, inp.c, inp.d];
    Var::from_op(Tensor::from_parts(vec![l, e], y), &parents, move |g| {
        let [u, dl, a, b, c, d] = [0, 1, 2, 3, 4, 5].map(|i| saved[i].value().data());
        let gy = g.data();
        let mut gu = vec![0.0; l * e];
        let mut gdl = vec![0.0; l * e];
        let mut ga = vec![0.0; e * n];
        let mut gb = vec![0.0; l * n];
        let mut gc = vec![0.0; l * n];
        let mut gd = vec![0.0; e];
        // Adjoint of h_t, carried backward through a_{t+1}.
        let mut gh = vec![0.0; e * n];
        let mut next_a = vec![0.0; e * n];
        for t in (0..l).rev() {
            let h = &hs[t * e * n..(t + 1) * e * n];
            for ei in 0..e {
                let idx = t * e + ei;
                let (dt, ut, g) = (dl[idx], u[idx], gy[idx]);
                gd[ei] += g * ut;
                gu[idx] += g * d[ei];
                for ni in 0..n {
                    let k = ei * n + ni;
                    let av = a[k];
                    let ea = (dt * av).exp();
                    let bt = b[t * n + ni];
                    let z = zoh(dt, av, ea);
                    let hv = h[k];
                    let hp = if t == 0 { 0.0 } else { hs[(t - 1) * e * n + k] };
                    gc[t * n + ni] += g * hv;
                    let adj = g * c[t * n + ni] + next_a[k] * gh[k];
                    gh[k] = adj;
                    next_a[k] = ea;
                    // h_t = ea * hp + z * bt * ut
                    gu[idx] += adj * z * bt;
                    gb[t * n + ni] += adj * z * ut;
                    let g_ea = adj * hp;
                    let g_z = adj * bt * ut;
                    // d ea / d dt = av * ea, d z / d dt = ea
                    gdl[idx] += g_ea * av * ea + g_z * ea;
                    // d ea / d a = dt * ea, d z / d a = (dt * ea * a - (ea - 1)) / a^2
                    let dz_da = if av.abs() < 1e-12 {
                        dt * dt / 2.0
                    } else {
                        (dt * ea * av - (ea - 1.0)) / (av * av)
                    };
                    ga[k] += g_ea * dt * ea + g_z * dz_da;
                }
            }
        }
        let shapes = [vec![l, e], vec![l, e], vec![e, n], vec![l, n], vec![l, n], vec![e]];
        let grads = [gu, gdl, ga, gb, gc, gd];
        grads
            .into_iter()
            .zip(shapes)
            .zip(saved.iter())
            .map(|((g, s), v)| v.requires_grad().then(|| Tensor::from_parts(s, g)))
            .collect()
    })
}
